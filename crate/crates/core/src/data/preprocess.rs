//! Image decoding, resizing, augmentation, normalization, and patch splitting.

use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ImageInput;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: u32 = 224;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreprocessMode {
    Train,
    Eval,
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.481_454_66, 0.457_827_5, 0.408_210_73],
            std: [0.268_629_54, 0.261_302_58, 0.275_777_11],
        }
    }
}

/// Channel-major (3 × size × size) normalized pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessedImage {
    pub size: usize,
    pub data: Vec<f64>,
}

/// Crop box from torchvision-style random resized crop: area 8–100%, aspect 3/4–4/3.
fn random_resized_crop<R: Rng + ?Sized>(w: u32, h: u32, rng: &mut R) -> (u32, u32, u32, u32) {
    let area = (w * h) as f64;
    for _ in 0..10 {
        let target = area * rng.random_range(0.08..=1.0);
        let log_ratio = rng.random_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln());
        let ratio = log_ratio.exp();
        let cw = (target * ratio).sqrt().round() as u32;
        let ch = (target / ratio).sqrt().round() as u32;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let x = rng.random_range(0..=w - cw);
            let y = rng.random_range(0..=h - ch);
            return (x, y, cw, ch);
        }
    }
    // fall back to a center crop at the clamped aspect ratio
    let in_ratio = w as f64 / h as f64;
    let (cw, ch) = if in_ratio < 3.0 / 4.0 {
        (w, (w as f64 / (3.0 / 4.0)).round() as u32)
    } else if in_ratio > 4.0 / 3.0 {
        ((h as f64 * 4.0 / 3.0).round() as u32, h)
    } else {
        (w, h)
    };
    ((w - cw) / 2, (h - ch) / 2, cw, ch)
}

pub fn preprocess_image<R: Rng + ?Sized>(
    img: &DynamicImage,
    mode: PreprocessMode,
    norm: &Normalization,
    rng: &mut R,
) -> PreprocessedImage {
    let rgb: RgbImage = match mode {
        PreprocessMode::Eval => img.resize_exact(IMAGE_SIZE, IMAGE_SIZE, FilterType::CatmullRom).to_rgb8(),
        PreprocessMode::Train => {
            let (x, y, cw, ch) = random_resized_crop(img.width(), img.height(), rng);
            let mut out = img
                .crop_imm(x, y, cw, ch)
                .resize_exact(IMAGE_SIZE, IMAGE_SIZE, FilterType::CatmullRom);
            if rng.random_bool(0.5) {
                out = out.fliph();
            }
            out.to_rgb8()
        }
    };
    let s = IMAGE_SIZE as usize;
    let mut data = vec![0.0; 3 * s * s];
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            let v = p.0[c] as f64 / 255.0;
            data[c * s * s + y as usize * s + x as usize] = (v - norm.mean[c]) / norm.std[c];
        }
    }
    PreprocessedImage { size: s, data }
}

pub fn preprocess<R: Rng + ?Sized>(
    path: &Path,
    mode: PreprocessMode,
    norm: &Normalization,
    rng: &mut R,
) -> Result<PreprocessedImage> {
    let img = image::open(path).map_err(|e| Error::Data {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    Ok(preprocess_image(&img, mode, norm, rng))
}

/// Split into grid × grid square patches, each flattened channel-major.
pub fn patchify(img: &PreprocessedImage, grid: usize) -> Result<ImageInput> {
    if grid == 0 || !img.size.is_multiple_of(grid) {
        return Err(Error::Shape(format!(
            "{}-pixel image does not split into a {grid}×{grid} grid",
            img.size
        )));
    }
    let p = img.size / grid;
    let s = img.size;
    let mut out = Tensor::zeros(grid * grid, 3 * p * p);
    for gy in 0..grid {
        for gx in 0..grid {
            let row = out.row_mut(gy * grid + gx);
            let mut k = 0;
            for c in 0..3 {
                for y in 0..p {
                    for x in 0..p {
                        row[k] = img.data[c * s * s + (gy * p + y) * s + gx * p + x];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(ImageInput::new(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn write_png(dir: &Path) -> std::path::PathBuf {
        let img = RgbImage::from_fn(40, 30, |x, y| image::Rgb([(x * 6) as u8, (y * 8) as u8, 100]));
        let path = dir.join("t.png");
        img.save(&path).unwrap();
        path
    }

    #[test]
    fn eval_is_deterministic_and_224() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_png(dir.path());
        let n = Normalization::default();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let a = preprocess(&path, PreprocessMode::Eval, &n, &mut r).unwrap();
        let b = preprocess(&path, PreprocessMode::Eval, &n, &mut r).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.size, 224);
        assert_eq!(a.data.len(), 3 * 224 * 224);
    }

    #[test]
    fn train_is_seed_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_png(dir.path());
        let n = Normalization::default();
        let a = preprocess(&path, PreprocessMode::Train, &n, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = preprocess(&path, PreprocessMode::Train, &n, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.size, 224);
    }

    #[test]
    fn undecodable_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jpg");
        std::fs::write(&path, b"not an image").unwrap();
        let r = preprocess(&path, PreprocessMode::Eval, &Normalization::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Data { .. })));
    }

    #[test]
    fn patch_layout() {
        let s = 4;
        let data: Vec<f64> = (0..3 * s * s).map(|i| i as f64).collect();
        let p = patchify(&PreprocessedImage { size: s, data }, 2).unwrap();
        assert_eq!(p.patches.shape(), (4, 12));
        // patch (gx=1, gy=0), channel 0, pixel (0,0) sits at x=2, y=0
        assert_eq!(p.patches.get(1, 0), 2.0);
        assert_eq!(p.patches.get(2, 0), 8.0);
        assert!(patchify(&PreprocessedImage { size: 5, data: vec![0.0; 75] }, 2).is_err());
    }
}
