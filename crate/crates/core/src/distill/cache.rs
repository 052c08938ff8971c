//! Persistent store of teacher distributions keyed by (image id, class-set hash).
//!
//! File layout:
//!
//! ```text
//! header   "KDPLTC\0\x01"
//! record*  u32 id_len | id (utf-8) | 32-byte class-set hash | u32 C | C × f64 | 8-byte checksum
//! footer   u64 count | count × u64 record offset | u64 footer_start | "KDPLIDX1"
//! ```
//!
//! All integers are little-endian. The checksum is the first 8 bytes of the
//! SHA-256 of the record body. Appends overwrite the old footer and write a new
//! one. A missing or damaged footer falls back to a sequential scan.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const HEADER: &[u8; 8] = b"KDPLTC\0\x01";
const FOOTER_MAGIC: &[u8; 8] = b"KDPLIDX1";

type Key = (String, [u8; 32]);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub corrupt_records: u64,
    pub entries: u64,
}

struct FileState {
    file: File,
    offsets: Vec<u64>,
    footer_start: u64,
}

pub struct TeacherPredictionCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<Key, Arc<[f64]>>>,
    file: Mutex<Option<FileState>>,
    hits: AtomicU64,
    misses: AtomicU64,
    corrupt: AtomicU64,
}

impl std::fmt::Debug for TeacherPredictionCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TeacherPredictionCache")
            .field("path", &self.path)
            .field("stats", &self.stats())
            .finish()
    }
}

fn checksum(body: &[u8]) -> [u8; 8] {
    let digest = Sha256::digest(body);
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    out
}

fn encode_record(id: &str, hash: &[u8; 32], probs: &[f64]) -> Vec<u8> {
    let mut body = Vec::with_capacity(4 + id.len() + 32 + 4 + probs.len() * 8 + 8);
    body.extend_from_slice(&(id.len() as u32).to_le_bytes());
    body.extend_from_slice(id.as_bytes());
    body.extend_from_slice(hash);
    body.extend_from_slice(&(probs.len() as u32).to_le_bytes());
    for p in probs {
        body.extend_from_slice(&p.to_le_bytes());
    }
    let sum = checksum(&body);
    body.extend_from_slice(&sum);
    body
}

enum Parsed {
    Ok(Key, Vec<f64>, usize),
    /// Well-framed record whose checksum does not match; carries the next offset.
    Corrupt(usize),
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
}

fn read_u64(bytes: &[u8], at: usize) -> Option<u64> {
    bytes.get(at..at + 8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
}

/// Parse one record at `at` inside `bytes[..end]`; `None` when framing is broken.
fn parse_record(bytes: &[u8], at: usize, end: usize) -> Option<Parsed> {
    let bytes = &bytes[..end];
    let id_len = read_u32(bytes, at)? as usize;
    let id_start = at + 4;
    let hash_start = id_start.checked_add(id_len)?;
    let c_at = hash_start + 32;
    let c = read_u32(bytes, c_at)? as usize;
    let probs_start = c_at + 4;
    let sum_start = probs_start.checked_add(c.checked_mul(8)?)?;
    let next = sum_start + 8;
    if next > bytes.len() {
        return None;
    }
    if checksum(&bytes[at..sum_start]) != bytes[sum_start..next] {
        return Some(Parsed::Corrupt(next));
    }
    let Ok(id) = std::str::from_utf8(&bytes[id_start..hash_start]) else {
        return Some(Parsed::Corrupt(next));
    };
    let mut hash = [0u8; 32];
    hash.copy_from_slice(&bytes[hash_start..c_at]);
    let probs = bytes[probs_start..sum_start]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Some(Parsed::Ok((id.to_string(), hash), probs, next))
}

/// Offsets listed by a well-formed footer, plus where the footer starts.
fn read_footer(bytes: &[u8]) -> Option<(Vec<u64>, u64)> {
    let len = bytes.len();
    if len < HEADER.len() + 24 || &bytes[len - 8..] != FOOTER_MAGIC {
        return None;
    }
    let footer_start = read_u64(bytes, len - 16)?;
    let fs = usize::try_from(footer_start).ok()?;
    let count = read_u64(bytes, fs)? as usize;
    if fs.checked_add(8 + count.checked_mul(8)? + 16)? != len {
        return None;
    }
    let offsets = (0..count)
        .map(|i| read_u64(bytes, fs + 8 + 8 * i))
        .collect::<Option<Vec<u64>>>()?;
    if offsets.iter().any(|&o| o < HEADER.len() as u64 || o >= footer_start) {
        return None;
    }
    Some((offsets, footer_start))
}

fn encode_footer(offsets: &[u64], footer_start: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + offsets.len() * 8 + 16);
    out.extend_from_slice(&(offsets.len() as u64).to_le_bytes());
    for o in offsets {
        out.extend_from_slice(&o.to_le_bytes());
    }
    out.extend_from_slice(&footer_start.to_le_bytes());
    out.extend_from_slice(FOOTER_MAGIC);
    out
}

impl TeacherPredictionCache {
    /// A cache that lives only as long as the process.
    pub fn in_memory() -> Self {
        Self {
            path: None,
            entries: RwLock::new(HashMap::new()),
            file: Mutex::new(None),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            corrupt: AtomicU64::new(0),
        }
    }

    /// Open or create the store at `path`.
    ///
    /// Records failing their checksum are dropped and counted; callers recompute
    /// them on the next miss.
    pub fn open(path: &Path) -> Result<Self> {
        let cache = Self {
            path: Some(path.to_path_buf()),
            ..Self::in_memory()
        };
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)?;
        let bytes = std::fs::read(path)?;
        let mut entries = HashMap::new();
        let mut offsets = Vec::new();
        let footer_start;
        if bytes.is_empty() {
            file.write_all(HEADER)?;
            footer_start = HEADER.len() as u64;
            file.write_all(&encode_footer(&[], footer_start))?;
            file.flush()?;
        } else {
            if bytes.len() < HEADER.len() || &bytes[..HEADER.len()] != HEADER {
                return Err(Error::Cache(format!(
                    "{} is not a teacher cache file",
                    path.display()
                )));
            }
            let mut corrupt = 0u64;
            match read_footer(&bytes) {
                Some((listed, fs)) => {
                    footer_start = fs;
                    for o in listed {
                        match parse_record(&bytes, o as usize, fs as usize) {
                            Some(Parsed::Ok(k, p, _)) => {
                                entries.insert(k, Arc::from(p));
                                offsets.push(o);
                            }
                            _ => corrupt += 1,
                        }
                    }
                }
                None => {
                    log::warn!("{}: index footer unreadable, scanning records", path.display());
                    let mut at = HEADER.len();
                    loop {
                        match parse_record(&bytes, at, bytes.len()) {
                            Some(Parsed::Ok(k, p, next)) => {
                                entries.insert(k, Arc::from(p));
                                offsets.push(at as u64);
                                at = next;
                            }
                            Some(Parsed::Corrupt(next)) => {
                                corrupt += 1;
                                at = next;
                            }
                            None => break,
                        }
                    }
                    footer_start = at as u64;
                }
            }
            if corrupt > 0 {
                log::warn!(
                    "{}: {corrupt} corrupt teacher records dropped; they will be recomputed",
                    path.display()
                );
            }
            cache.corrupt.store(corrupt, Ordering::Relaxed);
        }
        *cache.entries.write().unwrap() = entries;
        *cache.file.lock().unwrap() = Some(FileState {
            file,
            offsets,
            footer_start,
        });
        Ok(cache)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, image_id: &str, class_set: &[u8; 32]) -> Option<Arc<[f64]>> {
        let found = self
            .entries
            .read()
            .unwrap()
            .get(&(image_id.to_string(), *class_set))
            .cloned();
        match found {
            Some(_) => self.hits.fetch_add(1, Ordering::Relaxed),
            None => self.misses.fetch_add(1, Ordering::Relaxed),
        };
        found
    }

    /// Store new distributions; persisted before returning when file-backed.
    pub fn insert_many(&self, records: Vec<(String, [u8; 32], Vec<f64>)>) -> Result<()> {
        if records.is_empty() {
            return Ok(());
        }
        let mut guard = self.file.lock().unwrap();
        if let Some(state) = guard.as_mut() {
            let mut buf = Vec::new();
            let mut offsets = state.offsets.clone();
            let mut at = state.footer_start;
            for (id, hash, probs) in &records {
                let rec = encode_record(id, hash, probs);
                offsets.push(at);
                at += rec.len() as u64;
                buf.extend_from_slice(&rec);
            }
            buf.extend_from_slice(&encode_footer(&offsets, at));
            state.file.set_len(state.footer_start)?;
            state.file.seek(SeekFrom::Start(state.footer_start))?;
            state.file.write_all(&buf)?;
            state.file.flush()?;
            state.offsets = offsets;
            state.footer_start = at;
        }
        let mut entries = self.entries.write().unwrap();
        for (id, hash, probs) in records {
            entries.insert((id, hash), Arc::from(probs));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            corrupt_records: self.corrupt.load(Ordering::Relaxed),
            entries: self.len() as u64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(i: usize) -> (String, [u8; 32], Vec<f64>) {
        (format!("img{i}"), [i as u8; 32], vec![0.25 + i as f64 * 1e-3, 0.75 - i as f64 * 1e-3])
    }

    #[test]
    fn persists_and_reloads_value_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cache");
        {
            let c = TeacherPredictionCache::open(&path).unwrap();
            c.insert_many(vec![sample(0), sample(1)]).unwrap();
            c.insert_many(vec![sample(2)]).unwrap();
        }
        let c = TeacherPredictionCache::open(&path).unwrap();
        assert_eq!(c.len(), 3);
        for i in 0..3 {
            let (id, h, p) = sample(i);
            assert_eq!(&*c.get(&id, &h).unwrap(), p.as_slice());
        }
        assert!(c.get("img9", &[0; 32]).is_none());
        let s = c.stats();
        assert_eq!((s.hits, s.misses, s.corrupt_records), (3, 1, 0));
    }

    #[test]
    fn corrupt_record_is_dropped_and_rest_survive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cache");
        {
            let c = TeacherPredictionCache::open(&path).unwrap();
            c.insert_many(vec![sample(0), sample(1)]).unwrap();
        }
        let mut bytes = std::fs::read(&path).unwrap();
        // flip one probability byte inside the first record
        let first_prob = HEADER.len() + 4 + 4 + 32 + 4;
        bytes[first_prob] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let c = TeacherPredictionCache::open(&path).unwrap();
        assert_eq!(c.stats().corrupt_records, 1);
        assert!(c.get("img0", &[0; 32]).is_none());
        assert!(c.get("img1", &[1; 32]).is_some());
        // recompute and append; the fresh value wins on reload
        c.insert_many(vec![sample(0)]).unwrap();
        drop(c);
        let c = TeacherPredictionCache::open(&path).unwrap();
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn damaged_footer_falls_back_to_scan() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cache");
        {
            let c = TeacherPredictionCache::open(&path).unwrap();
            c.insert_many(vec![sample(0), sample(1)]).unwrap();
        }
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 1] = b'?';
        std::fs::write(&path, &bytes).unwrap();
        let c = TeacherPredictionCache::open(&path).unwrap();
        assert_eq!(c.len(), 2);
        c.insert_many(vec![sample(3)]).unwrap();
        drop(c);
        assert_eq!(TeacherPredictionCache::open(&path).unwrap().len(), 3);
    }

    #[test]
    fn rejects_foreign_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        std::fs::write(&path, b"hello world, not a cache").unwrap();
        assert!(matches!(TeacherPredictionCache::open(&path), Err(Error::Cache(_))));
    }
}
