//! Acceptance criteria, one line per criterion.
//!
//! Runs without the libtest harness so the criteria execute in order and the
//! report is readable in `cargo test` output. Exits non-zero if any fails.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use kdpl_core::class_agnostic::{mean_over_batch, select_topk_indices, ClassVocabulary};
use kdpl_core::config::parse_config;
use kdpl_core::data::{
    generate_synthetic, sample_few_shot, PreprocessMode, Sample, SyntheticVLConfig, SyntheticWorld,
};
use kdpl_core::distill::{fit, kdpl_loss, kl_divergence, KlMode, Objective, Teacher, TrainConfig, Trainer};
use kdpl_core::eval::{average_over_targets, evaluate_accuracy, format_pct, harmonic_mean};
use kdpl_core::experiment::run_experiment;
use kdpl_core::model::{
    compute_class_probabilities, probabilities_from_cosines, ClassSet, DualEncoderModel, EmbeddingVector,
    EncoderConfig, ImageBackbone, ImageInput, ProbabilityDistribution, Role,
};
use kdpl_core::prompt::promptsrc::RegularizerWeights;
use kdpl_core::prompt::{PromptMethod, PromptParameters};
use kdpl_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;
type Criterion = (&'static str, &'static str, fn() -> Outcome, u64);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const EPS: f64 = 1e-12;
const TAU: f64 = 0.01;

fn random_dist(c: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..c)
        .map(|_| (2.0 * Distribution::<f64>::sample(&StandardNormal, rng)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Σ p ln((p+ε)/(q+ε)), written out independently of the library.
fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..p.len() {
        acc += p[i] * ((p[i] + EPS).ln() - (q[i] + EPS).ln());
    }
    acc
}

fn c1_kl_laws() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_sym = 0.0f64;
    for _ in 0..1000 {
        let c = rng.random_range(2..=50);
        let p = ProbabilityDistribution::new(random_dist(c, &mut rng), None).unwrap();
        let q = ProbabilityDistribution::new(random_dist(c, &mut rng), None).unwrap();
        let fwd = kl_divergence(&p, &q, EPS).unwrap();
        let rev = kl_divergence(&q, &p, EPS).unwrap();
        ensure!(fwd >= -1e-9 && rev >= -1e-9, "negative KL {fwd} / {rev}");
        ensure!((fwd - kl_oracle(p.probs(), q.probs())).abs() < 1e-12, "KL differs from oracle");
        ensure!(fwd > 1e-9, "distinct pair scored {fwd}");
        let self_kl = kl_divergence(&p, &p, EPS).unwrap();
        ensure!(self_kl.abs() <= 1e-12, "KL(p‖p) = {self_kl}");
        let sym = kdpl_loss(&p, &q, KlMode::Symmetric, EPS).unwrap();
        let swap = kdpl_loss(&q, &p, KlMode::Symmetric, EPS).unwrap();
        ensure!((sym - swap).abs() <= 1e-12, "symmetric mode not symmetric: {sym} vs {swap}");
        ensure!((sym - (fwd + rev)).abs() <= 1e-12, "symmetric ≠ forward + reverse");
        worst_sym = worst_sym.max((sym - swap).abs());
    }
    let t = ProbabilityDistribution::new(vec![0.7, 0.3], None).unwrap();
    let s = ProbabilityDistribution::new(vec![0.5, 0.5], None).unwrap();
    let fixed = kdpl_loss(&t, &s, KlMode::Symmetric, EPS).unwrap();
    let expect = 0.7 * (0.7f64 / 0.5).ln() + 0.3 * (0.3f64 / 0.5).ln() + 0.5 * (0.5f64 / 0.7).ln() + 0.5 * (0.5f64 / 0.3).ln();
    ensure!((fixed - expect).abs() < 1e-9, "fixed pair {fixed} vs {expect}");
    Ok(format!("1000 pairs, max |sym − swap| = {worst_sym:.1e}"))
}

fn unit_vec(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn c2_head() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..500 {
        let c = rng.random_range(2..=50);
        let cos: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let p = probabilities_from_cosines(&cos, TAU).unwrap();
        ensure!(p.iter().all(|x| x.is_finite() && *x >= 0.0), "non-finite probability");
        ensure!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6, "sum {}", p.iter().sum::<f64>());

        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<f64> = perm.iter().map(|&i| cos[i]).collect();
        let pp = probabilities_from_cosines(&permuted, TAU).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            ensure!(pp[j].to_bits() == p[i].to_bits(), "permutation changed a probability");
        }

        let d = 12;
        let img = unit_vec(d, &mut rng);
        let texts: Vec<Vec<f64>> = (0..c).map(|_| unit_vec(d, &mut rng)).collect();
        let emb = |v: &[f64], s: f64| EmbeddingVector(v.iter().map(|x| x * s).collect());
        let a = compute_class_probabilities(&emb(&img, 1.0), &texts.iter().map(|t| emb(t, 1.0)).collect::<Vec<_>>(), TAU).unwrap();
        let sa = rng.random_range(0.01..100.0);
        let st = rng.random_range(0.01..100.0);
        let b = compute_class_probabilities(&emb(&img, sa), &texts.iter().map(|t| emb(t, st)).collect::<Vec<_>>(), TAU).unwrap();
        for (x, y) in a.probs().iter().zip(b.probs()) {
            ensure!((x - y).abs() <= 1e-9, "scale changed probability by {}", (x - y).abs());
        }
    }
    for cos in [vec![1.0, -1.0], vec![-1.0, -1.0, 1.0], vec![1.0; 5]] {
        let p = probabilities_from_cosines(&cos, TAU).unwrap();
        ensure!(p.iter().all(|x| x.is_finite()), "extreme cosines gave non-finite output");
    }
    let p = probabilities_from_cosines(&[0.2, 0.1], TAU).unwrap();
    // 1 / (1 + e^-10)
    let oracle = 1.0 / (1.0 + (-10.0f64).exp());
    ensure!((p[0] - 0.9999546).abs() <= 1e-6 && (p[1] - 0.0000454).abs() <= 1e-6, "fixed case {p:?}");
    ensure!((p[0] - oracle).abs() <= 1e-15, "fixed case vs oracle {}", p[0] - oracle);
    Ok(format!("500 cases, fixed case [{:.7}, {:.7}]", p[0], p[1]))
}

fn toy_config() -> EncoderConfig {
    EncoderConfig {
        shared_dim: 16,
        text_token_dim: 16,
        patch_dim: 16,
        num_layers: 3,
        num_patches: 4,
        patch_input_dim: 12,
        vocab_size: 512,
        max_text_len: 16,
        mlp_hidden: 32,
        image_backbone: ImageBackbone::Vit,
    }
}

struct Toy {
    student: DualEncoderModel,
    teacher: Teacher,
    samples: Vec<Sample>,
    classes: ClassSet,
}

fn toy(seed: u64) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let student = DualEncoderModel::random(toy_config(), Role::Student, &mut rng).unwrap();
    let teacher_cfg = EncoderConfig {
        shared_dim: 24,
        text_token_dim: 24,
        patch_dim: 24,
        ..toy_config()
    };
    let teacher = DualEncoderModel::random(teacher_cfg, Role::Teacher, &mut rng).unwrap();
    let teacher = Teacher::new(teacher, "a photo of {}", TAU).unwrap();
    let classes = ClassSet::new(["cat", "dog", "owl", "fox", "yak"].map(String::from)).unwrap();
    let samples = (0..6)
        .map(|i| Sample {
            id: format!("toy/{i}"),
            label: i % 5,
            image: ImageInput::new(Tensor::randn(4, 12, 1.0, &mut rng)),
        })
        .collect();
    Toy {
        student,
        teacher,
        samples,
        classes,
    }
}

/// Worst relative error between analytic and central-difference gradients.
fn fd_check(trainer: &Trainer<'_>, gamma: &PromptParameters, batch: &[usize], h: f64) -> (f64, String) {
    let (_, grads, _) = trainer.loss_and_gradients(gamma, batch).unwrap();
    let loss_at = |g: &PromptParameters| trainer.loss_and_gradients(g, batch).unwrap().0;
    let mut worst = (0.0f64, String::new());
    let names: Vec<String> = gamma.tensors().into_iter().map(|(n, _)| n).collect();
    for (ti, name) in names.iter().enumerate() {
        for k in 0..grads[ti].len() {
            let mut plus = gamma.clone();
            plus.tensors_mut()[ti].data_mut()[k] += h;
            let mut minus = gamma.clone();
            minus.tensors_mut()[ti].data_mut()[k] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let an = grads[ti].data()[k];
            let scale = an.abs().max(fd.abs());
            let rel = if scale == 0.0 { 0.0 } else { (an - fd).abs() / scale };
            if rel > worst.0 {
                worst = (rel, format!("{name}[{k}]: analytic {an:.6e}, numeric {fd:.6e}"));
            }
        }
    }
    worst
}

fn c3_gradients() -> Outcome {
    let t = toy(3);
    let h = 1e-3;
    let batch = [0, 1];
    let mut summary = Vec::new();
    let mut full_src = None;
    for method in PromptMethod::ALL {
        let mut cfg = TrainConfig::for_method(method, Objective::Kdpl);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut gamma = PromptParameters::init(method, &t.student, cfg.prompt.clone(), &mut rng).unwrap();
        // move off the zero-initialized meta-net output so every path carries gradient
        for ten in gamma.tensors_mut() {
            for x in ten.data_mut() {
                *x += 0.05 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            }
        }
        if method == PromptMethod::Promptsrc {
            // the self-regularizer sits outside head → distillation loss and has |·| kinks
            let full = Trainer::new(&t.student, Some(&t.teacher), &t.samples, &t.classes, None, cfg.clone(), None)
                .map_err(|e| e.to_string())?;
            full_src = Some(fd_check(&full, &gamma, &batch, h));
            cfg.promptsrc.weights = RegularizerWeights {
                text_l1: 0.0,
                image_l1: 0.0,
                kl: 0.0,
            };
        }
        let trainer = Trainer::new(&t.student, Some(&t.teacher), &t.samples, &t.classes, None, cfg, None)
            .map_err(|e| e.to_string())?;
        let worst = fd_check(&trainer, &gamma, &batch, h);
        ensure!(worst.0 <= 1e-4, "{method}: relative error {:.2e} at {}", worst.0, worst.1);
        summary.push(format!("{method} {:.1e}", worst.0));
    }
    let (rel, at) = full_src.unwrap();
    Ok(format!(
        "max relative error: {}; promptsrc with regularizer (not gated) {rel:.1e} at {at}",
        summary.join(", ")
    ))
}

fn expected_count(method: PromptMethod, c: &EncoderConfig) -> usize {
    let (dw, dv, d, l) = (c.text_token_dim, c.patch_dim, c.shared_dim, c.num_layers);
    let depth9 = 9.min(l);
    match method {
        PromptMethod::Coop => 4 * dw,
        PromptMethod::Cocoop => {
            let h = (d / 16).max(1);
            4 * dw + d * h + h + h * dw + dw
        }
        PromptMethod::VptShallow => 8 * dv,
        PromptMethod::VptDeep => 8 * dv * 12.min(l),
        PromptMethod::Maple => depth9 * (2 * dw) + depth9 * (dw * dv + dv),
        PromptMethod::Promptsrc => depth9 * (4 * dw + 4 * dv),
    }
}

fn c4_frozen() -> Outcome {
    let t = toy(4);
    let student_before = t.student.to_bytes().unwrap();
    let mut counts = Vec::new();
    for method in PromptMethod::ALL {
        let cfg = TrainConfig::for_method(method, Objective::Kdpl);
        let mut trainer = Trainer::new(&t.student, Some(&t.teacher), &t.samples, &t.classes, None, cfg.clone(), None)
            .map_err(|e| e.to_string())?;
        let mut gamma =
            PromptParameters::init(method, &t.student, cfg.prompt.clone(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let gamma0 = gamma.clone();
        for step in 0..10 {
            let batch = [step % 6, (step + 1) % 6];
            trainer.step(&mut gamma, &batch, 0.01).map_err(|e| e.to_string())?;
        }
        ensure!(gamma != gamma0, "{method}: γ did not move");
        ensure!(t.student.to_bytes().unwrap() == student_before, "{method}: student weights changed");
        let want = expected_count(method, t.student.config());
        ensure!(
            gamma.trainable_parameter_count() == want,
            "{method}: {} trainable parameters, closed form says {want}",
            gamma.trainable_parameter_count()
        );
        counts.push(format!("{method} {want}"));
    }
    Ok(format!("encoders byte-identical; parameter counts {}", counts.join(", ")))
}

fn c5_topk() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ties = 0;
    for _ in 0..500 {
        let n = rng.random_range(1..=8);
        let c = rng.random_range(1..=5000);
        let k = rng.random_range(1..=1000);
        // coarse levels force many exact ties
        let levels = rng.random_range(2..=50);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let w: Vec<f64> = (0..c).map(|_| rng.random_range(0..levels) as f64 + 1.0).collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|x| x / s).collect()
            })
            .collect();
        let mean = mean_over_batch(&Tensor::from_rows(&rows).unwrap()).unwrap();
        let got = select_topk_indices(&mean, k).unwrap();
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| mean[b].partial_cmp(&mean[a]).unwrap().then(a.cmp(&b)));
        if k < c && mean[order[k - 1]] == mean[order[k]] {
            ties += 1;
        }
        let mut want: Vec<usize> = order.into_iter().take(k.min(c)).collect();
        want.sort_unstable();
        ensure!(got == want, "mismatch for N={n}, C={c}, K={k}");
    }
    Ok(format!("500 selections match the full-sort oracle ({ties} with a tie at the K boundary)"))
}

fn small_world() -> SyntheticWorld {
    generate_synthetic(&SyntheticVLConfig {
        train_per_class: 8,
        test_per_class: 10,
        ..Default::default()
    })
    .unwrap()
}

fn episode(world: &SyntheticWorld, shots: usize, seed: u64) -> Vec<Sample> {
    let ep = sample_few_shot(&world.source.splits.train, shots, seed).unwrap();
    world
        .source
        .feature_source(world.config.num_patches)
        .samples(&ep.items, PreprocessMode::Train, seed)
        .unwrap()
}

fn c6_label_independence() -> Outcome {
    let world = small_world();
    let teacher = Teacher::new(world.teacher.clone(), "a photo of {}", TAU).unwrap();
    let classes = world.source.splits.train.class_set().unwrap();
    let vocab = ClassVocabulary::new(&world.vocabulary).unwrap();
    let samples = episode(&world, 4, 6);
    let sentinel: Vec<Sample> = samples
        .iter()
        .map(|s| Sample {
            label: usize::MAX,
            ..s.clone()
        })
        .collect();
    for objective in [Objective::Kdpl, Objective::CaKdpl] {
        let mut cfg = TrainConfig::for_method(PromptMethod::Coop, objective);
        cfg.epochs = 3;
        cfg.batch_size = 8;
        cfg.top_k = 50;
        let run = |data: &[Sample]| {
            let mut tr = Trainer::new(&world.student, Some(&teacher), data, &classes, Some(&vocab), cfg.clone(), None).unwrap();
            let mut g = PromptParameters::init(cfg.method, &world.student, cfg.prompt.clone(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
            let rep = fit(&mut tr, &mut g).unwrap();
            (rep.step_losses, g.to_bytes().unwrap())
        };
        let (la, ga) = run(&samples);
        let (lb, gb) = run(&sentinel);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        ensure!(bits(&la) == bits(&lb), "{objective}: losses depend on labels");
        ensure!(ga == gb, "{objective}: trained γ depends on labels");
    }
    Ok("KDPL and CA-KDPL losses and γ bitwise equal with sentinel labels".into())
}

fn source_accuracy(world: &SyntheticWorld, prompt: Option<&PromptParameters>) -> f64 {
    let ds = &world.source;
    let test = ds
        .feature_source(world.config.num_patches)
        .samples(&ds.splits.test.items, PreprocessMode::Eval, 0)
        .unwrap();
    evaluate_accuracy(&world.student, prompt, &test, &ds.splits.test.class_set().unwrap(), TAU).unwrap()
}

fn c7_efficacy() -> Outcome {
    let world = generate_synthetic(&SyntheticVLConfig::default()).unwrap();
    ensure!(world.teacher_accuracy >= 0.95, "teacher accuracy {}", world.teacher_accuracy);
    let teacher = Teacher::new(world.teacher.clone(), "a photo of {}", TAU).unwrap();
    let classes = world.source.splits.train.class_set().unwrap();
    let zs = source_accuracy(&world, None);
    let mut lines = Vec::new();
    for seed in [1, 2, 3] {
        let samples = episode(&world, 16, seed);
        let mut cfg = TrainConfig::for_method(PromptMethod::Coop, Objective::Kdpl);
        cfg.seed = seed;
        ensure!(cfg.epochs == 50, "CoOp default epochs {}", cfg.epochs);
        let mut tr = Trainer::new(&world.student, Some(&teacher), &samples, &classes, None, cfg.clone(), None).unwrap();
        let mut g = PromptParameters::init(cfg.method, &world.student, cfg.prompt.clone(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let rep = fit(&mut tr, &mut g).unwrap();
        let acc = source_accuracy(&world, Some(&g));
        ensure!(acc - zs >= 15.0, "seed {seed}: {acc:.2} vs zero-shot {zs:.2}");
        let w = 5;
        let smooth: Vec<f64> = rep.epoch_losses.windows(w).map(|x| x.iter().sum::<f64>() / w as f64).collect();
        if let Some(i) = (1..smooth.len()).find(|&i| smooth[i] > smooth[i - 1]) {
            return Err(format!(
                "seed {seed}: smoothed loss rises at epoch {}: {:.6} → {:.6}",
                i + w,
                smooth[i - 1],
                smooth[i]
            ));
        }
        lines.push(format!("seed {seed} {}", format_pct(acc)));
    }
    Ok(format!("zero-shot {}; after CoOp+KDPL: {}", format_pct(zs), lines.join(", ")))
}

fn c8_class_agnostic() -> Outcome {
    let world = generate_synthetic(&SyntheticVLConfig::default()).unwrap();
    let teacher = Teacher::new(world.teacher.clone(), "a photo of {}", TAU).unwrap();
    let classes = world.source.splits.train.class_set().unwrap();
    let samples = episode(&world, 16, 8);

    // (a) vocabulary = the true names, K = C
    let truth = ClassVocabulary::new(classes.names()).unwrap();
    let mut kd_cfg = TrainConfig::for_method(PromptMethod::Coop, Objective::Kdpl);
    kd_cfg.top_k = classes.len();
    let ca_cfg = TrainConfig {
        objective: Objective::CaKdpl,
        ..kd_cfg.clone()
    };
    let mut kd = Trainer::new(&world.student, Some(&teacher), &samples, &classes, None, kd_cfg.clone(), None).unwrap();
    let ca = Trainer::new(&world.student, Some(&teacher), &samples, &classes, Some(&truth), ca_cfg, None).unwrap();
    let mut g = PromptParameters::init(PromptMethod::Coop, &world.student, kd_cfg.prompt.clone(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let mut worst = 0.0f64;
    for step in 0..30 {
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        idx.shuffle(&mut rng);
        let batch = &idx[..32];
        let a = kd.loss_and_gradients(&g, batch).unwrap().0;
        let b = ca.loss_and_gradients(&g, batch).unwrap().0;
        worst = worst.max((a - b).abs());
        ensure!((a - b).abs() <= 1e-9, "step {step}: KDPL {a} vs CA-KDPL {b}");
        kd.step(&mut g, batch, 0.02).unwrap();
    }

    // (b) 200-name vocabulary, K = 50
    let vocab = ClassVocabulary::new(&world.vocabulary).unwrap();
    ensure!(vocab.len() == 200, "vocabulary has {} names", vocab.len());
    let mut cfg = TrainConfig::for_method(PromptMethod::Coop, Objective::CaKdpl);
    cfg.top_k = 50;
    let probe = Trainer::new(&world.student, Some(&teacher), &samples, &classes, Some(&vocab), cfg.clone(), None).unwrap();
    let true_idx: Vec<usize> = classes.names().iter().map(|n| vocab.index_of(n).unwrap()).collect();
    let mut hits = 0;
    for seed in 0..100 {
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (sel, _) = probe.ca_select(&idx[..cfg.batch_size]).unwrap();
        if true_idx.iter().all(|i| sel.indices.binary_search(i).is_ok()) {
            hits += 1;
        }
    }
    ensure!(hits >= 90, "all true names selected in {hits}/100 batches");
    let zs = source_accuracy(&world, None);
    let mut tr = Trainer::new(&world.student, Some(&teacher), &samples, &classes, Some(&vocab), cfg.clone(), None).unwrap();
    let mut g = PromptParameters::init(cfg.method, &world.student, cfg.prompt.clone(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    fit(&mut tr, &mut g).unwrap();
    let acc = source_accuracy(&world, Some(&g));
    ensure!(acc - zs >= 10.0, "CA-KDPL {acc:.2} vs zero-shot {zs:.2}");
    Ok(format!(
        "(a) max |ΔL| {worst:.1e}; (b) true names kept in {hits}/100 batches, accuracy {} → {}",
        format_pct(zs),
        format_pct(acc)
    ))
}

fn c9_arithmetic() -> Outcome {
    let cases = [
        (average_over_targets(&[55.37, 35.20, 23.27, 57.77]).unwrap(), "42.90"),
        (
            average_over_targets(&[84.60, 61.63, 13.77, 36.83, 22.33, 54.20, 75.03, 59.00, 87.67, 57.73]).unwrap(),
            "55.28",
        ),
        (harmonic_mean(77.13, 60.82).unwrap(), "68.01"),
        (harmonic_mean(73.66, 63.80).unwrap(), "68.38"),
    ];
    for (v, want) in cases {
        ensure!(format_pct(v) == want, "{v} reports as {} not {want}", format_pct(v));
    }
    Ok("42.90, 55.28, 68.01, 68.38".into())
}

fn c10_determinism() -> Outcome {
    let toy = |dir: &std::path::Path| {
        let text = format!(
            r#"
name = "determinism"
method = "coop"
objective = "kdpl"
scenario = "cross_dataset"
source = "synth"
targets = ["synth_cross1", "synth_cross2"]
seeds = [1, 2, 3]
output_dir = {:?}
"#,
            dir.display().to_string()
        );
        parse_config(&text, &[]).unwrap()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_experiment(&toy(a.path())).map_err(|e| e.to_string())?;
    let rb = run_experiment(&toy(b.path())).map_err(|e| e.to_string())?;
    ensure!(ra.complete() && rb.complete(), "a seed failed");
    let read = |d: &std::path::Path, f: &str| std::fs::read(d.join(f)).unwrap();
    ensure!(read(a.path(), "manifest.json") == read(b.path(), "manifest.json"), "manifests differ");
    ensure!(read(a.path(), "results.csv") == read(b.path(), "results.csv"), "results files differ");
    Ok(format!("{} rows byte-identical", ra.table.rows.len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("1", "KL laws", c1_kl_laws, 10),
        ("2", "zero-shot head", c2_head, 10),
        ("3", "gradient check", c3_gradients, 120),
        ("4", "frozen encoders", c4_frozen, 60),
        ("5", "top-K oracle", c5_topk, 30),
        ("6", "label independence", c6_label_independence, 60),
        ("7", "distillation efficacy", c7_efficacy, 300),
        ("8", "class-agnostic", c8_class_agnostic, 600),
        ("9", "reported arithmetic", c9_arithmetic, 1),
        ("10", "determinism", c10_determinism, 600),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, f, budget) in criteria {
        if !filter.is_empty() && !filter.iter().any(|x| x == id) {
            continue;
        }
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = t0.elapsed();
        let result = match result {
            Ok(d) if took > Duration::from_secs(budget) => Err(format!("over budget: {d}")),
            r => r,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d.clone()),
            Err(e) => {
                failed += 1;
                ("FAIL", e.clone())
            }
        };
        println!(
            "criterion {id:>2} {name:<22} {tag} ({:.1} s / {budget} s) {detail}",
            took.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
