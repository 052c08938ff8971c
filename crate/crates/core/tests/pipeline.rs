use kdpl_core::class_agnostic::ClassVocabulary;
use kdpl_core::data::{generate_synthetic, sample_few_shot, PreprocessMode, Sample, SyntheticVLConfig, SyntheticWorld};
use kdpl_core::distill::{
    fit, student_predict, Objective, Teacher, TeacherPredictionCache, TrainConfig, Trainer, TEACHER_TEMPLATE,
};
use kdpl_core::eval::{evaluate_accuracy, train_seed, MethodSetup, ScenarioKind, ScenarioSpec};
use kdpl_core::model::{DualEncoderModel, EncoderConfig, ImageBackbone, ImageInput, Role};
use kdpl_core::prompt::{PromptMethod, PromptParameters};
use kdpl_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn world() -> SyntheticWorld {
    generate_synthetic(&SyntheticVLConfig {
        train_per_class: 8,
        test_per_class: 6,
        ..Default::default()
    })
    .unwrap()
}

fn samples(world: &SyntheticWorld, items: &[kdpl_core::data::SplitItem], mode: PreprocessMode) -> Vec<Sample> {
    world
        .source
        .feature_source(world.config.num_patches)
        .samples(items, mode, 0)
        .unwrap()
}

fn short(method: PromptMethod, objective: Objective) -> TrainConfig {
    let mut cfg = TrainConfig::for_method(method, objective);
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg
}

#[test]
fn base_to_novel_training_never_sees_novel_classes() {
    let w = world();
    let teacher = Teacher::new(w.teacher.clone(), TEACHER_TEMPLATE, 0.01).unwrap();
    let spec = ScenarioSpec {
        shots: Some(4),
        ..ScenarioSpec::new(ScenarioKind::BaseToNovel, "synth", vec![])
    };
    let setup = MethodSetup {
        label: "coop+kdpl".into(),
        backbone: "toy".into(),
        student: &w.student,
        teacher: Some(&teacher),
        vocabulary: None,
        train: Some(short(PromptMethod::Coop, Objective::Kdpl)),
        tau: 0.01,
        cache: None,
    };
    let out = train_seed(&spec, &setup, &w, 1).unwrap();
    let names = &w.source.splits.classnames;
    let base = &names[..names.len().div_ceil(2)];
    assert_eq!(out.access.trained_classes, base);
    let base_ids: Vec<&str> = w
        .source
        .splits
        .train
        .items
        .iter()
        .filter(|i| i.label < base.len())
        .map(|i| i.path.as_str())
        .collect();
    assert_eq!(out.access.trained_ids.len(), 4 * base.len());
    assert!(out.access.trained_ids.iter().all(|id| base_ids.contains(&id.as_str())));
}

#[test]
fn zero_shot_baseline_survives_training() {
    let w = world();
    let teacher = Teacher::new(w.teacher.clone(), TEACHER_TEMPLATE, 0.01).unwrap();
    let test = samples(&w, &w.source.splits.test.items, PreprocessMode::Eval);
    let classes = w.source.splits.test.class_set().unwrap();
    let before = evaluate_accuracy(&w.student, None, &test, &classes, 0.01).unwrap();
    let student_bytes = w.student.to_bytes().unwrap();
    let train = samples(&w, &sample_few_shot(&w.source.splits.train, 4, 1).unwrap().items, PreprocessMode::Train);
    let cfg = short(PromptMethod::Coop, Objective::Kdpl);
    let mut tr = Trainer::new(&w.student, Some(&teacher), &train, &classes, None, cfg.clone(), None).unwrap();
    let mut g = PromptParameters::init(cfg.method, &w.student, cfg.prompt, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    fit(&mut tr, &mut g).unwrap();
    let after = evaluate_accuracy(&w.student, None, &test, &classes, 0.01).unwrap();
    assert_eq!(before.to_bits(), after.to_bits());
    assert_eq!(w.student.to_bytes().unwrap(), student_bytes);
}

#[test]
fn cached_teacher_matches_fresh_pass() {
    let w = world();
    let teacher = Teacher::new(w.teacher.clone(), TEACHER_TEMPLATE, 0.01).unwrap();
    let s = samples(&w, &w.source.splits.train.items[..20], PreprocessMode::Eval);
    let imgs: Vec<(&str, &ImageInput)> = s.iter().map(|x| (x.id.as_str(), &x.image)).collect();
    let classes = w.source.splits.train.class_set().unwrap();
    let cache = TeacherPredictionCache::in_memory();
    let fresh = teacher.predict(&imgs, &classes, None).unwrap();
    let first = teacher.predict(&imgs, &classes, Some(&cache)).unwrap();
    let hit = teacher.predict(&imgs, &classes, Some(&cache)).unwrap();
    assert_eq!(cache.len(), 20);
    assert_eq!(fresh, first);
    assert_eq!(fresh, hit);
}

#[test]
fn class_agnostic_step_encodes_exactly_k_names() {
    let w = world();
    let teacher = Teacher::new(w.teacher.clone(), TEACHER_TEMPLATE, 0.01).unwrap();
    let classes = w.source.splits.train.class_set().unwrap();
    let train = samples(&w, &sample_few_shot(&w.source.splits.train, 2, 1).unwrap().items, PreprocessMode::Train);
    let k = 12;
    for size in [40, 200] {
        let vocab = ClassVocabulary::new(&w.vocabulary[..size]).unwrap();
        let mut cfg = short(PromptMethod::Coop, Objective::CaKdpl);
        cfg.top_k = k;
        let mut tr = Trainer::new(&w.student, Some(&teacher), &train, &classes, Some(&vocab), cfg.clone(), None).unwrap();
        let mut g = PromptParameters::init(cfg.method, &w.student, cfg.prompt, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let before = w.student.text_encode_count();
        let out = tr.step(&mut g, &[0, 1, 2, 3], 0.01).unwrap();
        assert_eq!(w.student.text_encode_count() - before, k as u64, "vocabulary of {size}");
        let sel = out.selection.unwrap();
        assert_eq!(sel.indices.len(), k);
    }
}

#[test]
fn accuracy_matches_per_item_tally() {
    let w = world();
    let test = samples(&w, &w.source.splits.test.items, PreprocessMode::Eval);
    let classes = w.source.splits.test.class_set().unwrap();
    let images: Vec<&ImageInput> = test.iter().map(|s| &s.image).collect();
    let probs = student_predict(&w.student, None, &images, &classes, 0.01).unwrap();
    let mut correct = 0;
    for (p, s) in probs.iter().zip(&test) {
        let p = p.probs();
        let best = (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        correct += usize::from(best == s.label);
    }
    let acc = evaluate_accuracy(&w.student, None, &test, &classes, 0.01).unwrap();
    assert!((acc - 100.0 * correct as f64 / test.len() as f64).abs() < 1e-12);
}

#[test]
fn promptsrc_full_objective_gradient() {
    // the regularizer's |·| terms are checked with a step well inside their smooth region
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = EncoderConfig {
        shared_dim: 16,
        text_token_dim: 16,
        patch_dim: 16,
        num_layers: 2,
        num_patches: 4,
        patch_input_dim: 12,
        vocab_size: 512,
        max_text_len: 16,
        mlp_hidden: 32,
        image_backbone: ImageBackbone::Vit,
    };
    let student = DualEncoderModel::random(cfg.clone(), Role::Student, &mut rng).unwrap();
    let teacher = DualEncoderModel::random(cfg, Role::Teacher, &mut rng).unwrap();
    let teacher = Teacher::new(teacher, TEACHER_TEMPLATE, 0.01).unwrap();
    let classes = kdpl_core::model::ClassSet::new(["cat", "dog", "owl"].map(String::from)).unwrap();
    let data: Vec<Sample> = (0..2)
        .map(|i| Sample {
            id: format!("t{i}"),
            label: i,
            image: ImageInput::new(Tensor::randn(4, 12, 1.0, &mut rng)),
        })
        .collect();
    let tc = TrainConfig::for_method(PromptMethod::Promptsrc, Objective::Kdpl);
    let tr = Trainer::new(&student, Some(&teacher), &data, &classes, None, tc.clone(), None).unwrap();
    let mut g = PromptParameters::init(tc.method, &student, tc.prompt, &mut rng).unwrap();
    for t in g.tensors_mut() {
        for x in t.data_mut() {
            *x += 0.05 * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng);
        }
    }
    let batch = [0, 1];
    let (_, grads, _) = tr.loss_and_gradients(&g, &batch).unwrap();
    let h = 1e-6;
    for (ti, grad) in grads.iter().enumerate() {
        for k in 0..grad.len() {
            let mut p = g.clone();
            p.tensors_mut()[ti].data_mut()[k] += h;
            let mut m = g.clone();
            m.tensors_mut()[ti].data_mut()[k] -= h;
            let fd = (tr.loss_and_gradients(&p, &batch).unwrap().0 - tr.loss_and_gradients(&m, &batch).unwrap().0) / (2.0 * h);
            let an = grad.data()[k];
            let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-3);
            assert!(err < 1e-4, "tensor {ti} entry {k}: {an} vs {fd}");
        }
    }
}
