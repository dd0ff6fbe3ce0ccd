use std::fs;
use std::path::PathBuf;

use spectra_core::checkpoint::{Checkpoint, CheckpointMeta};
use spectra_core::losses::LossWeights;
use spectra_core::model::{ModelConfig, Sample, Student};
use spectra_core::synthgeo::{caption, corpus, CorpusConfig, Modality, SceneSpec};
use spectra_core::teachers::TeacherSet;
use spectra_core::towers::{tokenize, MAX_TOKENS, VOCAB_SIZE};
use spectra_core::trainer::{train, AdamState, TrainConfig};

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Reads a golden file, rewriting it first when `SPECTRA_BLESS` is set.
fn golden(name: &str, actual: &str) -> String {
    let path = golden_path(name);
    if std::env::var_os("SPECTRA_BLESS").is_some() {
        fs::write(&path, actual).unwrap();
    }
    fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing {}; bless with SPECTRA_BLESS=1", path.display()))
}

fn captions() -> Vec<String> {
    let mut out: Vec<String> = [
        "water",
        "Water, water!",
        "a satellite image of forest.",
        "UPPER lower MiXeD",
        "snow-covered peaks near 4000 m",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for i in 0..15 {
        let scene = SceneSpec::generate(i, (32, 32), i as usize % 8).unwrap();
        out.push(caption(&scene, Modality::ALL[i as usize % 6]).unwrap());
    }
    out
}

#[test]
fn tokenizer_golden_ids() {
    let caps = captions();
    assert_eq!(caps.len(), 20);
    let mut text = String::new();
    for c in &caps {
        let t = tokenize(c).unwrap();
        assert!(t.length >= 1 && t.length <= MAX_TOKENS);
        assert!(t.ids.iter().all(|&i| (i as usize) < VOCAB_SIZE));
        let ids: Vec<String> = t.real().iter().map(u16::to_string).collect();
        text.push_str(&ids.join(" "));
        text.push('\n');
    }
    assert_eq!(text, golden("tokenizer_ids.txt", &text));
}

fn tiny_student() -> (Student, spectra_core::numerics::ParameterStore) {
    let teachers = TeacherSet::new((32, 32), None).unwrap();
    Student::init(ModelConfig::tiny(), &teachers.targets(), 5).unwrap()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn padding_does_not_change_text_embeddings() {
    let (student, store) = tiny_student();
    for c in captions() {
        let t = tokenize(&c).unwrap();
        let plain = student.text.encode(&store, &t).unwrap();
        for pad in [0, 17, 4095] {
            let padded = student.text.encode(&store, &t.padded(pad)).unwrap();
            assert!(max_abs(&plain, &padded) < 1e-12, "{c:?} pad {pad}");
        }
        let norm: f64 = plain.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }
}

#[test]
fn image_embedding_ignores_band_order() {
    let (student, store) = tiny_student();
    let scene = SceneSpec::generate(11, (32, 32), 3).unwrap();
    for m in [Modality::Msi12, Modality::Sar2, Modality::Hyper32] {
        let img = spectra_core::synthgeo::render(&scene, m).unwrap();
        let c = img.channels();
        let perm: Vec<usize> = (0..c).map(|i| (i * 7 + 3) % c).collect();
        let perm = if c == 2 { vec![1, 0] } else { perm };
        let a = student.encode_image(&store, &img).unwrap();
        let b = student.encode_image(&store, &img.permuted(&perm).unwrap()).unwrap();
        assert!(max_abs(&a, &b) < 1e-10, "{}", m.name());
        assert_eq!(a, student.encode_image(&store, &img).unwrap());
    }
}

fn pairs(n_scenes: usize, vect: bool) -> Vec<Sample> {
    let cfg = CorpusConfig { scenes: n_scenes, modalities: vec![Modality::Rgb], train_fraction: 1.0, size: (32, 32), seed: 0 };
    let teachers = TeacherSet::new((32, 32), None).unwrap();
    corpus(&cfg)
        .unwrap()
        .iter()
        .map(|r| {
            let mut s = Sample::new(r.render().unwrap(), &r.caption).unwrap();
            if vect {
                for (slot, f) in s.teacher.iter_mut().zip(teachers.features(&s.image).unwrap()) {
                    *slot = Some(f);
                }
            }
            s
        })
        .collect()
}

fn run(samples: &[Sample], tc: &TrainConfig) -> (Vec<f64>, Checkpoint, u64) {
    let (student, mut store) = tiny_student();
    let mut state = AdamState::new(&store);
    let logs = train(&student, &mut store, samples, tc, &mut state, |_| {}).unwrap();
    let ckpt = Checkpoint::from_store(&store, CheckpointMeta::default());
    (logs.iter().map(|l| l.report.total).collect(), ckpt, store.checksum())
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let data = pairs(8, true);
    let tc = TrainConfig { lr: 0.0, steps: Some(3), batch_size: 4, ..TrainConfig::default() };
    let (_, store) = tiny_student();
    let before = Checkpoint::from_store(&store, CheckpointMeta::default());
    let (_, after, _) = run(&data, &tc);
    assert_eq!(before, after);
}

#[test]
fn training_is_deterministic_and_teachers_stay_frozen() {
    let data = pairs(8, true);
    let teachers = TeacherSet::new((32, 32), None).unwrap();
    let frozen = teachers.checksum();
    let tc = TrainConfig { steps: Some(4), batch_size: 4, ..TrainConfig::default() };
    let (a_log, a, a_sum) = run(&data, &tc);
    let (b_log, b, b_sum) = run(&data, &tc);
    assert_eq!(a_log, b_log);
    assert_eq!((a, a_sum), (b, b_sum));
    assert_eq!(teachers.checksum(), frozen);
    assert_eq!(TeacherSet::new((32, 32), None).unwrap().checksum(), frozen);
}

#[test]
fn thirty_two_pairs_loss_curve() {
    let data = pairs(32, false);
    let tc = TrainConfig {
        steps: Some(200),
        batch_size: 8,
        lr: 3e-4,
        weights: LossWeights::CONTRASTIVE_ONLY,
        ..TrainConfig::default()
    };
    let (log, _, _) = run(&data, &tc);
    let tail: f64 = log[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < log[0], "mean of last 20 losses {tail} not below initial {}", log[0]);

    let sampled: String = log.iter().step_by(20).map(|v| format!("{v:e}\n")).collect();
    let expected = golden("curve_32_pairs.txt", &sampled);
    for (got, want) in sampled.lines().zip(expected.lines()) {
        let (g, w): (f64, f64) = (got.parse().unwrap(), want.parse().unwrap());
        assert!((g - w).abs() <= 1e-9 * w.abs(), "loss curve drifted: {g} vs {w}");
    }
    assert_eq!(sampled.lines().count(), expected.lines().count());
}
