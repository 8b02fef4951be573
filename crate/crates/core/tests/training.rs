use std::path::Path;

use candle_core::DType;
use vtg_core::backbone::BackboneConfig;
use vtg_core::compress::CompressParams;
use vtg_core::data::{synth_dataset, SynthConfig, TaskMix, TrainExample};
use vtg_core::model::ModelConfig;
use vtg_core::nn::ParamStore;
use vtg_core::train::{epoch_dir, RunConfig, Trainer};
use vtg_core::Exec;

fn tiny() -> RunConfig {
    RunConfig {
        batch_size: 4,
        epochs: 1,
        synth: SynthConfig {
            n_frames: 24,
            grid: (2, 2),
            feat_dim: 16,
            max_events: 2,
            min_len: 3,
            max_len: 6,
            n_classes: 4,
            mix: TaskMix::default(),
            ..Default::default()
        },
        model: ModelConfig {
            backbone: BackboneConfig {
                layers: 2,
                d_model: 16,
                heads: 2,
                mlp_hidden: 32,
                context: 256,
                feat_dim: 16,
                ..Default::default()
            },
            compress: CompressParams { u: 2, k: 1, c: 1, tau: 0.8 },
            max_new_tokens: 24,
            ..Default::default()
        },
        max_prompt_tokens: 64,
        ..Default::default()
    }
}

fn data(cfg: &RunConfig, n: usize, seed: u64) -> Vec<TrainExample> {
    synth_dataset(n, &cfg.synth, seed, Exec::Sequential).unwrap()
}

fn frozen_bits(s: &ParamStore) -> Vec<(String, Vec<u64>)> {
    s.frozen()
        .map(|(n, t)| {
            let v: Vec<f64> = t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            (n.clone(), v.iter().map(|x| x.to_bits()).collect())
        })
        .collect()
}

#[test]
fn one_step_without_text_loss_keeps_the_base() {
    let mut cfg = tiny();
    cfg.weights.text = 0.0;
    let mut tr = Trainer::new(cfg, data(&tiny(), 8, 1), Path::new("."), Exec::Sequential).unwrap();
    let before = frozen_bits(&tr.model.store);
    assert!(before.iter().any(|(n, _)| n == "layers.0.attn.o.w"));
    assert!(before.iter().any(|(n, _)| n == "embed.tok"));
    tr.train_step(&[0, 1, 2, 3]).unwrap();
    assert_eq!(before, frozen_bits(&tr.model.store));
}

#[test]
fn loss_falls_on_a_fixed_batch() {
    let mut cfg = tiny();
    cfg.epochs = 50;
    cfg.optim.lr = 3e-3;
    let mut tr = Trainer::new(cfg, data(&tiny(), 4, 2), Path::new("."), Exec::Sequential).unwrap();
    let losses: Vec<f64> = (0..50).map(|_| tr.train_step(&[0, 1, 2, 3]).unwrap().total).collect();
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[45..].iter().sum::<f64>() / 5.0;
    assert!(tail < 0.7 * head, "{head} -> {tail}");
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.epochs = 2;
    let examples = data(&cfg, 12, 3);
    let mut full = Trainer::new(cfg, examples.clone(), Path::new("."), Exec::Sequential).unwrap();
    let all = full.fit(Some(dir.path()), |_| {}).unwrap();
    assert_eq!(all.len(), 6);
    let mut resumed = Trainer::resume(&epoch_dir(dir.path(), 1), examples, Path::new("."), Exec::Sequential).unwrap();
    assert_eq!(resumed.step, 3);
    let rest = resumed.fit(None, |_| {}).unwrap();
    assert_eq!(rest.len(), 3);
    for (a, b) in all[3..].iter().zip(&rest) {
        assert_eq!(a.step, b.step);
        assert!((a.total - b.total).abs() < 1e-6, "step {}: {} vs {}", a.step, a.total, b.total);
    }
    let lines = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 6);
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny();
    let run = || {
        let mut tr = Trainer::new(cfg.clone(), data(&cfg, 8, 4), Path::new("."), Exec::Parallel).unwrap();
        tr.fit(None, |_| {}).unwrap()
    };
    assert_eq!(run(), run());
}
