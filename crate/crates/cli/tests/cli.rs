use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn vtg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vtg")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small enough for a quick smoke run.
const SMALL: &[&str] = &[
    "--set",
    "run.synth.grid=[4,4]",
    "--set",
    "run.synth.mix={\"tg\":1.0,\"dvc\":0.0,\"vqa\":0.0}",
    "--set",
    "run.model.compress={\"u\":4,\"k\":3,\"c\":1,\"tau\":0.8}",
    "--set",
    "run.model.backbone.layers=2",
    "--set",
    "run.model.backbone.d_model=32",
    "--set",
    "run.model.backbone.heads=2",
    "--set",
    "run.model.backbone.mlp_hidden=64",
    "--set",
    "run.model.backbone.adapter.total_rank=8",
    "--set",
    "run.epochs=1",
];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(SMALL);
    v
}

struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
}

/// 400 examples at batch 8 for one epoch: a 50-step smoke training run.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let run = dir.path().join("run");
        let o = vtg(&with_small(&["synth", "--size", "400", "--seed", "3", "--out", p(&data)]));
        assert!(o.status.success(), "{}", stderr(&o));
        let o = vtg(&with_small(&["train", "--dataset", p(&data), "--out", p(&run)]));
        assert!(o.status.success(), "{}", stderr(&o));
        Fixture { _dir: dir, data, run }
    })
}

#[test]
fn version_and_help() {
    let o = vtg(&["--version"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains(env!("CARGO_PKG_VERSION")));
    assert!(vtg(&["--help"]).status.success());
}

#[test]
fn usage_errors_exit_2_with_one_line() {
    for args in [
        vec!["synth", "--bogus"],
        vec!["eval", "--checkpoint", "x", "--out", "y", "--task", "nope"],
        vec![],
    ] {
        let o = vtg(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        let e = stderr(&o);
        assert_eq!(e.trim_end().lines().count(), 1, "{e}");
        assert!(e.starts_with("error[usage]: "), "{e}");
    }
}

#[test]
fn invalid_config_exits_2() {
    let o = vtg(&["--set", "run.no_such_key=1", "--dump-config"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[config]: "));
    let o = vtg(&["--set", "run.batch_size=0", "--dump-config"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("c.json");
    std::fs::write(&c, r#"{"run": {"seed": 4, "batch_size": 3}}"#).unwrap();
    let o = vtg(&["--config", p(&c), "--set", "run.batch_size=5", "--dump-config"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["run"]["seed"], 4);
    assert_eq!(v["run"]["batch_size"], 5);
    assert_eq!(v["run"]["epochs"], 5);
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = vtg(&["synth", "--size", "100", "--seed", "1", "--out", p(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(out.join("effective-config.json").exists());
    }
    let (ma, mb) = (json(&a.join("manifest.json")), json(&b.join("manifest.json")));
    assert_eq!(ma["outputs"], mb["outputs"]);
    assert_eq!(ma["seed"], 1);
    assert_eq!(ma["outputs"]["out"].as_str().unwrap().len(), 64);
    let o = vtg(&["synth", "--size", "100", "--seed", "2", "--out", p(&dir.path().join("c"))]);
    assert!(o.status.success());
    assert_ne!(json(&dir.path().join("c/manifest.json"))["outputs"], ma["outputs"]);
}

#[test]
fn train_with_missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("c.json");
    let missing = dir.path().join("nowhere");
    std::fs::write(&c, format!(r#"{{"dataset": {:?}}}"#, p(&missing))).unwrap();
    let o = vtg(&["train", "--config", p(&c), "--out", p(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.starts_with("error[data]: "), "{e}");
    assert_eq!(e.trim_end().lines().count(), 1);
}

#[test]
fn compress_materialized_features() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let o = vtg(&["synth", "--size", "2", "--materialize", "--out", p(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let feat = std::fs::read_dir(data.join("features")).unwrap().next().unwrap().unwrap().path();
    let out = dir.path().join("c");
    let o = vtg(&["compress", "--features", p(&feat), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = json(&out.join("compress.json"));
    let m = s["m"].as_u64().unwrap();
    assert!(m <= 4 * 64, "{m}");
    assert_eq!(s["llm_tokens"].as_u64().unwrap(), 100 + m);
    assert!(out.join("s_tokens.feat").exists());
    assert!(json(&out.join("manifest.json"))["inputs"]["features"].is_string());
}

#[test]
fn smoke_train_writes_checkpoints_and_metrics() {
    let f = fixture();
    assert!(f.run.join("epoch-001/model/config.json").exists());
    let lines = std::fs::read_to_string(f.run.join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 50);
    let m = json(&f.run.join("manifest.json"));
    assert_eq!(m["command"], "train");
    assert!(m["inputs"]["dataset"].is_string());
}

#[test]
fn eval_tg_reports_grounding_fields_reproducibly() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = vtg(&[
            "eval",
            "--checkpoint",
            p(&f.run),
            "--dataset",
            p(&f.data),
            "--task",
            "tg",
            "--perturb",
            "none",
            "--out",
            p(&out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        reports.push(std::fs::read(out.join("report.json")).unwrap());
        assert_eq!(
            json(&dir.path().join("a/manifest.json"))["inputs"],
            json(&out.join("manifest.json"))["inputs"]
        );
    }
    assert_eq!(reports[0], reports[1]);
    let r: Value = serde_json::from_slice(&reports[0]).unwrap();
    assert_eq!(r["schema"], 1);
    for k in ["r1@0.3", "r1@0.5", "r1@0.7", "miou", "map@0.5", "map@0.75", "map@avg"] {
        let v = r["metrics"][k].as_f64().unwrap_or_else(|| panic!("missing {k}"));
        assert!((0.0..=1.0).contains(&v), "{k} = {v}");
    }
    assert_eq!(r["samples"].as_array().unwrap().len(), 400);
}

#[test]
fn eval_shuffle_and_diagnose() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("e");
    let o = vtg(&[
        "eval",
        "--checkpoint",
        p(&f.run),
        "--dataset",
        p(&f.data),
        "--perturb",
        "shuffle",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(json(&out.join("report.json"))["perturbation"], "shuffle");

    let out = dir.path().join("d");
    let o = vtg(&["diagnose", "--checkpoint", p(&f.run), "--dataset", p(&f.data), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let b = json(&out.join("bias.json"));
    assert_eq!(b["stats"].as_array().unwrap().len(), 3);
    let h = std::fs::read_to_string(out.join("histogram_shuffle.csv")).unwrap();
    assert_eq!(h.lines().count(), 1 + 50 * 50);
}

#[test]
fn eval_missing_checkpoint_is_a_data_error() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let o = vtg(&[
        "eval",
        "--checkpoint",
        p(&dir.path().join("none")),
        "--dataset",
        p(&f.data),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[data]: "));
}
