use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use vtg_core::train::RunConfig;
use vtg_core::Exec;

use crate::Failure;

/// Everything a run reads besides its command line arguments.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Dataset used when `--dataset` is not given.
    pub dataset: Option<PathBuf>,
    pub exec: Exec,
    /// Queries per decoding batch during evaluation.
    pub eval_batch: Option<usize>,
    pub run: RunConfig,
}

/// Defaults, then the file, then each `key.path=value` override in order.
pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Config, Failure> {
    let mut v = serde_json::to_value(Config::default()).map_err(|e| Failure::config(e.to_string()))?;
    if let Some(path) = file {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
        let f: Value =
            serde_json::from_str(&s).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        merge(&mut v, f);
    }
    for o in overrides {
        apply(&mut v, o)?;
    }
    let cfg: Config = serde_json::from_value(v).map_err(|e| Failure::config(e.to_string()))?;
    cfg.run.validate().map_err(|e| Failure::config(e.to_string()))?;
    Ok(cfg)
}

fn merge(dst: &mut Value, src: Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}

/// `a.b.c=value`; the value is read as JSON and falls back to a plain string.
pub fn apply(v: &mut Value, spec: &str) -> Result<(), Failure> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Failure::usage(format!("override {spec:?} is not key=value")))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = v;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(m) => m.get_mut(part),
            Value::Array(a) => part.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| Failure::config(format!("unknown config key {key:?}")))?;
    }
    *slot = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"run": {"seed": 5, "epochs": 2}}"#).unwrap();
        let c = resolve(Some(&p), &["run.seed=9".into()]).unwrap();
        assert_eq!(c.run.seed, 9);
        assert_eq!(c.run.epochs, 2);
        assert_eq!(c.run.batch_size, RunConfig::default().batch_size);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(resolve(None, &["run.nope=1".into()]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"rn": {}}"#).unwrap();
        assert!(resolve(Some(&p), &[]).is_err());
    }

    #[test]
    fn string_fallback() {
        let c = resolve(None, &["dataset=data/x".into(), "exec=sequential".into()]).unwrap();
        assert_eq!(c.dataset, Some(PathBuf::from("data/x")));
        assert_eq!(c.exec, Exec::Sequential);
    }
}
