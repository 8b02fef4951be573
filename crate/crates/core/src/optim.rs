//! AdamW with decoupled weight decay, global-norm clipping and a cosine
//! schedule with linear warm-up.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::{read_tensor, write_tensor};
use crate::nn::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
    pub warmup_frac: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            warmup_frac: 0.05,
        }
    }
}

/// Learning rate at `step` (0-based) of `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup_frac: f64) -> f64 {
    let warmup = ((total as f64 * warmup_frac).round() as usize).max(1);
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Serialize, Deserialize)]
struct StateFile {
    step: usize,
    names: Vec<String>,
}

pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update to every trainable parameter and returns the
    /// pre-clipping gradient norm.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<f64> {
        let mut sq = 0.0f64;
        let mut found = Vec::new();
        for (name, var) in store.trainable() {
            if let Some(g) = grads.get(var.as_tensor()) {
                let s = g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
                sq += s;
                found.push((name.clone(), var.clone(), g.detach()));
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {norm}")));
        }
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (name, var, g) in found {
            let g = (g * clip)?;
            let m = match self.m.get(&name) {
                Some(m) => ((m * b1)? + (&g * (1.0 - b1))?)?,
                None => (&g * (1.0 - b1))?,
            };
            let v = match self.v.get(&name) {
                Some(v) => ((v * b2)? + (g.sqr()? * (1.0 - b2))?)?,
                None => (g.sqr()? * (1.0 - b2))?,
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.cfg.eps)?)?;
            let theta = var.as_tensor();
            let decayed = (theta * (1.0 - lr * self.cfg.weight_decay))?;
            var.set(&(decayed - (update * lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name, v);
        }
        Ok(norm)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let names: Vec<String> = self.m.keys().cloned().collect();
        for n in &names {
            write_tensor(&self.m[n], &dir.join(format!("{n}.m.bin")))?;
            write_tensor(&self.v[n], &dir.join(format!("{n}.v.bin")))?;
        }
        let path = dir.join("state.json");
        let s = serde_json::to_string_pretty(&StateFile { step: self.step, names })?;
        std::fs::write(&path, s).map_err(|e| Error::io(&path, e))
    }

    pub fn load(cfg: AdamWConfig, dir: &Path, store: &ParamStore) -> Result<Self> {
        let path = dir.join("state.json");
        let s = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let st: StateFile = serde_json::from_str(&s)?;
        let mut opt = AdamW::new(cfg);
        opt.step = st.step;
        for n in st.names {
            let dtype = store.get(&n)?.dtype();
            opt.m.insert(n.clone(), read_tensor(&dir.join(format!("{n}.m.bin")))?.to_dtype(dtype)?);
            opt.v.insert(n.clone(), read_tensor(&dir.join(format!("{n}.v.bin")))?.to_dtype(dtype)?);
        }
        Ok(opt)
    }
}
