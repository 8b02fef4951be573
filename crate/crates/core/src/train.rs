//! Optimisation loop: teacher-forced forward, `<LOC>` hidden extraction at
//! the target's placeholder positions, head losses, AdamW on the adapters,
//! the `<LOC>` embedding and the head.
//!
//! A run directory holds `metrics.jsonl` (one line per step) and one
//! `epoch-NNN/` checkpoint per finished epoch with the model, the optimizer
//! state and `trainer.json`.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{prepare_visual, SynthConfig, TrainExample};
use crate::error::invalid;
use crate::model::{check_feat_dim, zeros_scalar, Model, ModelConfig};
use crate::nn;
use crate::objectives::{
    boundary_loss, fg_labels, indicator_loss_logits, match_locs, text_loss, total_loss, total_loss_tensor, LossBundle,
    LossWeights,
};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::{Error, Exec, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Examples per step. The large-scale reference setting is 128.
    pub batch_size: usize,
    pub epochs: usize,
    pub optim: AdamWConfig,
    pub weights: LossWeights,
    pub model: ModelConfig,
    /// Generator settings used by `synth` and for the frame budget check.
    pub synth: SynthConfig,
    /// Prompt tokens reserved when checking the context budget.
    pub max_prompt_tokens: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            batch_size: 8,
            epochs: 5,
            optim: AdamWConfig::default(),
            weights: LossWeights::default(),
            model: ModelConfig::default(),
            synth: SynthConfig::default(),
            max_prompt_tokens: 96,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.model.backbone.validate().map_err(|e| Error::Config(e.to_string()))?;
        let c = &self.model.compress;
        let p = self.synth.grid.0 * self.synth.grid.1;
        c.validate(p).map_err(|e| Error::Config(e.to_string()))?;
        let budget = self.synth.n_frames + c.u * c.w() + self.max_prompt_tokens + self.model.max_new_tokens;
        if budget > self.model.backbone.context {
            return Err(Error::Config(format!(
                "{} frames + {} S-tokens + {} prompt + {} answer tokens exceed context {}",
                self.synth.n_frames,
                c.u * c.w(),
                self.max_prompt_tokens,
                self.model.max_new_tokens,
                self.model.backbone.context
            )));
        }
        Ok(())
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub text: f64,
    pub ce: f64,
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainerState {
    run: RunConfig,
    epochs_done: usize,
    step: usize,
    total_steps: usize,
}

/// Teacher-forcing layout of one example inside the stream.
struct Layout {
    text: Vec<u32>,
    /// Text indices whose next token is supervised.
    pred_rows: Vec<usize>,
    /// `(text index of the k-th <LOC>, gt index)`.
    locs: Vec<(usize, usize)>,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub opt: AdamW,
    pub step: usize,
    pub epochs_done: usize,
    examples: Vec<TrainExample>,
    visual: Vec<(Tensor, Tensor)>,
    total_steps: usize,
}

impl Trainer {
    /// Fresh model over `examples`; the tokenizer is built from their texts.
    pub fn new(cfg: RunConfig, examples: Vec<TrainExample>, base: &Path, exec: Exec) -> Result<Self> {
        Self::with_dtype(cfg, examples, base, exec, DType::F32)
    }

    pub fn with_dtype(mut cfg: RunConfig, examples: Vec<TrainExample>, base: &Path, exec: Exec, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        if examples.is_empty() {
            return Err(Error::Data("no training examples".into()));
        }
        let max_frames = examples
            .iter()
            .map(|e| e.n_frames(base))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .max()
            .unwrap_or(0)
            .max(cfg.synth.n_frames);
        let tok = crate::model::build_tokenizer(
            examples.iter().flat_map(|e| [e.prompt.as_str(), e.target.as_str()]),
            max_frames,
        );
        cfg.model.backbone.seed = cfg.model.backbone.seed.wrapping_add(cfg.seed);
        cfg.model.head.seed = cfg.model.head.seed.wrapping_add(cfg.seed);
        let model = Model::new(cfg.model.clone(), tok, dtype)?;
        let opt = AdamW::new(cfg.optim.clone());
        Self::assemble(cfg, model, opt, examples, base, exec, 0, 0)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        cfg: RunConfig,
        model: Model,
        opt: AdamW,
        examples: Vec<TrainExample>,
        base: &Path,
        exec: Exec,
        step: usize,
        epochs_done: usize,
    ) -> Result<Self> {
        let vis = prepare_visual(&examples, base, &cfg.model.compress, exec)?;
        if let Some(v) = vis.first() {
            check_feat_dim(&cfg.model, v.t.ncols())?;
        }
        let visual = vis.iter().map(|v| model.visual_tensors(v)).collect::<Result<_>>()?;
        let per_epoch = examples.len().div_ceil(cfg.batch_size);
        Ok(Trainer {
            total_steps: per_epoch * cfg.epochs,
            cfg,
            model,
            opt,
            step,
            epochs_done,
            examples,
            visual,
        })
    }

    /// Restores a trainer from an `epoch-NNN/` checkpoint.
    pub fn resume(dir: &Path, examples: Vec<TrainExample>, base: &Path, exec: Exec) -> Result<Self> {
        let path = dir.join("trainer.json");
        let s = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let st: TrainerState = serde_json::from_str(&s)?;
        let model = Model::load(&dir.join("model"))?;
        let opt = AdamW::load(st.run.optim.clone(), &dir.join("optim"), &model.store)?;
        let t = Self::assemble(st.run, model, opt, examples, base, exec, st.step, st.epochs_done)?;
        if t.total_steps != st.total_steps {
            return Err(invalid!("dataset size changed since the checkpoint was written"));
        }
        Ok(t)
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn num_examples(&self) -> usize {
        self.examples.len()
    }

    /// Shuffled example order of an epoch; a function of the seed only.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        order
    }

    fn layout(&self, ex: &TrainExample) -> Layout {
        let prompt = self.model.prompt_ids(&ex.prompt);
        let target = self.model.target_ids(&ex.target);
        let p = prompt.len();
        let loc_id = self.model.backbone.loc_id();
        let loc_pos: Vec<usize> = target
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == loc_id)
            .map(|(i, _)| p + i)
            .collect();
        let locs = match_locs(loc_pos.len(), ex.gt_segments.len())
            .into_iter()
            .map(|(l, g)| (loc_pos[l], g))
            .collect();
        let mut text = prompt;
        text.extend(target);
        Layout {
            pred_rows: (p - 1..text.len() - 1).collect(),
            text,
            locs,
        }
    }

    /// Stream positions of every `<LOC>` that is paired with a ground-truth
    /// segment, per example of the batch.
    pub fn loc_positions(&self, idx: &[usize]) -> Vec<Vec<usize>> {
        idx.iter()
            .map(|&i| {
                let v = &self.visual[i];
                let off = v.0.dim(0).unwrap_or(0) + v.1.dim(0).unwrap_or(0);
                self.layout(&self.examples[i]).locs.iter().map(|&(j, _)| off + j).collect()
            })
            .collect()
    }

    /// Loss tensor and its scalar parts for a batch of example indices.
    pub fn batch_loss(&self, idx: &[usize]) -> Result<(Tensor, LossBundle)> {
        let m = &self.model;
        let dtype = m.dtype();
        let d = m.cfg.backbone.d_model;
        let mut streams = Vec::with_capacity(idx.len());
        let mut layouts = Vec::with_capacity(idx.len());
        for &i in idx {
            let lay = self.layout(&self.examples[i]);
            streams.push(m.stream(&self.visual[i], lay.text.clone())?);
            layouts.push(lay);
        }
        let hidden = m.backbone.forward(&m.store, &streams)?;
        let l_max = hidden.dim(1)?;
        let flat = hidden.reshape((idx.len() * l_max, d))?;

        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (b, (s, lay)) in streams.iter().zip(&layouts).enumerate() {
            let off = b * l_max + s.n_t + s.n_s;
            for &j in &lay.pred_rows {
                rows.push((off + j) as u32);
                targets.push(lay.text[j + 1]);
            }
        }
        let n_rows = rows.len();
        let sel = flat.index_select(&Tensor::from_vec(rows, n_rows, &Device::Cpu)?, 0)?;
        let logits = m.backbone.logits(&m.store, &sel)?;
        let text = text_loss(&logits, &targets, &vec![true; n_rows])?;

        let (mut ce, mut l1, mut giou) = (zeros_scalar(dtype)?, zeros_scalar(dtype)?, zeros_scalar(dtype)?);
        if let Some(head) = m.head()? {
            let mut x_t = Vec::new();
            let mut loc_h = Vec::new();
            let mut gts = Vec::new();
            for (b, (s, lay)) in streams.iter().zip(&layouts).enumerate() {
                let ex = &self.examples[idx[b]];
                for &(j, g) in &lay.locs {
                    x_t.push(hidden.get(b)?.narrow(0, 0, s.n_t)?);
                    loc_h.push(flat.get(b * l_max + s.n_t + s.n_s + j)?);
                    gts.push(ex.gt_segments[g]);
                }
            }
            if !gts.is_empty() {
                let pairs = gts.len() as f64;
                let mut ce_parts = Vec::new();
                let mut l1_parts = Vec::new();
                let mut giou_parts = Vec::new();
                let mut lens: Vec<usize> = x_t.iter().map(|x| x.dim(0)).collect::<candle_core::Result<_>>()?;
                let by_len = lens.clone();
                lens.sort_unstable();
                lens.dedup();
                for n in lens {
                    let ks: Vec<usize> = (0..gts.len()).filter(|&k| by_len[k] == n).collect();
                    let xs: Vec<&Tensor> = ks.iter().map(|&k| &x_t[k]).collect();
                    let hs: Vec<&Tensor> = ks.iter().map(|&k| &loc_h[k]).collect();
                    let (lg, off) = head.forward(&Tensor::stack(&xs, 0)?, &Tensor::stack(&hs, 0)?)?;
                    for (r, &k) in ks.iter().enumerate() {
                        ce_parts.push(indicator_loss_logits(&lg.get(r)?, &fg_labels(&gts[k], n))?);
                        let (a, g) = boundary_loss(&off.get(r)?, &gts[k])?;
                        l1_parts.push(a);
                        giou_parts.push(g);
                    }
                }
                ce = (Tensor::stack(&ce_parts, 0)?.sum_all()? / pairs)?;
                l1 = (Tensor::stack(&l1_parts, 0)?.sum_all()? / pairs)?;
                giou = (Tensor::stack(&giou_parts, 0)?.sum_all()? / pairs)?;
            }
        }
        let w = &self.cfg.weights;
        let total = total_loss_tensor(&text, &ce, &l1, &giou, w)?;
        let bundle = LossBundle {
            text: nn::scalar(&text)?,
            ce: nn::scalar(&ce)?,
            l1: nn::scalar(&l1)?,
            giou: nn::scalar(&giou)?,
            total: nn::scalar(&total)?,
        };
        Ok((total, bundle))
    }

    /// One optimizer update on the given examples.
    pub fn train_step(&mut self, idx: &[usize]) -> Result<StepRecord> {
        let (loss, b) = self.batch_loss(idx)?;
        let lr = cosine_lr(self.cfg.optim.lr, self.step, self.total_steps.max(1), self.cfg.optim.warmup_frac);
        let rec = StepRecord {
            step: self.step,
            text: b.text,
            ce: b.ce,
            l1: b.l1,
            giou: b.giou,
            total: b.total,
            lr,
        };
        total_loss(b.text, b.ce, b.l1, b.giou, &self.cfg.weights).map_err(|e| {
            Error::NonFinite(format!("step {}: {e} (examples {:?})", self.step, self.ids(idx)))
        })?;
        let grads = loss.backward()?;
        self.opt
            .step(&self.model.store, &grads, lr)
            .map_err(|e| Error::NonFinite(format!("step {}: {e}", self.step)))?;
        self.step += 1;
        Ok(rec)
    }

    fn ids(&self, idx: &[usize]) -> Vec<String> {
        idx.iter().map(|&i| self.examples[i].id.clone()).collect()
    }

    /// Runs the remaining epochs. With `out`, appends to `metrics.jsonl` and
    /// writes a checkpoint after every epoch; a non-finite loss writes
    /// `diagnostics.json` before the error is returned.
    pub fn fit(&mut self, out: Option<&Path>, mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        let mut log = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let p = dir.join("metrics.jsonl");
                let f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&p)
                    .map_err(|e| Error::io(&p, e))?;
                Some((p, std::io::BufWriter::new(f)))
            }
            None => None,
        };
        let mut records = Vec::new();
        while self.epochs_done < self.cfg.epochs {
            let order = self.epoch_order(self.epochs_done);
            for chunk in order.chunks(self.cfg.batch_size) {
                let rec = match self.train_step(chunk) {
                    Ok(r) => r,
                    Err(e @ Error::NonFinite(_)) => {
                        if let Some(dir) = out {
                            self.dump_diagnostics(dir, chunk, &e)?;
                        }
                        return Err(e);
                    }
                    Err(e) => return Err(e),
                };
                if let Some((p, w)) = log.as_mut() {
                    serde_json::to_writer(&mut *w, &rec)?;
                    w.write_all(b"\n").map_err(|e| Error::io(&*p, e))?;
                }
                on_step(&rec);
                records.push(rec);
            }
            self.epochs_done += 1;
            if let Some((p, w)) = log.as_mut() {
                w.flush().map_err(|e| Error::io(&*p, e))?;
            }
            if let Some(dir) = out {
                self.save(&epoch_dir(dir, self.epochs_done))?;
            }
        }
        Ok(records)
    }

    fn dump_diagnostics(&self, dir: &Path, idx: &[usize], err: &Error) -> Result<()> {
        let bundle = self.batch_loss(idx).ok().map(|(_, b)| b);
        let v = serde_json::json!({
            "step": self.step,
            "error": err.to_string(),
            "examples": self.ids(idx),
            "losses": bundle,
            "lr": cosine_lr(self.cfg.optim.lr, self.step, self.total_steps.max(1), self.cfg.optim.warmup_frac),
        });
        let p = dir.join("diagnostics.json");
        std::fs::write(&p, serde_json::to_string_pretty(&v)?).map_err(|e| Error::io(&p, e))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.save(&dir.join("model"))?;
        self.opt.save(&dir.join("optim"))?;
        let st = TrainerState {
            run: self.cfg.clone(),
            epochs_done: self.epochs_done,
            step: self.step,
            total_steps: self.total_steps,
        };
        let p = dir.join("trainer.json");
        std::fs::write(&p, serde_json::to_string_pretty(&st)?).map_err(|e| Error::io(&p, e))
    }
}

pub fn epoch_dir(out: &Path, epoch: usize) -> PathBuf {
    out.join(format!("epoch-{epoch:03}"))
}

/// Model directory of the newest epoch checkpoint under a run directory, or
/// `dir` itself when it already is a model or epoch directory.
pub fn latest_model_dir(dir: &Path) -> Result<PathBuf> {
    if dir.join("config.json").exists() {
        return Ok(dir.to_path_buf());
    }
    if dir.join("model").join("config.json").exists() {
        return Ok(dir.join("model"));
    }
    let mut epochs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|_| Error::Data(format!("no checkpoint at {}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("epoch-"))
        })
        .collect();
    epochs.sort();
    epochs
        .pop()
        .map(|p| p.join("model"))
        .ok_or_else(|| Error::Data(format!("no checkpoint at {}", dir.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::compress::CompressParams;
    use crate::data::{synth_dataset, Task, TaskMix};

    pub(crate) fn tiny_run() -> RunConfig {
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
                    layers: 1,
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

    #[test]
    fn loc_rows_follow_target_placeholders() {
        let cfg = tiny_run();
        let mut synth = cfg.synth.clone();
        synth.mix = TaskMix::only(Task::Dvc);
        let ex = synth_dataset(3, &synth, 5, Exec::Sequential).unwrap();
        let t = Trainer::new(cfg, ex, Path::new("."), Exec::Sequential).unwrap();
        let pos = t.loc_positions(&[0, 1, 2]);
        for (k, p) in pos.iter().enumerate() {
            let ex = &t.examples[k];
            let lay = t.layout(ex);
            let off = t.visual[k].0.dim(0).unwrap() + t.visual[k].1.dim(0).unwrap();
            let loc = t.model.backbone.loc_id();
            let want: Vec<usize> = lay
                .text
                .iter()
                .enumerate()
                .filter(|(_, &x)| x == loc)
                .map(|(i, _)| off + i)
                .collect();
            assert_eq!(p, &want);
            assert_eq!(p.len(), ex.gt_segments.len());
        }
    }

    #[test]
    fn budget_check() {
        let mut cfg = tiny_run();
        cfg.model.backbone.context = 64;
        assert_eq!(cfg.validate().unwrap_err().category(), "config");
    }
}
