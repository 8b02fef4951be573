//! Temporal expert head: `<LOC>` projection, T-token reweighting, the
//! indicator and boundary branches, and segment decoding.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::nn::{self, Init, Linear, ParamStore};
use crate::segment::iou_1d;
use crate::{Result, Segment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReweightMode {
    #[default]
    Add,
    Concat,
    SelfAtten,
}

impl std::str::FromStr for ReweightMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(ReweightMode::Add),
            "concat" => Ok(ReweightMode::Concat),
            "self_atten" => Ok(ReweightMode::SelfAtten),
            other => Err(invalid!("unknown reweight mode {other:?} (expected add, concat or self_atten)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub mode: ReweightMode,
    pub loc_activation: Activation,
    /// Offsets are `offset_scale * softplus(z)` frames.
    pub offset_scale: f64,
    pub nms_iou: f64,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            mode: ReweightMode::Add,
            loc_activation: Activation::Gelu,
            offset_scale: 10.0,
            nms_iou: 0.7,
            top_k: 1,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocOutput {
    pub probs: Vec<f64>,
    pub offsets: Vec<[f64; 2]>,
    pub segments: Vec<Segment>,
    pub saliency: Vec<f64>,
}

#[derive(Debug, Clone)]
struct ConvStack {
    convs: Vec<Linear>,
    out: Linear,
}

impl ConvStack {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for c in &self.convs {
            h = conv3(&h, c)?.relu()?;
        }
        self.out.forward(&h)
    }
}

/// Kernel-3, same-padded temporal convolution over `[P, n, c_in]` with the
/// weight laid out `[3 * c_in, c_out]`, taps ordered `(i - 1, i, i + 1)`.
pub fn conv3(x: &Tensor, lin: &Linear) -> Result<Tensor> {
    let n = x.dim(1)?;
    let prev = x.pad_with_zeros(1, 1, 0)?.narrow(1, 0, n)?;
    let next = x.pad_with_zeros(1, 0, 1)?.narrow(1, 1, n)?;
    lin.forward(&Tensor::cat(&[&prev, x, &next], D::Minus1)?)
}

#[derive(Debug, Clone)]
pub struct TemporalHead {
    pub cfg: HeadConfig,
    loc: [Linear; 2],
    concat: Option<Linear>,
    xattn: Option<[Linear; 4]>,
    indicator: ConvStack,
    boundary: ConvStack,
}

impl TemporalHead {
    pub fn register(cfg: &HeadConfig, d: usize, store: &mut ParamStore, dtype: DType) -> Result<()> {
        let mut init = Init::new(cfg.seed, dtype);
        let std = 1.0 / (d as f64).sqrt();
        for i in 0..2 {
            nn::register_linear(store, &mut init, &format!("head.loc.{i}"), (d, d), std, true, true)?;
        }
        match cfg.mode {
            ReweightMode::Add => {}
            ReweightMode::Concat => {
                nn::register_linear(store, &mut init, "head.concat", (2 * d, d), std / 2f64.sqrt(), true, true)?;
            }
            ReweightMode::SelfAtten => {
                for p in ["q", "k", "v"] {
                    nn::register_linear(store, &mut init, &format!("head.xattn.{p}"), (d, d), std, true, true)?;
                }
                store.insert("head.xattn.o.w", init.zeros(&[d, d])?, true)?;
                store.insert("head.xattn.o.b", init.zeros(&[d])?, true)?;
            }
        }
        for (branch, out) in [("ind", 1usize), ("bnd", 2)] {
            for c in 0..3 {
                let name = format!("head.{branch}.conv{c}");
                nn::register_linear(store, &mut init, &name, (3 * d, d), (2.0 / (3 * d) as f64).sqrt(), true, true)?;
            }
            nn::register_linear(store, &mut init, &format!("head.{branch}.out"), (d, out), std, true, true)?;
        }
        Ok(())
    }

    pub fn from_store(cfg: &HeadConfig, store: &ParamStore) -> Result<Self> {
        let lin = |n: &str| Linear::from_store(store, n, true);
        let stack = |b: &str| -> Result<ConvStack> {
            Ok(ConvStack {
                convs: (0..3).map(|c| lin(&format!("head.{b}.conv{c}"))).collect::<Result<_>>()?,
                out: lin(&format!("head.{b}.out"))?,
            })
        };
        Ok(TemporalHead {
            cfg: cfg.clone(),
            loc: [lin("head.loc.0")?, lin("head.loc.1")?],
            concat: match cfg.mode {
                ReweightMode::Concat => Some(lin("head.concat")?),
                _ => None,
            },
            xattn: match cfg.mode {
                ReweightMode::SelfAtten => Some([
                    lin("head.xattn.q")?,
                    lin("head.xattn.k")?,
                    lin("head.xattn.v")?,
                    lin("head.xattn.o")?,
                ]),
                _ => None,
            },
            indicator: stack("ind")?,
            boundary: stack("bnd")?,
        })
    }

    /// Two-layer MLP on `<LOC>` hidden states `[P, d]`.
    pub fn project_loc(&self, h: &Tensor) -> Result<Tensor> {
        let z = self.loc[0].forward(h)?;
        let z = match self.cfg.loc_activation {
            Activation::Gelu => nn::gelu(&z)?,
            Activation::Relu => z.relu()?,
            Activation::Identity => z,
        };
        self.loc[1].forward(&z)
    }

    /// Conditions T-token states `[P, n, d]` on `h_loc` `[P, d]`.
    ///
    /// `concat` maps `[x; h_loc]` back to width `d`. `self_atten` adds
    /// `h_loc` to every frame, lets those conditioned frames attend over the
    /// raw T-tokens (single head) and adds the result residually; its output
    /// projection starts at zero so the mode begins as `add`.
    pub fn reweight(&self, x: &Tensor, h_loc: &Tensor) -> Result<Tensor> {
        let hb = h_loc.unsqueeze(1)?;
        match self.cfg.mode {
            ReweightMode::Add => Ok(x.broadcast_add(&hb)?),
            ReweightMode::Concat => {
                let lin = self.concat.as_ref().ok_or_else(|| invalid!("concat weights missing"))?;
                let hrep = hb.broadcast_as(x.shape())?;
                lin.forward(&Tensor::cat(&[x, &hrep], D::Minus1)?)
            }
            ReweightMode::SelfAtten => {
                let [q, k, v, o] = self.xattn.as_ref().ok_or_else(|| invalid!("attention weights missing"))?;
                let z = x.broadcast_add(&hb)?;
                let d = x.dim(D::Minus1)? as f64;
                let scores = (q.forward(&z)?.matmul(&k.forward(x)?.t()?)? * (1.0 / d.sqrt()))?;
                let att = nn::softmax_last(&scores)?.matmul(&v.forward(x)?)?;
                Ok((z + o.forward(&att)?)?)
            }
        }
    }

    /// Pre-sigmoid indicator scores `[P, n]`.
    pub fn indicator_logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.indicator.forward(x)?.squeeze(D::Minus1)?)
    }

    pub fn indicator(&self, x: &Tensor) -> Result<Tensor> {
        nn::sigmoid(&self.indicator_logits(x)?)
    }

    /// Non-negative `(left, right)` offsets `[P, n, 2]` in frames.
    pub fn boundary(&self, x: &Tensor) -> Result<Tensor> {
        Ok((nn::softplus(&self.boundary.forward(x)?)? * self.cfg.offset_scale)?)
    }

    /// `(indicator logits [P, n], offsets [P, n, 2])` for T-token states and
    /// `<LOC>` hidden states.
    pub fn forward(&self, x_t: &Tensor, loc_hidden: &Tensor) -> Result<(Tensor, Tensor)> {
        let h_loc = self.project_loc(loc_hidden)?;
        let x = self.reweight(x_t, &h_loc)?;
        Ok((self.indicator_logits(&x)?, self.boundary(&x)?))
    }

    /// Full inference output for a single `<LOC>`.
    pub fn predict(&self, x_t: &Tensor, loc_hidden: &Tensor, top_k: usize) -> Result<LocOutput> {
        let (logits, offsets) = self.forward(&x_t.unsqueeze(0)?, &loc_hidden.unsqueeze(0)?)?;
        let probs = nn::to_vec_f64(&nn::sigmoid(&logits)?)?;
        let off = nn::to_vec_f64(&offsets)?;
        let offsets: Vec<[f64; 2]> = off.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        let segments = decode_segments(&probs, &offsets, top_k, self.cfg.nms_iou)?;
        Ok(LocOutput {
            saliency: saliency(&probs),
            probs,
            offsets,
            segments,
        })
    }
}

/// Candidate `[i - left_i, i + right_i]` per frame, clipped to `[0, n - 1]`
/// and scored by `probs[i]`; sorted by score (ties to the earlier frame),
/// greedily suppressed at IoU ≥ `nms_iou` and cut to `top_k`.
pub fn decode_segments(probs: &[f64], offsets: &[[f64; 2]], top_k: usize, nms_iou: f64) -> Result<Vec<Segment>> {
    if top_k < 1 {
        return Err(invalid!("top_k must be at least 1"));
    }
    if probs.len() != offsets.len() {
        return Err(invalid!("{} probabilities but {} offset pairs", probs.len(), offsets.len()));
    }
    let n = probs.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let hi = (n - 1) as f64;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept: Vec<Segment> = Vec::new();
    for i in order {
        let c = Segment::with_score(i as f64 - offsets[i][0], i as f64 + offsets[i][1], probs[i]).clipped(0.0, hi);
        if kept.iter().all(|k| iou_1d(k, &c) < nms_iou) {
            kept.push(c);
            if kept.len() == top_k {
                break;
            }
        }
    }
    Ok(kept)
}

pub fn saliency(probs: &[f64]) -> Vec<f64> {
    probs.to_vec()
}

/// Clip length in seconds for highlight scoring.
pub const CLIP_SECONDS: f64 = 2.0;

/// Mean frame saliency per clip. Frame `f` of `n` sits at
/// `(f + 0.5) * duration / n` seconds; a clip with no frame centre takes the
/// frame nearest its own centre.
pub fn clip_saliency(saliency: &[f64], duration: f64, clip_seconds: f64) -> Vec<f64> {
    let n = saliency.len();
    if n == 0 || duration <= 0.0 {
        return Vec::new();
    }
    let clips = (duration / clip_seconds).ceil().max(1.0) as usize;
    let mut sum = vec![0.0; clips];
    let mut cnt = vec![0usize; clips];
    for (f, &s) in saliency.iter().enumerate() {
        let t = (f as f64 + 0.5) * duration / n as f64;
        let c = ((t / clip_seconds).floor() as usize).min(clips - 1);
        sum[c] += s;
        cnt[c] += 1;
    }
    (0..clips)
        .map(|c| {
            if cnt[c] > 0 {
                sum[c] / cnt[c] as f64
            } else {
                let centre = (c as f64 + 0.5) * clip_seconds;
                let f = ((centre * n as f64 / duration - 0.5).round().max(0.0) as usize).min(n - 1);
                saliency[f]
            }
        })
        .collect()
}
