//! Training losses: language-model NLL, per-frame foreground BCE, and
//! boundary regression (smooth-L1 plus 1-D generalized IoU).

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::nn;
use crate::{Error, Result, Segment};

pub use crate::segment::giou_1d;

pub const PROB_CLAMP: f64 = 1e-7;
const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub text: f64,
    pub l1: f64,
    pub iou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            text: 1.0,
            l1: 1.0,
            iou: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub text: f64,
    pub ce: f64,
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
}

/// `total = λ_text·text + ce + λ_L1·l1 + λ_iou·giou`.
pub fn total_loss(text: f64, ce: f64, l1: f64, giou: f64, w: &LossWeights) -> Result<LossBundle> {
    let total = w.text * text + ce + (w.l1 * l1 + w.iou * giou);
    let b = LossBundle {
        text,
        ce,
        l1,
        giou,
        total,
    };
    for (name, v) in [("text", text), ("ce", ce), ("l1", l1), ("giou", giou), ("total", total)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss is {v}")));
        }
    }
    Ok(b)
}

/// Tensor form of [`total_loss`] for backpropagation.
pub fn total_loss_tensor(text: &Tensor, ce: &Tensor, l1: &Tensor, giou: &Tensor, w: &LossWeights) -> Result<Tensor> {
    let reg = ((l1 * w.l1)? + (giou * w.iou)?)?;
    Ok((((text * w.text)? + ce)? + reg)?)
}

/// Mean negative log-likelihood of `targets` under `logits [N, V]` over the
/// positions where `mask` is set.
pub fn text_loss(logits: &Tensor, targets: &[u32], mask: &[bool]) -> Result<Tensor> {
    let n = logits.dim(0)?;
    if targets.len() != n || mask.len() != n {
        return Err(invalid!("{n} logit rows, {} targets, {} mask entries", targets.len(), mask.len()));
    }
    let keep: Vec<u32> = (0..n as u32).filter(|&i| mask[i as usize]).collect();
    if keep.is_empty() {
        return Err(invalid!("text loss mask selects no positions"));
    }
    let idx = Tensor::from_vec(keep.clone(), keep.len(), &Device::Cpu)?;
    let tgt: Vec<u32> = keep.iter().map(|&i| targets[i as usize]).collect();
    let tgt = Tensor::from_vec(tgt, (keep.len(), 1), &Device::Cpu)?;
    let logp = nn::log_softmax_last(&logits.index_select(&idx, 0)?)?;
    Ok(logp.gather(&tgt, 1)?.mean_all()?.neg()?)
}

/// Foreground indicator: ones at frames `floor(start) ..= ceil(end)` within
/// `[0, n - 1]`.
pub fn fg_labels(gt: &Segment, n: usize) -> Vec<f64> {
    let lo = gt.start.floor();
    let hi = gt.end.ceil();
    (0..n)
        .map(|i| {
            let t = i as f64;
            if t >= lo && t <= hi {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

fn labels_tensor(labels: &[f64], like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::from_vec(labels.to_vec(), like.shape(), &Device::Cpu)?.to_dtype(like.dtype())?)
}

/// Mean binary cross-entropy of probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn indicator_loss(probs: &Tensor, labels: &[f64]) -> Result<Tensor> {
    let y = labels_tensor(labels, probs)?;
    let p = probs.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let pos = (&y * p.log()?)?;
    let neg = ((1.0 - &y)? * (1.0 - &p)?.log()?)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

/// The same loss on pre-sigmoid scores: `relu(z) - z·y + ln(1 + exp(-|z|))`.
pub fn indicator_loss_logits(logits: &Tensor, labels: &[f64]) -> Result<Tensor> {
    let y = labels_tensor(labels, logits)?;
    let tail = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((logits.relu()? - (logits * &y)?)? + tail)?.mean_all()?)
}

/// `0.5 r²` for `|r| < 1`, `|r| - 0.5` beyond.
pub fn smooth_l1(r: &Tensor) -> Result<Tensor> {
    let a = r.abs()?;
    let m = (&a - (&a - 1.0)?.relu()?)?;
    Ok(((m.sqr()? * 0.5)? + (a - m)?)?)
}

/// Smooth-L1 between predicted offsets `[n, 2]` and the true offsets
/// `(i - start, end - i)`, averaged over the elements of foreground frames,
/// and the mean of `1 - gIoU` between each foreground frame's decoded
/// segment and `gt`.
pub fn boundary_loss(offsets: &Tensor, gt: &Segment) -> Result<(Tensor, Tensor)> {
    let n = offsets.dim(0)?;
    let fg: Vec<u32> = fg_labels(gt, n)
        .iter()
        .enumerate()
        .filter(|(_, &y)| y > 0.5)
        .map(|(i, _)| i as u32)
        .collect();
    if fg.is_empty() {
        return Err(invalid!("ground truth [{}, {}] has no foreground frame among {n}", gt.start, gt.end));
    }
    let dtype = offsets.dtype();
    let k = fg.len();
    let idx = Tensor::from_vec(fg.clone(), k, &Device::Cpu)?;
    let pred = offsets.index_select(&idx, 0)?;
    let target: Vec<f64> = fg
        .iter()
        .flat_map(|&i| [i as f64 - gt.start, gt.end - i as f64])
        .collect();
    let target = Tensor::from_vec(target, (k, 2), &Device::Cpu)?.to_dtype(dtype)?;
    let l1 = smooth_l1(&(&pred - &target)?)?.mean_all()?;

    let pos = Tensor::from_vec(fg.iter().map(|&i| i as f64).collect::<Vec<_>>(), k, &Device::Cpu)?.to_dtype(dtype)?;
    let left = pred.narrow(1, 0, 1)?.squeeze(1)?;
    let right = pred.narrow(1, 1, 1)?.squeeze(1)?;
    let ps = (&pos - &left)?;
    let pe = (&pos + &right)?;
    let gs = Tensor::full(gt.start, k, &Device::Cpu)?.to_dtype(dtype)?;
    let ge = Tensor::full(gt.end, k, &Device::Cpu)?.to_dtype(dtype)?;
    let inter = (pe.minimum(&ge)? - ps.maximum(&gs)?)?.relu()?;
    let plen = (&pe - &ps)?;
    let union = ((plen + (gt.end - gt.start))? - &inter)?.clamp(EPS, f64::INFINITY)?;
    let hull = (pe.maximum(&ge)? - ps.minimum(&gs)?)?.clamp(EPS, f64::INFINITY)?;
    let giou = ((&inter / &union)? - ((&hull - &union)? / &hull)?)?;
    let giou_loss = (1.0 - giou)?.mean_all()?;
    Ok((l1, giou_loss))
}

/// Pairs the i-th emitted `<LOC>` with the i-th ground-truth segment.
pub fn match_locs(n_locs: usize, n_gts: usize) -> Vec<(usize, usize)> {
    (0..n_locs.min(n_gts)).map(|i| (i, i)).collect()
}
