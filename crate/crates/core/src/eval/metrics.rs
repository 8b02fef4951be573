use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::segment::{iop_1d, iou_1d};
use crate::{Result, Segment};

pub const RECALL_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// Label a highlight clip needs to count as positive ("Very Good").
pub const VERY_GOOD: u8 = 4;

/// `0.5, 0.55, ..., 0.95`.
pub fn map_sweep() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallAtIou {
    pub thresholds: Vec<f64>,
    pub recall: Vec<f64>,
    pub miou: f64,
    pub ious: Vec<f64>,
}

/// Recall@1 at each IoU threshold and mean IoU. A missing prediction scores
/// IoU 0.
pub fn recall_at_iou(preds: &[Option<Segment>], gts: &[Segment], thresholds: &[f64]) -> Result<RecallAtIou> {
    if preds.len() != gts.len() {
        return Err(invalid!("{} predictions for {} ground truths", preds.len(), gts.len()));
    }
    if preds.is_empty() {
        return Err(invalid!("no samples"));
    }
    let ious: Vec<f64> = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| p.map_or(0.0, |p| iou_1d(&p, g)))
        .collect();
    let n = ious.len() as f64;
    let recall = thresholds
        .iter()
        .map(|&t| ious.iter().filter(|&&v| v >= t).count() as f64 / n)
        .collect();
    Ok(RecallAtIou {
        thresholds: thresholds.to_vec(),
        recall,
        miou: ious.iter().sum::<f64>() / n,
        ious,
    })
}

/// Area under the precision envelope for a ranked list of hit flags.
fn envelope_ap(hits: &[bool], n_pos: usize) -> f64 {
    if n_pos == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(hits.len());
    let mut rec = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        prec.push(tp as f64 / (k + 1) as f64);
        rec.push(tp as f64 / n_pos as f64);
    }
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut ap = 0.0;
    let mut last = 0.0;
    for k in 0..prec.len() {
        if rec[k] > last {
            ap += (rec[k] - last) * prec[k];
            last = rec[k];
        }
    }
    ap
}

fn rank(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let s: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    order
}

/// Average precision of one query: predictions in descending score order
/// each claim the unclaimed ground truth of highest IoU at or above `thr`.
pub fn average_precision(preds: &[Segment], gts: &[Segment], thr: f64) -> f64 {
    let mut used = vec![false; gts.len()];
    let hits: Vec<bool> = rank(preds.iter().map(|p| p.score))
        .into_iter()
        .map(|i| {
            let best = (0..gts.len())
                .filter(|&j| !used[j])
                .map(|j| (j, iou_1d(&preds[i], &gts[j])))
                .filter(|&(_, v)| v >= thr)
                .fold(None::<(usize, f64)>, |b, c| match b {
                    Some(b) if b.1 >= c.1 => Some(b),
                    _ => Some(c),
                });
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    envelope_ap(&hits, gts.len())
}

/// mAP at each threshold over queries that have ground truth.
pub fn map_at_iou(preds: &[Vec<Segment>], gts: &[Vec<Segment>], thresholds: &[f64]) -> Result<Vec<f64>> {
    if preds.len() != gts.len() {
        return Err(invalid!("{} prediction lists for {} queries", preds.len(), gts.len()));
    }
    let queries: Vec<usize> = (0..gts.len()).filter(|&q| !gts[q].is_empty()).collect();
    if queries.is_empty() {
        return Err(invalid!("no query has ground truth"));
    }
    Ok(thresholds
        .iter()
        .map(|&t| queries.iter().map(|&q| average_precision(&preds[q], &gts[q], t)).sum::<f64>() / queries.len() as f64)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub map_50: f64,
    pub map_75: f64,
    pub map_avg: f64,
}

pub fn map_summary(preds: &[Vec<Segment>], gts: &[Vec<Segment>]) -> Result<MapSummary> {
    let sweep = map_sweep();
    let v = map_at_iou(preds, gts, &sweep)?;
    let at = map_at_iou(preds, gts, &[0.5, 0.75])?;
    Ok(MapSummary {
        map_50: at[0],
        map_75: at[1],
        map_avg: v.iter().sum::<f64>() / v.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HdMetrics {
    pub map: f64,
    pub hit1: f64,
    /// Per query: mean AP over annotators with a positive clip, if any.
    pub ap: Vec<Option<f64>>,
    pub hit: Vec<f64>,
}

/// Highlight metrics from clip scores `[query][clip]` and labels
/// `[query][clip][annotator]`. HIT@1 counts a query when any annotator
/// labels its top clip at least `threshold`; mAP averages per-annotator AP of
/// the clip ranking against `label >= threshold`.
pub fn hd_metrics(scores: &[Vec<f64>], labels: &[Vec<Vec<u8>>], threshold: u8) -> Result<HdMetrics> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(invalid!("{} score lists for {} label lists", scores.len(), labels.len()));
    }
    let mut ap = Vec::with_capacity(scores.len());
    let mut hit = Vec::with_capacity(scores.len());
    for (s, l) in scores.iter().zip(labels) {
        if s.len() != l.len() || s.is_empty() {
            return Err(invalid!("{} clip scores for {} labelled clips", s.len(), l.len()));
        }
        let annotators = l[0].len();
        if l.iter().any(|c| c.len() != annotators) {
            return Err(invalid!("clips disagree on the number of annotators"));
        }
        let order = rank(s.iter().copied());
        hit.push(if l[order[0]].iter().any(|&v| v >= threshold) { 1.0 } else { 0.0 });
        let per: Vec<f64> = (0..annotators)
            .filter_map(|a| {
                let pos = l.iter().filter(|c| c[a] >= threshold).count();
                (pos > 0).then(|| envelope_ap(&order.iter().map(|&c| l[c][a] >= threshold).collect::<Vec<_>>(), pos))
            })
            .collect();
        ap.push((!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64));
    }
    let valid: Vec<f64> = ap.iter().flatten().copied().collect();
    Ok(HdMetrics {
        map: if valid.is_empty() { 0.0 } else { valid.iter().sum::<f64>() / valid.len() as f64 },
        hit1: hit.iter().sum::<f64>() / hit.len() as f64,
        ap,
        hit,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GqaSample {
    pub correct: bool,
    pub pred: Option<Segment>,
    pub gts: Vec<Segment>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GqaMetrics {
    pub acc_qa: f64,
    pub iop_03: f64,
    pub iop_05: f64,
    pub miop: f64,
    pub iou_03: f64,
    pub iou_05: f64,
    pub miou: f64,
    pub acc_gqa: f64,
}

/// Best IoP and IoU of a prediction over the ground-truth windows.
pub fn gqa_overlap(s: &GqaSample) -> (f64, f64) {
    match s.pred {
        None => (0.0, 0.0),
        Some(p) => s.gts.iter().fold((0.0f64, 0.0f64), |(a, b), g| {
            (a.max(iop_1d(&p, g)), b.max(iou_1d(&p, g)))
        }),
    }
}

pub fn gqa_metrics(samples: &[GqaSample]) -> Result<GqaMetrics> {
    if samples.is_empty() {
        return Err(invalid!("no samples"));
    }
    let n = samples.len() as f64;
    let ov: Vec<(f64, f64)> = samples.iter().map(gqa_overlap).collect();
    let frac = |f: &dyn Fn(usize) -> bool| (0..samples.len()).filter(|&i| f(i)).count() as f64 / n;
    Ok(GqaMetrics {
        acc_qa: frac(&|i| samples[i].correct),
        iop_03: frac(&|i| ov[i].0 >= 0.3),
        iop_05: frac(&|i| ov[i].0 >= 0.5),
        miop: ov.iter().map(|o| o.0).sum::<f64>() / n,
        iou_03: frac(&|i| ov[i].1 >= 0.3),
        iou_05: frac(&|i| ov[i].1 >= 0.5),
        miou: ov.iter().map(|o| o.1).sum::<f64>() / n,
        acc_gqa: frac(&|i| samples[i].correct && ov[i].0 >= 0.5),
    })
}
