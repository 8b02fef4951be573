use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{correlation_oracle, visual_tokens, Task, TrainExample};
use crate::error::invalid;
use crate::features::FrameFeatureSet;
use crate::model::Model;
use crate::segment::iou_1d;
use crate::{Error, Exec, Result, Segment};

pub const HIST_BINS: usize = 50;

/// Two predictions count as the same when their IoU is at least this.
pub const SAME_PREDICTION_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    None,
    Shuffle,
    Blank,
}

impl Perturbation {
    pub const ALL: [Perturbation; 3] = [Perturbation::None, Perturbation::Shuffle, Perturbation::Blank];

    pub fn name(self) -> &'static str {
        match self {
            Perturbation::None => "none",
            Perturbation::Shuffle => "shuffle",
            Perturbation::Blank => "blank",
        }
    }
}

impl std::str::FromStr for Perturbation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Perturbation::None),
            "shuffle" | "shuffle_video" => Ok(Perturbation::Shuffle),
            "blank" | "blank_video" => Ok(Perturbation::Blank),
            o => Err(invalid!("unknown perturbation {o:?} (expected none, shuffle or blank)")),
        }
    }
}

/// Frame order shuffled with a seeded permutation, or every feature zeroed.
pub fn perturb(f: &FrameFeatureSet, p: Perturbation, seed: u64) -> Result<FrameFeatureSet> {
    match p {
        Perturbation::None => Ok(f.clone()),
        Perturbation::Shuffle => {
            let mut order: Vec<usize> = (0..f.n()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            f.permute_frames(&order)
        }
        Perturbation::Blank => Ok(FrameFeatureSet::blank(f.n(), f.p(), f.feat_dim())),
    }
}

#[derive(Debug, Clone)]
pub struct GroundQuery {
    pub id: String,
    pub features: FrameFeatureSet,
    pub prompt: String,
    /// Queried class, when known (used by the oracle).
    pub class_id: Option<usize>,
}

/// Anything that maps a video and a grounding prompt to one segment.
pub trait Grounder {
    fn ground(&self, queries: &[GroundQuery]) -> Result<Vec<Option<Segment>>>;
}

/// Always answers the same segment.
pub struct ConstantGrounder(pub Segment);

impl Grounder for ConstantGrounder {
    fn ground(&self, queries: &[GroundQuery]) -> Result<Vec<Option<Segment>>> {
        Ok(vec![Some(self.0); queries.len()])
    }
}

/// Reads event placement directly from the patch features.
pub struct OracleGrounder;

impl Grounder for OracleGrounder {
    fn ground(&self, queries: &[GroundQuery]) -> Result<Vec<Option<Segment>>> {
        Ok(queries
            .iter()
            .map(|q| q.class_id.and_then(|c| correlation_oracle(&q.features, c)))
            .collect())
    }
}

/// A trained model queried with free-running decoding.
pub struct ModelGrounder<'a> {
    pub model: &'a Model,
    pub batch: usize,
    pub exec: Exec,
}

impl Grounder for ModelGrounder<'_> {
    fn ground(&self, queries: &[GroundQuery]) -> Result<Vec<Option<Segment>>> {
        let params = &self.model.cfg.compress;
        let vis = self.exec.try_map(queries, |q| visual_tokens(&q.features, params))?;
        let vis: Vec<_> = vis.iter().map(|v| self.model.visual_tensors(v)).collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(queries.len());
        for (qs, vs) in queries.chunks(self.batch.max(1)).zip(vis.chunks(self.batch.max(1))) {
            let items: Vec<_> = vs.iter().zip(qs).map(|(v, q)| (v, q.prompt.as_str())).collect();
            out.extend(self.model.predict(&items, 1)?.iter().map(|p| p.top1()));
        }
        Ok(out)
    }
}

/// Grounding queries for the TG examples of a dataset.
pub fn grounding_queries(examples: &[TrainExample], base: &Path, exec: Exec) -> Result<Vec<GroundQuery>> {
    let tg: Vec<&TrainExample> = examples.iter().filter(|e| e.task == Task::Tg).collect();
    exec.try_map(&tg, |e| {
        Ok(GroundQuery {
            id: e.id.clone(),
            features: e.load_features(base)?,
            prompt: e.prompt.clone(),
            class_id: e.gt_classes.first().copied(),
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationStats {
    pub perturbation: Perturbation,
    pub samples: usize,
    pub missing: usize,
    /// `[start bin][end bin]` share of predicted samples; sums to 1 when
    /// anything was predicted.
    pub histogram: Vec<Vec<f64>>,
    /// Share of all samples in the most populated cell, with missing
    /// predictions pooled into one extra cell.
    pub mode_share: f64,
    /// Share of samples whose prediction changed against the unperturbed
    /// run (IoU below 0.5, or predicted in only one of the two).
    pub sensitivity: f64,
    pub predictions: Vec<Option<Segment>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub stats: Vec<PerturbationStats>,
}

impl BiasReport {
    pub fn get(&self, p: Perturbation) -> Option<&PerturbationStats> {
        self.stats.iter().find(|s| s.perturbation == p)
    }

    /// Sensitivity under frame shuffling.
    pub fn sensitivity(&self) -> f64 {
        self.get(Perturbation::Shuffle).map_or(0.0, |s| s.sensitivity)
    }
}

fn bin(x: f64) -> usize {
    ((x * HIST_BINS as f64).floor().max(0.0) as usize).min(HIST_BINS - 1)
}

/// Histogram of normalised `(start, end)` pairs, where frame `f` of `n`
/// normalises to `f / (n - 1)`.
pub fn prediction_histogram(preds: &[Option<Segment>], lens: &[usize]) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut counts = vec![vec![0usize; HIST_BINS]; HIST_BINS];
    for (p, &n) in preds.iter().zip(lens) {
        if let Some(p) = p {
            let last = (n.max(2) - 1) as f64;
            counts[bin(p.start / last)][bin(p.end / last)] += 1;
        }
    }
    let total: usize = counts.iter().flatten().sum();
    let mass = counts
        .iter()
        .map(|r| {
            r.iter()
                .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                .collect()
        })
        .collect();
    (mass, counts.into_iter().flatten().collect())
}

pub fn changed(a: &Option<Segment>, b: &Option<Segment>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => iou_1d(a, b) < SAME_PREDICTION_IOU,
        (None, None) => false,
        _ => true,
    }
}

fn stats(
    p: Perturbation,
    preds: Vec<Option<Segment>>,
    base: Option<&[Option<Segment>]>,
    lens: &[usize],
) -> PerturbationStats {
    let n = preds.len();
    let (histogram, counts) = prediction_histogram(&preds, lens);
    let missing = preds.iter().filter(|p| p.is_none()).count();
    let top = counts.iter().copied().max().unwrap_or(0).max(missing);
    let sensitivity = match base {
        Some(b) if n > 0 => b.iter().zip(&preds).filter(|(a, b)| changed(a, b)).count() as f64 / n as f64,
        _ => 0.0,
    };
    PerturbationStats {
        perturbation: p,
        samples: n,
        missing,
        histogram,
        mode_share: if n == 0 { 0.0 } else { top as f64 / n as f64 },
        sensitivity,
        predictions: preds,
    }
}

/// Grounds every query unperturbed, with frames shuffled and with a blank
/// video, and summarises how concentrated and how video-dependent the
/// predictions are.
pub fn bias_diagnostic(grounder: &dyn Grounder, queries: &[GroundQuery], seed: u64, exec: Exec) -> Result<BiasReport> {
    if queries.is_empty() {
        return Err(invalid!("no grounding queries"));
    }
    let lens: Vec<usize> = queries.iter().map(|q| q.features.n()).collect();
    let clean = grounder.ground(queries)?;
    let mut out = vec![stats(Perturbation::None, clean.clone(), None, &lens)];
    for p in [Perturbation::Shuffle, Perturbation::Blank] {
        let qs: Vec<GroundQuery> = exec.try_map(&queries.iter().enumerate().collect::<Vec<_>>(), |(i, q)| {
            Ok::<_, Error>(GroundQuery {
                features: perturb(&q.features, p, seed ^ (*i as u64).wrapping_mul(0x2545_f491_4f6c_dd1d))?,
                ..(*q).clone()
            })
        })?;
        let preds = grounder.ground(&qs)?;
        out.push(stats(p, preds, Some(&clean), &lens));
    }
    Ok(BiasReport { stats: out })
}
