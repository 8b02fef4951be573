use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::diagnostic::{perturb, Perturbation};
use super::metrics::{gqa_metrics, gqa_overlap, hd_metrics, map_summary, recall_at_iou, GqaSample, RECALL_THRESHOLDS, VERY_GOOD};
use super::report::{EvalReport, SampleRecord};
use crate::data::templates::TG_PROMPTS;
use crate::data::{visual_tokens, Task, TrainExample};
use crate::error::invalid;
use crate::head::{clip_saliency, CLIP_SECONDS};
use crate::model::{Model, Prediction};
use crate::objectives::match_locs;
use crate::segment::iou_1d;
use crate::{Error, Exec, Result, Segment};

/// Ranked list length used for moment mAP.
pub const MOMENT_LIST: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTask {
    Tg,
    Hd,
    DvcLoc,
    Gqa,
}

impl EvalTask {
    pub fn name(self) -> &'static str {
        match self {
            EvalTask::Tg => "tg",
            EvalTask::Hd => "hd",
            EvalTask::DvcLoc => "dvc_loc",
            EvalTask::Gqa => "gqa",
        }
    }

    fn source(self) -> Task {
        match self {
            EvalTask::Tg | EvalTask::Hd => Task::Tg,
            EvalTask::DvcLoc => Task::Dvc,
            EvalTask::Gqa => Task::Vqa,
        }
    }
}

impl std::str::FromStr for EvalTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tg" => Ok(EvalTask::Tg),
            "hd" => Ok(EvalTask::Hd),
            "dvc_loc" => Ok(EvalTask::DvcLoc),
            "gqa" => Ok(EvalTask::Gqa),
            o => Err(invalid!("unknown eval task {o:?} (expected tg, hd, dvc_loc or gqa)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub task: EvalTask,
    pub perturbation: Perturbation,
    pub seed: u64,
    pub batch: usize,
    pub exec: Exec,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            task: EvalTask::Tg,
            perturbation: Perturbation::None,
            seed: 0,
            batch: 16,
            exec: Exec::Parallel,
        }
    }
}

fn normalize_answer(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Highlight labels derived from the ground truth: a clip is "Very Good"
/// when its centre falls inside the event, otherwise 0.
pub fn derived_clip_labels(gt: &Segment, n: usize, duration: f64) -> Vec<Vec<u8>> {
    let clips = ((duration / CLIP_SECONDS).ceil() as usize).max(1);
    let sec = gt.frames_to_seconds(n, duration);
    (0..clips)
        .map(|c| {
            let t = (c as f64 + 0.5) * CLIP_SECONDS;
            vec![if t >= sec.start && t <= sec.end { VERY_GOOD } else { 0 }]
        })
        .collect()
}

type Visual = (Tensor, Tensor);

fn prepare(model: &Model, examples: &[&TrainExample], base: &Path, opts: &EvalOptions) -> Result<Vec<Visual>> {
    let items: Vec<(usize, &&TrainExample)> = examples.iter().enumerate().collect();
    let vis = opts.exec.try_map(&items, |(i, e)| {
        let f = e.load_features(base)?;
        if f.feat_dim() != model.cfg.backbone.feat_dim {
            return Err(invalid!("features have width {} but the model expects {}", f.feat_dim(), model.cfg.backbone.feat_dim));
        }
        let f = perturb(&f, opts.perturbation, opts.seed ^ (*i as u64).wrapping_mul(0x2545_f491_4f6c_dd1d))?;
        visual_tokens(&f, &model.cfg.compress)
    })?;
    vis.iter().map(|v| model.visual_tensors(v)).collect()
}

fn run_prompts(model: &Model, vis: &[Visual], prompts: &[String], top_k: usize, batch: usize) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(prompts.len());
    let b = batch.max(1);
    for (vs, ps) in vis.chunks(b).zip(prompts.chunks(b)) {
        let items: Vec<(&Visual, &str)> = vs.iter().zip(ps).map(|(v, p)| (v, p.as_str())).collect();
        out.extend(model.predict(&items, top_k)?);
    }
    Ok(out)
}

fn put(m: &mut BTreeMap<String, f64>, k: &str, v: f64) {
    m.insert(k.to_string(), v);
}

/// Runs one evaluation task over the matching examples of a dataset.
pub fn evaluate(model: &Model, examples: &[TrainExample], base: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let exs: Vec<&TrainExample> = examples.iter().filter(|e| e.task == opts.task.source()).collect();
    if exs.is_empty() {
        return Err(Error::Data(format!("dataset has no {:?} examples for task {}", opts.task.source(), opts.task.name())));
    }
    let vis = prepare(model, &exs, base, opts)?;
    let prompts: Vec<String> = exs.iter().map(|e| e.prompt.clone()).collect();
    let mut report = EvalReport::new(opts.task.name(), opts.perturbation.name());
    let m = &mut report.metrics;
    put(m, "samples", exs.len() as f64);
    match opts.task {
        EvalTask::Tg | EvalTask::Hd => {
            let preds = run_prompts(model, &vis, &prompts, MOMENT_LIST, opts.batch)?;
            let gts: Vec<Segment> = exs
                .iter()
                .map(|e| e.gt_segments.first().copied().ok_or_else(|| invalid!("example {} has no segment", e.id)))
                .collect::<Result<_>>()?;
            let top1: Vec<Option<Segment>> = preds.iter().map(Prediction::top1).collect();
            let r = recall_at_iou(&top1, &gts, &RECALL_THRESHOLDS)?;
            for (t, v) in r.thresholds.iter().zip(&r.recall) {
                put(m, &format!("r1@{t}"), *v);
            }
            put(m, "miou", r.miou);
            let ranked: Vec<Vec<Segment>> = preds.iter().map(|p| p.segments.first().cloned().unwrap_or_default()).collect();
            let gl: Vec<Vec<Segment>> = gts.iter().map(|g| vec![*g]).collect();
            let ms = map_summary(&ranked, &gl)?;
            put(m, "map@0.5", ms.map_50);
            put(m, "map@0.75", ms.map_75);
            put(m, "map@avg", ms.map_avg);
            let fid = exs.iter().zip(&preds).filter(|(e, p)| p.loc_count == e.loc_count()).count();
            put(m, "loc_fidelity", fid as f64 / exs.len() as f64);
            put(m, "no_prediction", top1.iter().filter(|p| p.is_none()).count() as f64 / exs.len() as f64);

            let mut hd = None;
            if opts.task == EvalTask::Hd {
                let mut scores = Vec::new();
                let mut labels = Vec::new();
                for ((e, p), g) in exs.iter().zip(&preds).zip(&gts) {
                    let n = vis_frames(&vis, &exs, e)?;
                    let l = if e.clip_labels.is_empty() {
                        derived_clip_labels(g, n, e.duration)
                    } else {
                        e.clip_labels.clone()
                    };
                    let s = match p.probs.first() {
                        Some(pr) => clip_saliency(pr, e.duration, CLIP_SECONDS),
                        None => vec![0.0; l.len()],
                    };
                    if s.len() != l.len() {
                        return Err(Error::Data(format!("example {}: {} clips scored, {} labelled", e.id, s.len(), l.len())));
                    }
                    scores.push(s);
                    labels.push(l);
                }
                let h = hd_metrics(&scores, &labels, VERY_GOOD)?;
                put(m, "hd_map", h.map);
                put(m, "hit@1", h.hit1);
                hd = Some(h);
            }
            for (k, ((e, p), iou)) in exs.iter().zip(&preds).zip(&r.ious).enumerate() {
                let mut extra = BTreeMap::new();
                extra.insert("loc_count".to_string(), p.loc_count as f64);
                if let Some(h) = &hd {
                    extra.insert("hit".to_string(), h.hit[k]);
                    if let Some(ap) = h.ap[k] {
                        extra.insert("ap".to_string(), ap);
                    }
                }
                report.samples.push(SampleRecord {
                    id: e.id.clone(),
                    pred: p.top1(),
                    gt: Some(gts[k]),
                    iou: *iou,
                    extra,
                });
            }
        }
        EvalTask::DvcLoc => {
            let preds = run_prompts(model, &vis, &prompts, 1, opts.batch)?;
            let mut exact = 0usize;
            for (e, p) in exs.iter().zip(&preds) {
                if p.loc_count == e.gt_segments.len() {
                    exact += 1;
                }
                let pairs = match_locs(p.segments.len(), e.gt_segments.len());
                for (k, g) in e.gt_segments.iter().enumerate() {
                    let pred = pairs
                        .iter()
                        .find(|&&(_, j)| j == k)
                        .and_then(|&(i, _)| p.segments[i].first().copied());
                    let mut extra = BTreeMap::new();
                    extra.insert("loc_count".to_string(), p.loc_count as f64);
                    report.samples.push(SampleRecord {
                        id: format!("{}#{k}", e.id),
                        pred,
                        gt: Some(*g),
                        iou: pred.map_or(0.0, |s| iou_1d(&s, g)),
                        extra,
                    });
                }
            }
            let ious: Vec<f64> = report.samples.iter().map(|s| s.iou).collect();
            let n = ious.len() as f64;
            let m = &mut report.metrics;
            put(m, "loc_fidelity", exact as f64 / exs.len() as f64);
            for t in RECALL_THRESHOLDS {
                put(m, &format!("r1@{t}"), ious.iter().filter(|&&v| v >= t).count() as f64 / n);
            }
            put(m, "miou", ious.iter().sum::<f64>() / n);
        }
        EvalTask::Gqa => {
            let answers = run_prompts(model, &vis, &prompts, 1, opts.batch)?;
            let texts: Vec<String> = answers.iter().map(|a| normalize_answer(&a.text)).collect();
            let ground_prompts: Vec<String> = texts.iter().map(|t| TG_PROMPTS[0].replace("{q}", t)).collect();
            let grounded = run_prompts(model, &vis, &ground_prompts, 1, opts.batch)?;
            let samples: Vec<GqaSample> = exs
                .iter()
                .zip(&texts)
                .zip(&grounded)
                .map(|((e, t), g)| GqaSample {
                    correct: e.answer.as_deref().map(normalize_answer).is_some_and(|a| !a.is_empty() && &a == t),
                    pred: if t.is_empty() { None } else { g.top1() },
                    gts: e.gt_segments.clone(),
                })
                .collect();
            let q = gqa_metrics(&samples)?;
            let m = &mut report.metrics;
            put(m, "acc_qa", q.acc_qa);
            put(m, "iop@0.3", q.iop_03);
            put(m, "iop@0.5", q.iop_05);
            put(m, "miop", q.miop);
            put(m, "iou@0.3", q.iou_03);
            put(m, "iou@0.5", q.iou_05);
            put(m, "miou", q.miou);
            put(m, "acc_gqa", q.acc_gqa);
            for (e, s) in exs.iter().zip(&samples) {
                let (iop, iou) = gqa_overlap(s);
                let mut extra = BTreeMap::new();
                extra.insert("iop".to_string(), iop);
                extra.insert("correct".to_string(), if s.correct { 1.0 } else { 0.0 });
                report.samples.push(SampleRecord {
                    id: e.id.clone(),
                    pred: s.pred,
                    gt: s.gts.first().copied(),
                    iou,
                    extra,
                });
            }
        }
    }
    Ok(report)
}

fn vis_frames(vis: &[Visual], exs: &[&TrainExample], e: &TrainExample) -> Result<usize> {
    let i = exs.iter().position(|x| std::ptr::eq(*x, e)).ok_or_else(|| invalid!("unknown example"))?;
    Ok(vis[i].0.dim(0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answers_normalise() {
        assert_eq!(normalize_answer("A dog runs ."), "a dog runs");
        assert_eq!(normalize_answer("  b. "), "b");
    }

    #[test]
    fn derived_labels_cover_the_event() {
        // 100 frames over 50 s: frame f sits at f * 50 / 99 s
        let l = derived_clip_labels(&Segment::new(0.0, 99.0), 100, 50.0);
        assert_eq!(l.len(), 25);
        assert!(l.iter().all(|c| c == &vec![VERY_GOOD]));
        let l = derived_clip_labels(&Segment::new(0.0, 1.0), 100, 50.0);
        assert_eq!(l.iter().filter(|c| c[0] == VERY_GOOD).count(), 0);
    }
}
