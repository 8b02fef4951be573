//! Annotation parsers for public grounding benchmarks.
//!
//! * `charades_sta`: text lines `<vid> <start> <end>##<query>` (seconds).
//! * `qvhighlights`: JSON lines with `qid`, `query`, `vid`, `duration`,
//!   `relevant_windows` and optionally `relevant_clip_ids` and
//!   `saliency_scores` (three annotators per clip).
//! * `nextgqa`: JSON lines with `qid`, `video_id`, `question`, `options`,
//!   `answer` (option index), `duration` and `location` windows.
//!
//! Segments stay in seconds here; [`examples_from_annotations`] converts
//! them to frames once the feature files are known.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::templates::{render_template, TemplateFields};
use super::{split_of, FeatureSource, Task, TrainExample};
use crate::error::invalid;
use crate::features::load_features;
use crate::head::CLIP_SECONDS;
use crate::{Error, Result, Segment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationFormat {
    CharadesSta,
    Qvhighlights,
    Nextgqa,
}

impl std::str::FromStr for AnnotationFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "charades_sta" => Ok(AnnotationFormat::CharadesSta),
            "qvhighlights" => Ok(AnnotationFormat::Qvhighlights),
            "nextgqa" => Ok(AnnotationFormat::Nextgqa),
            o => Err(invalid!("unknown annotation format {o:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub video_id: String,
    pub query: String,
    /// Seconds.
    pub segments: Vec<Segment>,
    pub duration: Option<f64>,
    pub clip_ids: Vec<usize>,
    /// Per clip, one label per annotator (0 to 4).
    pub saliency: Vec<Vec<u8>>,
    pub options: Vec<String>,
    pub answer: Option<usize>,
}

impl AnnotationRecord {
    fn new(id: String, video_id: String, query: String) -> Self {
        AnnotationRecord {
            id,
            video_id,
            query,
            segments: Vec::new(),
            duration: None,
            clip_ids: Vec::new(),
            saliency: Vec::new(),
            options: Vec::new(),
            answer: None,
        }
    }
}

#[derive(Deserialize)]
struct QvhLine {
    qid: serde_json::Value,
    query: String,
    vid: String,
    duration: f64,
    relevant_windows: Vec<[f64; 2]>,
    #[serde(default)]
    relevant_clip_ids: Vec<usize>,
    #[serde(default)]
    saliency_scores: Vec<Vec<u8>>,
}

#[derive(Deserialize)]
struct GqaLine {
    qid: serde_json::Value,
    video_id: String,
    question: String,
    options: Vec<String>,
    answer: usize,
    duration: f64,
    location: Vec<[f64; 2]>,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn qid_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn window(path: &Path, line: usize, w: [f64; 2]) -> Result<Segment> {
    let s = Segment::new(w[0], w[1]);
    if !s.is_valid() || s.start < 0.0 {
        return Err(parse_err(path, line, format!("invalid window [{}, {}]", w[0], w[1])));
    }
    Ok(s)
}

pub fn ingest_annotations(format: AnnotationFormat, path: &Path) -> Result<Vec<AnnotationRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let ln = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec = match format {
            AnnotationFormat::CharadesSta => {
                let (head, query) = line
                    .split_once("##")
                    .ok_or_else(|| parse_err(path, ln, "expected '<vid> <start> <end>##<query>'"))?;
                let parts: Vec<&str> = head.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(parse_err(path, ln, format!("expected 3 fields before '##', found {}", parts.len())));
                }
                let num = |s: &str, what: &str| {
                    s.parse::<f64>()
                        .map_err(|_| parse_err(path, ln, format!("{what} {s:?} is not a number")))
                };
                let seg = window(path, ln, [num(parts[1], "start")?, num(parts[2], "end")?])?;
                let mut r = AnnotationRecord::new(format!("{}_{}", parts[0], ln), parts[0].into(), query.trim().into());
                r.segments.push(seg);
                r
            }
            AnnotationFormat::Qvhighlights => {
                let q: QvhLine = serde_json::from_str(&line).map_err(|e| parse_err(path, ln, e.to_string()))?;
                let mut r = AnnotationRecord::new(qid_string(&q.qid), q.vid, q.query);
                for w in q.relevant_windows {
                    r.segments.push(window(path, ln, w)?);
                }
                if !q.saliency_scores.is_empty() && q.saliency_scores.len() != q.relevant_clip_ids.len() {
                    return Err(parse_err(path, ln, "saliency_scores and relevant_clip_ids differ in length"));
                }
                r.duration = Some(q.duration);
                r.clip_ids = q.relevant_clip_ids;
                r.saliency = q.saliency_scores;
                r
            }
            AnnotationFormat::Nextgqa => {
                let q: GqaLine = serde_json::from_str(&line).map_err(|e| parse_err(path, ln, e.to_string()))?;
                if q.answer >= q.options.len() {
                    return Err(parse_err(path, ln, format!("answer {} outside {} options", q.answer, q.options.len())));
                }
                let mut r = AnnotationRecord::new(qid_string(&q.qid), q.video_id, q.question);
                for w in q.location {
                    r.segments.push(window(path, ln, w)?);
                }
                r.duration = Some(q.duration);
                r.options = q.options;
                r.answer = Some(q.answer);
                r
            }
        };
        out.push(rec);
    }
    Ok(out)
}

/// Turns annotation records into grounding (or QA) examples whose features
/// live at `<features_dir>/<video_id>.feat`. Videos without a stated
/// duration use `default_duration`.
pub fn examples_from_annotations(
    records: &[AnnotationRecord],
    features_dir: &Path,
    default_duration: Option<f64>,
    seed: u64,
) -> Result<Vec<TrainExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let rel = PathBuf::from(format!("{}.feat", r.video_id));
        let n = load_features(&features_dir.join(&rel))?.n();
        let duration = r
            .duration
            .or(default_duration)
            .ok_or_else(|| invalid!("record {} has no duration", r.id))?;
        let gt: Vec<Segment> = r.segments.iter().map(|s| s.seconds_to_frames(n, duration)).collect();
        let (task, fields) = match r.answer {
            Some(a) => (
                Task::Vqa,
                TemplateFields::Choice {
                    options: r.options.clone(),
                    answer: a,
                },
            ),
            None => (Task::Tg, TemplateFields::Grounding { query: r.query.clone() }),
        };
        let (mut prompt, target) = render_template(task, &fields, &mut rng)?;
        if task == Task::Vqa {
            prompt = format!("{} {}", r.query, prompt);
        }
        let gt = if task == Task::Tg { gt.into_iter().take(1).collect() } else { gt };
        let mut clip_labels = Vec::new();
        if let Some(first) = r.saliency.first() {
            let clips = ((duration / CLIP_SECONDS).ceil() as usize).max(1);
            clip_labels = vec![vec![0u8; first.len()]; clips];
            for (&c, l) in r.clip_ids.iter().zip(&r.saliency) {
                if c < clips {
                    clip_labels[c] = l.clone();
                }
            }
        }
        out.push(TrainExample {
            split: split_of(&r.id),
            id: r.id.clone(),
            task,
            features: FeatureSource::File { path: rel },
            prompt,
            target,
            gt_segments: gt,
            answer: r.answer.map(|a| r.options[a].clone()),
            duration,
            gt_classes: Vec::new(),
            clip_labels,
        });
    }
    Ok(out)
}
