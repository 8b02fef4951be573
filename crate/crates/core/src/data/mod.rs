//! Training examples, templates, synthetic data, annotation ingestion and
//! dataset files.
//!
//! A dataset is a directory holding `examples.jsonl`, one [`TrainExample`]
//! per line. Features are either a synthetic video description (re-encoded
//! on demand) or a feature container path relative to the directory.

mod ingest;
mod synth;
pub mod templates;

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use ingest::{examples_from_annotations, ingest_annotations, AnnotationFormat, AnnotationRecord};
pub use synth::{correlation_oracle, synth_dataset, SynthConfig, TaskMix, CLASS_PHRASES};
pub use templates::{render_template, TemplateFields};

use crate::backbone::tokenizer::LOC_TEXT;
use crate::compress::{compress, CompressParams};
use crate::error::invalid;
use crate::features::{encode_synthetic, load_features, FrameFeatureSet, SyntheticVideoSpec};
use crate::{Error, Exec, Result, Segment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Tg,
    Dvc,
    Vqa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Deterministic 80/10/10 split keyed on the example id.
pub fn split_of(id: &str) -> Split {
    let h = Sha256::digest(id.as_bytes());
    let v = u64::from_le_bytes(h[..8].try_into().expect("8 bytes")) % 100;
    match v {
        0..=79 => Split::Train,
        80..=89 => Split::Val,
        _ => Split::Test,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSource {
    Synthetic { spec: SyntheticVideoSpec },
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainExample {
    pub id: String,
    pub task: Task,
    pub features: FeatureSource,
    pub prompt: String,
    pub target: String,
    /// Frame units, in the order their `<LOC>` placeholders appear.
    pub gt_segments: Vec<Segment>,
    #[serde(default)]
    pub answer: Option<String>,
    /// Video length in seconds.
    pub duration: f64,
    pub split: Split,
    /// Class behind each ground-truth segment, when known.
    #[serde(default)]
    pub gt_classes: Vec<usize>,
    /// Highlight labels (0 to 4) per 2-second clip and annotator.
    #[serde(default)]
    pub clip_labels: Vec<Vec<u8>>,
}

impl TrainExample {
    pub fn loc_count(&self) -> usize {
        self.target.matches(LOC_TEXT).count()
    }

    pub fn validate(&self) -> Result<()> {
        let locs = self.loc_count();
        match self.task {
            Task::Tg | Task::Dvc if locs != self.gt_segments.len() && locs > 0 => Err(invalid!(
                "example {}: {} <LOC> placeholders for {} segments",
                self.id,
                locs,
                self.gt_segments.len()
            )),
            Task::Vqa if locs != 0 => Err(invalid!("example {}: QA target contains <LOC>", self.id)),
            _ => {
                if self.gt_segments.iter().any(|s| !s.is_valid()) {
                    return Err(invalid!("example {}: degenerate ground-truth segment", self.id));
                }
                Ok(())
            }
        }
    }

    pub fn load_features(&self, base: &Path) -> Result<FrameFeatureSet> {
        match &self.features {
            FeatureSource::Synthetic { spec } => encode_synthetic(spec),
            FeatureSource::File { path } => {
                let p = if path.is_absolute() { path.clone() } else { base.join(path) };
                load_features(&p)
            }
        }
    }

    pub fn n_frames(&self, base: &Path) -> Result<usize> {
        match &self.features {
            FeatureSource::Synthetic { spec } => Ok(spec.n_frames),
            FeatureSource::File { .. } => Ok(self.load_features(base)?.n()),
        }
    }
}

/// T-tokens (class tokens) and S-tokens (compressed patches) of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualTokens {
    pub t: Array2<f32>,
    pub s: Array2<f32>,
}

pub fn visual_tokens(f: &FrameFeatureSet, params: &CompressParams) -> Result<VisualTokens> {
    let (s, _) = compress(f, params, Exec::Sequential)?;
    Ok(VisualTokens { t: f.cls.clone(), s })
}

/// Visual tokens for every example, computed per example under `exec`.
pub fn prepare_visual(
    examples: &[TrainExample],
    base: &Path,
    params: &CompressParams,
    exec: Exec,
) -> Result<Vec<VisualTokens>> {
    exec.try_map(examples, |ex| visual_tokens(&ex.load_features(base)?, params))
}

pub fn dataset_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("examples.jsonl")
    } else {
        path.to_path_buf()
    }
}

pub fn save_dataset(dir: &Path, examples: &[TrainExample]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("examples.jsonl");
    let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads `examples.jsonl` from a dataset directory (or a direct file path)
/// and returns the examples with the directory used to resolve features.
pub fn load_dataset(path: &Path) -> Result<(Vec<TrainExample>, PathBuf)> {
    let file = dataset_file(path);
    if !file.exists() {
        return Err(Error::Data(format!("dataset {} not found", file.display())));
    }
    let base = file.parent().map(Path::to_path_buf).unwrap_or_default();
    let f = std::fs::File::open(&file).map_err(|e| Error::io(&file, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&file, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: TrainExample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: file.clone(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        ex.validate()?;
        out.push(ex);
    }
    Ok((out, base))
}
