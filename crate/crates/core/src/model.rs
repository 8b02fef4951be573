//! Backbone, temporal head and tokenizer bundled into one grounding model.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::tokenizer::{BOS, EOS, SEP};
use crate::backbone::{load_params, save_params, Backbone, BackboneConfig, TokenStream, Tokenizer};
use crate::compress::CompressParams;
use crate::data::VisualTokens;
use crate::error::invalid;
use crate::head::{HeadConfig, TemporalHead};
use crate::nn::{self, ParamStore};
use crate::{Error, Result, Segment};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    /// Without the head, segments are read from `From <s> to <e>` text.
    pub temporal_head: bool,
    pub compress: CompressParams,
    pub max_new_tokens: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            head: HeadConfig::default(),
            temporal_head: true,
            compress: CompressParams::default(),
            max_new_tokens: 48,
        }
    }
}

/// Output of one free-running grounding query.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub text: String,
    pub tokens: Vec<u32>,
    pub loc_count: usize,
    /// Ranked segments (frames) per emitted `<LOC>`, or a single entry parsed
    /// from text in timestamp mode.
    pub segments: Vec<Vec<Segment>>,
    /// Indicator probabilities per `<LOC>`.
    pub probs: Vec<Vec<f64>>,
    pub truncated: bool,
}

impl Prediction {
    pub fn top1(&self) -> Option<Segment> {
        self.segments.first().and_then(|s| s.first()).copied()
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub tokenizer: Tokenizer,
    pub backbone: Backbone,
    pub store: ParamStore,
}

impl Model {
    pub fn new(cfg: ModelConfig, tokenizer: Tokenizer, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new();
        let backbone = Backbone::init(&cfg.backbone, tokenizer.base_size(), &mut store, dtype)?;
        if cfg.temporal_head {
            TemporalHead::register(&cfg.head, cfg.backbone.d_model, &mut store, dtype)?;
        }
        Ok(Model {
            cfg,
            tokenizer,
            backbone,
            store,
        })
    }

    pub fn head(&self) -> Result<Option<TemporalHead>> {
        if !self.cfg.temporal_head {
            return Ok(None);
        }
        Ok(Some(TemporalHead::from_store(&self.cfg.head, &self.store)?))
    }

    pub fn dtype(&self) -> DType {
        self.backbone.dtype()
    }

    /// `<bos> prompt <sep>`.
    pub fn prompt_ids(&self, prompt: &str) -> Vec<u32> {
        let mut v = vec![BOS];
        v.extend(self.tokenizer.encode(prompt));
        v.push(SEP);
        v
    }

    /// `target <eos>`.
    pub fn target_ids(&self, target: &str) -> Vec<u32> {
        let mut v = self.tokenizer.encode(target);
        v.push(EOS);
        v
    }

    pub fn visual_tensors(&self, vis: &VisualTokens) -> Result<(Tensor, Tensor)> {
        let dtype = self.dtype();
        Ok((nn::from_ndarray(&vis.t, dtype)?, nn::from_ndarray(&vis.s, dtype)?))
    }

    pub fn stream(&self, vis: &(Tensor, Tensor), text: Vec<u32>) -> Result<TokenStream> {
        self.backbone.stream(&self.store, &vis.0, &vis.1, text)
    }

    /// Greedy answers for a batch of `(visual tokens, prompt)` queries.
    pub fn predict(&self, queries: &[(&(Tensor, Tensor), &str)], top_k: usize) -> Result<Vec<Prediction>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let streams: Vec<TokenStream> = queries
            .iter()
            .map(|(v, p)| self.stream(v, self.prompt_ids(p)))
            .collect::<Result<_>>()?;
        let gens = self.backbone.generate(&self.store, &streams, self.cfg.max_new_tokens, None)?;
        let head = self.head()?;
        let loc_id = self.backbone.loc_id();
        let mut out = Vec::with_capacity(queries.len());
        for (b, g) in gens.into_iter().enumerate() {
            let text = self.tokenizer.decode(&g.tokens);
            let mut segments = Vec::new();
            let mut probs = Vec::new();
            match &head {
                Some(h) => {
                    for lh in &g.loc_hidden {
                        let o = h.predict(&g.visual_hidden, lh, top_k)?;
                        segments.push(o.segments);
                        probs.push(o.probs);
                    }
                }
                None => {
                    if let Some(s) = parse_timestamps(&text, streams[b].n_t) {
                        segments.push(vec![s]);
                    }
                }
            }
            out.push(Prediction {
                loc_count: g.tokens.iter().filter(|&&t| t == loc_id).count(),
                text,
                tokens: g.tokens,
                segments,
                probs,
                truncated: g.truncated,
            });
        }
        Ok(out)
    }

    /// Writes `config.json`, `tokenizer.json` and `params/`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(&self.cfg)?).map_err(|e| Error::io(&path, e))?;
        self.tokenizer.save(&dir.join("tokenizer.json"))?;
        save_params(&self.store, &dir.join("params"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("config.json");
        if !path.exists() {
            return Err(Error::Data(format!("no model checkpoint at {}", dir.display())));
        }
        let s = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let cfg: ModelConfig = serde_json::from_str(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let tokenizer = Tokenizer::load(&dir.join("tokenizer.json"))?;
        let store = load_params(&dir.join("params"), DType::F32)?;
        let backbone = Backbone::attach(&cfg.backbone, tokenizer.base_size(), &store)?;
        let m = Model {
            cfg,
            tokenizer,
            backbone,
            store,
        };
        m.head()?;
        Ok(m)
    }
}

/// First two integers of a `From <s> to <e>` answer as a frame segment,
/// clipped to `[0, n - 1]` and ordered.
pub fn parse_timestamps(text: &str, n: usize) -> Option<Segment> {
    let nums: Vec<f64> = text
        .split(|c: char| !c.is_ascii_digit())
        .filter(|s| !s.is_empty())
        .take(2)
        .filter_map(|s| s.parse::<f64>().ok())
        .collect();
    if nums.len() < 2 || n == 0 {
        return None;
    }
    let hi = (n - 1) as f64;
    let (a, b) = (nums[0].min(hi), nums[1].min(hi));
    Some(Segment::new(a.min(b), a.max(b)))
}

/// Tokenizer covering the given texts, the class phrases of the synthetic
/// generator and every frame index below `max_frames`.
pub fn build_tokenizer<'a>(texts: impl IntoIterator<Item = &'a str>, max_frames: usize) -> Tokenizer {
    let numbers: Vec<String> = (0..max_frames).map(|i| i.to_string()).collect();
    let mut all: Vec<&str> = texts.into_iter().collect();
    all.extend(crate::data::CLASS_PHRASES);
    all.extend(numbers.iter().map(String::as_str));
    Tokenizer::from_corpus(all)
}

pub(crate) fn zeros_scalar(dtype: DType) -> Result<Tensor> {
    Ok(Tensor::zeros((), dtype, &Device::Cpu)?)
}

pub(crate) fn check_feat_dim(cfg: &ModelConfig, feat_dim: usize) -> Result<()> {
    if cfg.backbone.feat_dim != feat_dim {
        return Err(invalid!(
            "features have width {feat_dim} but the model expects {}",
            cfg.backbone.feat_dim
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestamps_parse() {
        assert_eq!(parse_timestamps("From 12 to 40 .", 100), Some(Segment::new(12.0, 40.0)));
        assert_eq!(parse_timestamps("From 50 to 7 .", 100), Some(Segment::new(7.0, 50.0)));
        assert_eq!(parse_timestamps("From 120 to 300", 100), Some(Segment::new(99.0, 99.0)));
        assert_eq!(parse_timestamps("During <LOC> .", 100), None);
    }
}
