use candle_core::{DType, Device, Tensor, D};

use super::tokenizer::EOS;
use super::{BackboneConfig, Proj, Role};
use crate::error::invalid;
use crate::nn::{self, frozen_matmul, Init, Linear, ParamStore};
use crate::{Error, Result};

/// Low-rank update `x @ a @ b * scale` with `a: [in, r]`, `b: [r, out]`.
#[derive(Debug, Clone)]
pub struct Lora {
    pub a: Tensor,
    pub b: Tensor,
    pub scale: f64,
}

impl Lora {
    pub fn from_store(store: &ParamStore, prefix: &str, scale: f64) -> Result<Option<Self>> {
        let Some(a) = store.param(&format!("{prefix}.a")) else {
            return Ok(None);
        };
        Ok(Some(Lora {
            a: a.tensor().clone(),
            b: store.get(&format!("{prefix}.b"))?,
            scale,
        }))
    }

    pub fn delta(&self, x: &Tensor) -> Result<Tensor> {
        Ok((x.broadcast_matmul(&self.a)?.broadcast_matmul(&self.b)? * self.scale)?)
    }
}

/// `y = W x + t_mask * ΔT x + s_mask * ΔS x`. The masks are `[.., rows, 1]`
/// indicator columns, so a row sees exactly one adapter and the other
/// contributes an exact zero.
pub fn dual_lora_linear(
    x: &Tensor,
    base: &Linear,
    temporal: Option<&Lora>,
    spatial: Option<&Lora>,
    t_mask: &Tensor,
    s_mask: &Tensor,
) -> Result<Tensor> {
    let mut y = base.forward(x)?;
    if let Some(l) = temporal {
        y = (y + l.delta(x)?.broadcast_mul(t_mask)?)?;
    }
    if let Some(l) = spatial {
        y = (y + l.delta(x)?.broadcast_mul(s_mask)?)?;
    }
    Ok(y)
}

/// Visual tokens already mapped to model width plus the text ids that follow
/// them. Rows are ordered T-tokens, S-tokens, text.
#[derive(Debug, Clone)]
pub struct TokenStream {
    pub visual: Tensor,
    pub n_t: usize,
    pub n_s: usize,
    pub text: Vec<u32>,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.n_t + self.n_s + self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn roles(&self, loc_id: u32) -> Vec<Role> {
        let mut r = vec![Role::T; self.n_t];
        r.extend(std::iter::repeat_n(Role::S, self.n_s));
        r.extend(self.text.iter().map(|&t| if t == loc_id { Role::Loc } else { Role::Text }));
        r
    }

    pub fn with_text(&self, text: Vec<u32>) -> TokenStream {
        TokenStream {
            text,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub tokens: Vec<u32>,
    /// Final-layer hidden state at each emitted `<LOC>`, in emission order.
    pub loc_hidden: Vec<Tensor>,
    pub truncated: bool,
    /// Final-layer states of the T-token rows `[n_t, d]`.
    pub visual_hidden: Tensor,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub base_vocab: usize,
    emb_t: Tensor,
}

impl Backbone {
    /// Registers all backbone parameters and returns the model.
    pub fn init(cfg: &BackboneConfig, base_vocab: usize, store: &mut ParamStore, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut init = Init::new(cfg.seed, dtype);
        let mut lora_init = Init::new(cfg.seed ^ 0x5eed_10a4, dtype);
        store.insert("embed.tok", init.normal(&[base_vocab, d], cfg.embed_std)?, false)?;
        let loc = store.get("embed.tok")?.mean_keepdim(0)?;
        store.insert("embed.loc", loc, true)?;
        store.insert("embed.pos", init.normal(&[cfg.context, d], 0.1)?, false)?;
        nn::register_linear(
            store,
            &mut init,
            "visual",
            (cfg.feat_dim, d),
            1.0 / (cfg.feat_dim as f64).sqrt(),
            true,
            cfg.train_visual_adapter,
        )?;
        let resid = 1.0 / (2.0 * cfg.layers as f64).sqrt();
        let (rt, rs) = (cfg.adapter.temporal_rank(), cfg.adapter.spatial_rank());
        for l in 0..cfg.layers {
            let p = format!("layers.{l}");
            for ln in ["ln1", "ln2"] {
                store.insert(format!("{p}.{ln}.g"), init.ones(&[d])?, false)?;
                store.insert(format!("{p}.{ln}.b"), init.zeros(&[d])?, false)?;
            }
            for proj in [Proj::Q, Proj::K, Proj::V, Proj::O, Proj::MlpUp, Proj::MlpDown] {
                let (fan_in, fan_out) = proj_shape(cfg, proj);
                let mut std = 1.0 / (fan_in as f64).sqrt();
                if matches!(proj, Proj::O | Proj::MlpDown) {
                    std *= resid;
                }
                let name = format!("{p}.{}", proj.name());
                nn::register_linear(store, &mut init, &name, (fan_in, fan_out), std, true, false)?;
                if cfg.adapter.projections.contains(&proj) {
                    for (tag, r) in [("lora_t", rt), ("lora_s", rs)] {
                        if r == 0 {
                            continue;
                        }
                        let a = lora_init.normal(&[fan_in, r], 1.0 / (fan_in as f64).sqrt())?;
                        store.insert(format!("{name}.{tag}.a"), a, true)?;
                        store.insert(format!("{name}.{tag}.b"), lora_init.zeros(&[r, fan_out])?, true)?;
                    }
                }
            }
        }
        store.insert("ln_f.g", init.ones(&[d])?, false)?;
        store.insert("ln_f.b", init.zeros(&[d])?, false)?;
        Self::attach(cfg, base_vocab, store)
    }

    /// Wraps parameters that already live in `store` (e.g. after loading).
    pub fn attach(cfg: &BackboneConfig, base_vocab: usize, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let emb = store.get("embed.tok")?;
        if emb.dims() != [base_vocab, cfg.d_model] {
            return Err(Error::Shape(format!(
                "token embedding is {:?}, expected [{base_vocab}, {}]",
                emb.dims(),
                cfg.d_model
            )));
        }
        Ok(Backbone {
            cfg: cfg.clone(),
            base_vocab,
            emb_t: emb.t()?.contiguous()?,
        })
    }

    pub fn loc_id(&self) -> u32 {
        self.base_vocab as u32
    }

    pub fn vocab_size(&self) -> usize {
        self.base_vocab + 1
    }

    pub fn dtype(&self) -> DType {
        self.emb_t.dtype()
    }

    /// Applies the visual adapter to T-tokens `[n, feat]` and S-tokens
    /// `[m, feat]`, returning `[(n + m), d]`.
    pub fn project_visual(&self, store: &ParamStore, t: &Tensor, s: &Tensor) -> Result<Tensor> {
        if t.dim(1)? != self.cfg.feat_dim || s.dim(1)? != self.cfg.feat_dim {
            return Err(Error::Shape(format!(
                "visual width {} / {} but adapter expects {}",
                t.dim(1)?,
                s.dim(1)?,
                self.cfg.feat_dim
            )));
        }
        let lin = Linear::from_store(store, "visual", true)?;
        let x = Tensor::cat(&[t, s], 0)?.to_dtype(self.dtype())?;
        lin.forward(&x)
    }

    pub fn stream(&self, store: &ParamStore, t: &Tensor, s: &Tensor, text: Vec<u32>) -> Result<TokenStream> {
        Ok(TokenStream {
            visual: self.project_visual(store, t, s)?,
            n_t: t.dim(0)?,
            n_s: s.dim(0)?,
            text,
        })
    }

    pub fn embed_text(&self, store: &ParamStore, ids: &[u32]) -> Result<Tensor> {
        let d = self.cfg.d_model;
        if ids.is_empty() {
            return Ok(Tensor::zeros((0, d), self.dtype(), &Device::Cpu)?);
        }
        let loc_id = self.loc_id();
        if let Some(&bad) = ids.iter().find(|&&i| i > loc_id) {
            return Err(invalid!("token id {bad} outside vocabulary of {}", self.vocab_size()));
        }
        let idx: Vec<u32> = ids.iter().map(|&i| if i == loc_id { 0 } else { i }).collect();
        let idx = Tensor::from_vec(idx, ids.len(), &Device::Cpu)?;
        let base = store.get("embed.tok")?.index_select(&idx, 0)?;
        if !ids.contains(&loc_id) {
            return Ok(base);
        }
        let m: Vec<f64> = ids.iter().map(|&i| if i == loc_id { 1.0 } else { 0.0 }).collect();
        let m = Tensor::from_vec(m, (ids.len(), 1), &Device::Cpu)?.to_dtype(self.dtype())?;
        let keep = (1.0 - &m)?;
        let loc = store.get("embed.loc")?;
        Ok((base.broadcast_mul(&keep)? + loc.broadcast_mul(&m)?)?)
    }

    /// Final-layer hidden states `[B, L_max, d]` for right-padded streams.
    pub fn forward(&self, store: &ParamStore, streams: &[TokenStream]) -> Result<Tensor> {
        if streams.is_empty() {
            return Err(invalid!("empty batch"));
        }
        let l_max = streams.iter().map(|s| s.len()).max().unwrap_or(0);
        if l_max > self.cfg.context {
            return Err(invalid!("stream of {l_max} tokens exceeds context {}", self.cfg.context));
        }
        let dtype = self.dtype();
        let pos = store.get("embed.pos")?;
        let mut rows = Vec::with_capacity(streams.len());
        let mut t_mask = Vec::with_capacity(streams.len() * l_max);
        for s in streams {
            let text = self.embed_text(store, &s.text)?;
            let x = Tensor::cat(&[&s.visual, &text], 0)?;
            let x = (x + pos.narrow(0, 0, s.len())?)?;
            rows.push(x.pad_with_zeros(0, 0, l_max - s.len())?);
            t_mask.extend((0..l_max).map(|i| if i < s.n_t { 1.0f64 } else { 0.0 }));
        }
        let x = Tensor::stack(&rows, 0)?;
        let t_mask = Tensor::from_vec(t_mask, (streams.len(), l_max, 1), &Device::Cpu)?.to_dtype(dtype)?;
        let causal = causal_mask(l_max, dtype)?;
        Ok(self.run(store, x, &t_mask, None, Some(&causal))?.0)
    }

    /// Runs all blocks. With `past`, the rows of `x` continue cached
    /// sequences and attend to every cached position.
    fn run(
        &self,
        store: &ParamStore,
        mut x: Tensor,
        t_mask: &Tensor,
        past: Option<&[(Tensor, Tensor)]>,
        mask: Option<&Tensor>,
    ) -> Result<(Tensor, Vec<(Tensor, Tensor)>)> {
        let s_mask = (1.0 - t_mask)?;
        let mut kv = Vec::with_capacity(self.cfg.layers);
        for l in 0..self.cfg.layers {
            let (y, k, v) = self.block(store, l, &x, t_mask, &s_mask, mask, past.map(|p| &p[l]))?;
            x = y;
            kv.push((k, v));
        }
        let h = nn::layer_norm(&x, &store.get("ln_f.g")?, &store.get("ln_f.b")?, self.cfg.ln_eps)?;
        Ok((h, kv))
    }

    fn proj(&self, store: &ParamStore, layer: usize, proj: Proj, x: &Tensor, t_mask: &Tensor, s_mask: &Tensor) -> Result<Tensor> {
        let name = format!("layers.{layer}.{}", proj.name());
        let base = Linear::from_store(store, &name, true)?;
        let a = &self.cfg.adapter;
        let (rt, rs) = (a.temporal_rank().max(1), a.spatial_rank().max(1));
        let lt = Lora::from_store(store, &format!("{name}.lora_t"), a.lora_alpha / rt as f64)?;
        let ls = Lora::from_store(store, &format!("{name}.lora_s"), a.lora_alpha / rs as f64)?;
        dual_lora_linear(x, &base, lt.as_ref(), ls.as_ref(), t_mask, s_mask)
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        store: &ParamStore,
        l: usize,
        x: &Tensor,
        t_mask: &Tensor,
        s_mask: &Tensor,
        mask: Option<&Tensor>,
        past: Option<&(Tensor, Tensor)>,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let p = format!("layers.{l}");
        let eps = self.cfg.ln_eps;
        let (b, len, d) = x.dims3()?;
        let h = self.cfg.heads;
        let dh = d / h;
        let xn = nn::layer_norm(x, &store.get(&format!("{p}.ln1.g"))?, &store.get(&format!("{p}.ln1.b"))?, eps)?;
        let split = |t: Tensor| -> Result<Tensor> { Ok(t.reshape((b, len, h, dh))?.transpose(1, 2)?.contiguous()?) };
        let q = split(self.proj(store, l, Proj::Q, &xn, t_mask, s_mask)?)?;
        let mut k = split(self.proj(store, l, Proj::K, &xn, t_mask, s_mask)?)?;
        let mut v = split(self.proj(store, l, Proj::V, &xn, t_mask, s_mask)?)?;
        if let Some((pk, pv)) = past {
            k = Tensor::cat(&[pk, &k], 2)?;
            v = Tensor::cat(&[pv, &v], 2)?;
        }
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let probs = nn::softmax_last(&scores)?;
        let att = probs.matmul(&v)?.transpose(1, 2)?.reshape((b, len, d))?;
        let x = (x + self.proj(store, l, Proj::O, &att, t_mask, s_mask)?)?;
        let xn = nn::layer_norm(&x, &store.get(&format!("{p}.ln2.g"))?, &store.get(&format!("{p}.ln2.b"))?, eps)?;
        let up = nn::gelu(&self.proj(store, l, Proj::MlpUp, &xn, t_mask, s_mask)?)?;
        let down = self.proj(store, l, Proj::MlpDown, &up, t_mask, s_mask)?;
        Ok(((x + down)?, k, v))
    }

    /// Logits over base vocabulary plus `<LOC>` for hidden rows `[.., d]`.
    pub fn logits(&self, store: &ParamStore, hidden: &Tensor) -> Result<Tensor> {
        let base = frozen_matmul(hidden, &self.emb_t)?;
        let loc = store.get("embed.loc")?;
        let l = hidden.broadcast_matmul(&loc.t()?)?;
        Ok(Tensor::cat(&[&base, &l], D::Minus1)?)
    }

    /// Hidden states `[L, d]` of one stream plus its key/value cache.
    pub fn prefill(&self, store: &ParamStore, stream: &TokenStream) -> Result<(Tensor, KvCache)> {
        let len = stream.len();
        if len > self.cfg.context {
            return Err(invalid!("stream of {len} tokens exceeds context {}", self.cfg.context));
        }
        let dtype = self.dtype();
        let text = self.embed_text(store, &stream.text)?;
        let x = (Tensor::cat(&[&stream.visual, &text], 0)? + store.get("embed.pos")?.narrow(0, 0, len)?)?;
        let t: Vec<f64> = (0..len).map(|i| if i < stream.n_t { 1.0 } else { 0.0 }).collect();
        let t_mask = Tensor::from_vec(t, (1, len, 1), &Device::Cpu)?.to_dtype(dtype)?;
        let causal = causal_mask(len, dtype)?;
        let (h, layers) = self.run(store, x.unsqueeze(0)?, &t_mask, None, Some(&causal))?;
        Ok((h.squeeze(0)?, KvCache { layers, len }))
    }

    /// Appends one text token to a cached stream and returns its hidden
    /// state `[d]`.
    pub fn extend(&self, store: &ParamStore, cache: &mut KvCache, token: u32) -> Result<Tensor> {
        if cache.len >= self.cfg.context {
            return Err(invalid!("stream exceeds context {}", self.cfg.context));
        }
        let x = (self.embed_text(store, &[token])? + store.get("embed.pos")?.narrow(0, cache.len, 1)?)?;
        let t_mask = Tensor::zeros((1, 1, 1), self.dtype(), &Device::Cpu)?;
        let (h, layers) = self.run(store, x.unsqueeze(0)?, &t_mask, Some(&cache.layers), None)?;
        cache.layers = layers;
        cache.len += 1;
        Ok(h.squeeze(0)?.squeeze(0)?)
    }

    /// Greedy decoding, or forced decoding when `forced` supplies the
    /// continuation per stream. Stops at `<eos>` (not returned), at
    /// `max_len` generated tokens or at the context limit; the latter two
    /// set `truncated`.
    pub fn generate(
        &self,
        store: &ParamStore,
        streams: &[TokenStream],
        max_len: usize,
        forced: Option<&[Vec<u32>]>,
    ) -> Result<Vec<Generation>> {
        let loc_id = self.loc_id();
        let mut out = Vec::with_capacity(streams.len());
        for (i, s) in streams.iter().enumerate() {
            let (h, mut cache) = self.prefill(store, s)?;
            let mut g = Generation {
                tokens: Vec::new(),
                loc_hidden: Vec::new(),
                truncated: false,
                visual_hidden: h.narrow(0, 0, s.n_t)?,
            };
            let mut last = h.get(s.len() - 1)?;
            loop {
                if g.tokens.len() >= max_len || cache.len >= self.cfg.context {
                    g.truncated = true;
                    break;
                }
                let next = match forced {
                    Some(f) => f[i].get(g.tokens.len()).copied().unwrap_or(EOS),
                    None => argmax(&nn::to_vec_f64(&self.logits(store, &last.unsqueeze(0)?)?)?) as u32,
                };
                if next == EOS {
                    break;
                }
                g.tokens.push(next);
                last = self.extend(store, &mut cache, next)?;
                if next == loc_id {
                    g.loc_hidden.push(last.detach());
                }
            }
            out.push(g);
        }
        Ok(out)
    }
}

/// Per-layer keys and values `[1, heads, len, d_head]` of one stream.
#[derive(Debug, Clone)]
pub struct KvCache {
    layers: Vec<(Tensor, Tensor)>,
    pub len: usize,
}

fn proj_shape(cfg: &BackboneConfig, proj: Proj) -> (usize, usize) {
    let d = cfg.d_model;
    match proj {
        Proj::MlpUp => (d, cfg.mlp_hidden),
        Proj::MlpDown => (cfg.mlp_hidden, d),
        _ => (d, d),
    }
}

fn causal_mask(len: usize, dtype: DType) -> Result<Tensor> {
    let v: Vec<f64> = (0..len * len)
        .map(|k| if k % len > k / len { -1e9 } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(v, (len, len), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Index of the largest value; ties go to the lower index.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
