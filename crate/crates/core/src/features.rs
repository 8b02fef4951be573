//! Per-frame visual features: class token, patch tokens and CLS→patch
//! attention.
//!
//! Real encoders plug in through the feature container (see
//! [`save_features`]); [`encode_synthetic`] is a deterministic toy encoder
//! whose event signal has a known signal-to-noise ratio.
//!
//! Container layout: one line of compact JSON
//! `{"n":..,"p":..,"feat_dim":..,"dtype":"f32","byte_order":"little"}`
//! terminated by `\n`, then the raw little-endian `f32` arrays `cls`
//! (`n × feat_dim`), `patches` (`n × p × feat_dim`) and `attn` (`n × p`).

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::{Error, Result, Segment};

/// Softmax temperature of the toy CLS attention.
pub const ATTN_TEMPERATURE: f64 = 0.02;
/// Magnitude of the background signature in background patches.
pub const BACKGROUND_SCALE: f32 = 0.5;
/// Magnitude of the per-position texture added to every patch.
pub const TEXTURE_SCALE: f32 = 0.25;
/// Magnitude of the constant offset the fixed CLS projection adds.
pub const CLS_OFFSET_SCALE: f32 = 0.5;
const BASIS_SEED: u64 = 0x0b5e_55ed_c1a5_5e5;
const ATTN_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatureSet {
    /// `[n, feat_dim]`
    pub cls: Array2<f32>,
    /// `[n, p, feat_dim]`
    pub patches: Array3<f32>,
    /// `[n, p]`, rows non-negative and summing to one.
    pub attn: Array2<f32>,
}

impl FrameFeatureSet {
    pub fn new(cls: Array2<f32>, patches: Array3<f32>, attn: Array2<f32>) -> Result<Self> {
        let f = FrameFeatureSet {
            cls,
            patches,
            attn,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn n(&self) -> usize {
        self.cls.nrows()
    }

    pub fn p(&self) -> usize {
        self.attn.ncols()
    }

    pub fn feat_dim(&self) -> usize {
        self.cls.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = self.cls.dim();
        let (pn, p, pd) = self.patches.dim();
        let (an, ap) = self.attn.dim();
        if n == 0 || p == 0 {
            return Err(Error::Shape(format!("need n >= 1 and p >= 1, got n={n} p={p}")));
        }
        if pn != n || an != n {
            return Err(Error::Shape(format!(
                "frame counts disagree: cls {n}, patches {pn}, attn {an}"
            )));
        }
        if pd != d {
            return Err(Error::Shape(format!(
                "feature widths disagree: cls {d}, patches {pd}"
            )));
        }
        if ap != p {
            return Err(Error::Shape(format!("attn has {ap} columns, patches have {p}")));
        }
        for (i, row) in self.attn.outer_iter().enumerate() {
            if row.iter().any(|&a| !(a >= 0.0)) {
                return Err(Error::Data(format!("attn not normalized: row {i} has a negative or NaN entry")));
            }
            let s: f64 = row.iter().map(|&a| a as f64).sum();
            if (s - 1.0).abs() > ATTN_TOL {
                return Err(Error::Data(format!("attn not normalized: row {i} sums to {s}")));
            }
        }
        Ok(())
    }

    /// Reorders frames: output frame `i` is input frame `order[i]`.
    pub fn permute_frames(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.n() {
            return Err(invalid!("permutation has {} entries for {} frames", order.len(), self.n()));
        }
        Ok(FrameFeatureSet {
            cls: self.cls.select(Axis(0), order),
            patches: self.patches.select(Axis(0), order),
            attn: self.attn.select(Axis(0), order),
        })
    }

    /// All-zero frames with uniform attention; the "missing video" input.
    pub fn blank(n: usize, p: usize, feat_dim: usize) -> Self {
        FrameFeatureSet {
            cls: Array2::zeros((n, feat_dim)),
            patches: Array3::zeros((n, p, feat_dim)),
            attn: Array2::from_elem((n, p), 1.0 / p as f32),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub segment: Segment,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVideoSpec {
    pub n_frames: usize,
    /// `(rows, cols)`; `p = rows * cols`.
    pub grid: (usize, usize),
    pub feat_dim: usize,
    pub events: Vec<EventSpec>,
    pub background_class: usize,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl SyntheticVideoSpec {
    pub fn p(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_frames == 0 || self.p() == 0 {
            return Err(invalid!("synthetic video needs at least one frame and one patch"));
        }
        let max_class = self.feat_dim.saturating_sub(1);
        for (i, ev) in self.events.iter().enumerate() {
            let s = ev.segment;
            if !s.is_valid() || s.start < 0.0 || s.end > (self.n_frames - 1) as f64 {
                return Err(invalid!(
                    "event {i} segment [{}, {}] outside [0, {}] or degenerate",
                    s.start,
                    s.end,
                    self.n_frames - 1
                ));
            }
            if ev.class_id >= max_class {
                return Err(invalid!("event {i} class {} needs feat_dim > {}", ev.class_id, ev.class_id + 1));
            }
        }
        if self.background_class >= max_class {
            return Err(invalid!("background class {} too large for feat_dim {}", self.background_class, self.feat_dim));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(invalid!("noise_sigma must be non-negative"));
        }
        Ok(())
    }

    /// Per-frame `(class, event index)`; `None` for background frames.
    pub fn frame_labels(&self) -> Result<Vec<Option<(usize, usize)>>> {
        let mut labels: Vec<Option<(usize, usize)>> = vec![None; self.n_frames];
        for (e, ev) in self.events.iter().enumerate() {
            for (i, slot) in labels.iter_mut().enumerate() {
                let t = i as f64;
                if t < ev.segment.start || t > ev.segment.end {
                    continue;
                }
                match *slot {
                    Some((c, _)) if c != ev.class_id => {
                        return Err(invalid!(
                            "events overlap at frame {i} with conflicting classes {c} and {}",
                            ev.class_id
                        ));
                    }
                    Some(_) => {}
                    None => *slot = Some((ev.class_id, e)),
                }
            }
        }
        Ok(labels)
    }
}

/// Fixed orthonormal basis (rows) shared by every synthetic video. Row `c` is
/// the signature of class `c`; the last row carries the CLS offset.
pub fn class_basis(feat_dim: usize) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(BASIS_SEED);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(feat_dim);
    while rows.len() < feat_dim {
        let mut v: Vec<f64> = (0..feat_dim).map(|_| rng.sample(StandardNormal)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        rows.push(v);
    }
    Array2::from_shape_fn((feat_dim, feat_dim), |(i, j)| rows[i][j] as f32)
}

/// The fixed affine map applied to the attention-pooled patch vector:
/// `cls = Σ_j attn_j · patch_j + cls_offset`.
pub fn cls_offset(feat_dim: usize) -> Array2<f32> {
    let basis = class_basis(feat_dim);
    let row = basis.row(feat_dim - 1).mapv(|x| x * CLS_OFFSET_SCALE);
    row.insert_axis(Axis(0))
}

fn event_block(seed: u64, event: usize, p: usize) -> std::ops::Range<usize> {
    let len = (p / 4).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(event as u64 + 1)));
    let start = rng.random_range(0..=(p - len));
    start..start + len
}

/// Toy encoder. Frames inside an event carry the class signature (scale 1.0)
/// in a contiguous patch block; other patches carry the background signature
/// at [`BACKGROUND_SCALE`]. Every patch gets a fixed per-position texture and
/// i.i.d. Gaussian noise. Attention is a softmax of patch similarity to the
/// frame's mean patch, and the class token is the attention-pooled patch plus
/// the fixed [`cls_offset`].
pub fn encode_synthetic(spec: &SyntheticVideoSpec) -> Result<FrameFeatureSet> {
    spec.validate()?;
    let labels = spec.frame_labels()?;
    let (n, p, d) = (spec.n_frames, spec.p(), spec.feat_dim);
    let basis = class_basis(d);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let texture: Vec<Vec<f32>> = (0..p)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|a| (a / norm) as f32 * TEXTURE_SCALE).collect()
        })
        .collect();
    let blocks: Vec<_> = (0..spec.events.len())
        .map(|e| event_block(spec.seed, e, p))
        .collect();

    let mut patches = Array3::<f32>::zeros((n, p, d));
    for i in 0..n {
        for j in 0..p {
            let (class, scale) = match labels[i] {
                Some((c, e)) if blocks[e].contains(&j) => (c, 1.0f32),
                _ => (spec.background_class, BACKGROUND_SCALE),
            };
            let sig = basis.row(class);
            for k in 0..d {
                let noise: f32 = if spec.noise_sigma > 0.0 {
                    spec.noise_sigma * rng.sample::<f32, _>(StandardNormal)
                } else {
                    0.0
                };
                patches[[i, j, k]] = scale * sig[k] + texture[j][k] + noise;
            }
        }
    }

    let offset = cls_offset(d);
    let mut attn = Array2::<f32>::zeros((n, p));
    let mut cls = Array2::<f32>::zeros((n, d));
    for i in 0..n {
        let frame = patches.index_axis(Axis(0), i);
        let mean: Vec<f64> = (0..d)
            .map(|k| frame.column(k).iter().map(|&x| x as f64).sum::<f64>() / p as f64)
            .collect();
        let logits: Vec<f64> = frame
            .outer_iter()
            .map(|row| dot64(row, &mean) / ATTN_TEMPERATURE)
            .collect();
        let row = normalized_f32_softmax(&logits);
        for (j, a) in row.iter().enumerate() {
            attn[[i, j]] = *a;
        }
        for k in 0..d {
            let pooled: f64 = (0..p).map(|j| row[j] as f64 * frame[[j, k]] as f64).sum();
            cls[[i, k]] = (pooled + offset[[0, k]] as f64) as f32;
        }
    }
    FrameFeatureSet::new(cls, patches, attn)
}

fn dot64(a: ArrayView1<f32>, b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y).sum()
}

/// Softmax rounded to f32 with the rounding residue folded into the largest
/// entry, so the f64 sum of the stored values is 1 to within one ulp.
fn normalized_f32_softmax(logits: &[f64]) -> Vec<f32> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut out: Vec<f32> = exps.iter().map(|e| (e / total) as f32).collect();
    let (arg, _) = out
        .iter()
        .enumerate()
        .fold((0, f32::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let rest: f64 = out
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != arg)
        .map(|(_, &v)| v as f64)
        .sum();
    out[arg] = (1.0 - rest) as f32;
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct ContainerHeader {
    n: usize,
    p: usize,
    feat_dim: usize,
    dtype: String,
    byte_order: String,
}

pub fn save_features(f: &FrameFeatureSet, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_features(f, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_features(f: &FrameFeatureSet, w: &mut impl Write) -> std::io::Result<()> {
    let header = ContainerHeader {
        n: f.n(),
        p: f.p(),
        feat_dim: f.feat_dim(),
        dtype: "f32".into(),
        byte_order: "little".into(),
    };
    let line = serde_json::to_string(&header).map_err(std::io::Error::other)?;
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    write_f32s(w, f.cls.iter())?;
    write_f32s(w, f.patches.iter())?;
    write_f32s(w, f.attn.iter())?;
    Ok(())
}

fn write_f32s<'a>(w: &mut impl Write, it: impl Iterator<Item = &'a f32>) -> std::io::Result<()> {
    for v in it {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_features(path: &Path) -> Result<FrameFeatureSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: ContainerHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Data(format!("{}: bad feature header: {e}", path.display())))?;
    if header.dtype != "f32" || header.byte_order != "little" {
        return Err(Error::Data(format!(
            "{}: unsupported dtype/byte order {}/{}",
            path.display(),
            header.dtype,
            header.byte_order
        )));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Shape(format!("{}: payload is not a whole number of f32 values", path.display())));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let (n, p, d) = (header.n, header.p, header.feat_dim);
    let n_cls = n * d;
    let n_patch = n * p * d;
    let n_attn = n * p;
    if values.len() == n_cls + n_patch {
        return Err(Error::Data(format!("{}: missing attn block", path.display())));
    }
    if values.len() != n_cls + n_patch + n_attn {
        return Err(Error::Shape(format!(
            "{}: header promises {} values, found {}",
            path.display(),
            n_cls + n_patch + n_attn,
            values.len()
        )));
    }
    let cls = Array2::from_shape_vec((n, d), values[..n_cls].to_vec())
        .map_err(|e| Error::Shape(e.to_string()))?;
    let patches = Array3::from_shape_vec((n, p, d), values[n_cls..n_cls + n_patch].to_vec())
        .map_err(|e| Error::Shape(e.to_string()))?;
    let attn = Array2::from_shape_vec((n, p), values[n_cls + n_patch..].to_vec())
        .map_err(|e| Error::Shape(e.to_string()))?;
    FrameFeatureSet::new(cls, patches, attn)
}
