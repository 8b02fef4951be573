//! Spatial compression of patch tokens into S-tokens.
//!
//! The video is split into `u` groups of pictures (GOPs), each anchored by an
//! IDR frame. Within a GOP the IDR frame's most attended patches become key
//! tokens, a strided sample of the rest become context tokens, every patch of
//! the GOP joins the group of its most similar selected token, temporally
//! repeated patches are dropped and each group is averaged into one S-token.
//!
//! Static removal is anchored at the IDR frame: a P-frame token after the IDR
//! is dropped when its label equals the token one frame closer to the IDR,
//! and likewise for frames before the IDR. IDR tokens are never dropped, so a
//! GOP of identical frames collapses to exactly its `w` selected groups.

use std::ops::Range;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::features::FrameFeatureSet;
use crate::{Exec, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressParams {
    pub u: usize,
    pub k: usize,
    pub c: usize,
    pub tau: f64,
}

impl Default for CompressParams {
    fn default() -> Self {
        CompressParams {
            u: 4,
            k: 48,
            c: 16,
            tau: 0.8,
        }
    }
}

impl CompressParams {
    pub fn w(&self) -> usize {
        self.k + self.c
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.u < 1 || self.k < 1 {
            return Err(invalid!("compression needs u >= 1 and k >= 1 (u={}, k={})", self.u, self.k));
        }
        if self.k + self.c > p {
            return Err(invalid!("k + c = {} exceeds {} patches per frame", self.k + self.c, p));
        }
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(invalid!("tau must lie in [-1, 1], got {}", self.tau));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gop {
    pub idr: usize,
    pub members: Range<usize>,
    pub key_ids: Vec<usize>,
    pub context_ids: Vec<usize>,
    /// Group id per `(frame - members.start) * p + patch`.
    pub groups: Vec<usize>,
}

impl Gop {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn n_groups(&self) -> usize {
        self.key_ids.len() + self.context_ids.len()
    }
}

/// Per-GOP labels, laid out frame-major over the GOP's members.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMap {
    pub start: usize,
    pub p: usize,
    pub labels: Vec<usize>,
    pub n_groups: usize,
}

impl GroupMap {
    pub fn label(&self, frame: usize, patch: usize) -> usize {
        self.labels[(frame - self.start) * self.p + patch]
    }

    pub fn frames(&self) -> usize {
        self.labels.len() / self.p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GopTrace {
    pub idr: usize,
    pub start: usize,
    pub end: usize,
    pub kept: usize,
    pub removed: usize,
    /// Non-empty groups, i.e. S-tokens contributed by this GOP.
    pub groups: usize,
    /// `(frame, patch)` members behind each S-token of this GOP.
    #[serde(skip)]
    pub members: Vec<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressTrace {
    pub per_gop: Vec<GopTrace>,
}

impl CompressTrace {
    pub fn m(&self) -> usize {
        self.per_gop.iter().map(|g| g.groups).sum()
    }
}

pub fn cosine(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

pub fn idr_positions(n: usize, u: usize) -> Vec<usize> {
    (0..u).map(|g| (2 * g + 1) * n / (2 * u)).collect()
}

/// Splits the frames into `u` contiguous GOPs. IDR frames sit at the centres
/// of a uniform split; GOPs then grow outward one frame per round, in GOP
/// order and left before right, while the candidate's class token has cosine
/// at least `tau` to the IDR's and is unclaimed. Frames left over join the
/// GOP whose IDR is nearest by index (ties to the earlier GOP).
pub fn partition_gops(f: &FrameFeatureSet, params: &CompressParams) -> Result<Vec<Gop>> {
    params.validate(f.p())?;
    let n = f.n();
    if params.u > n {
        return Err(invalid!("u = {} exceeds the {} frames of the video", params.u, n));
    }
    let idrs = idr_positions(n, params.u);
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut bounds: Vec<(usize, usize)> = idrs.iter().map(|&i| (i, i)).collect();
    for (g, &i) in idrs.iter().enumerate() {
        owner[i] = Some(g);
    }
    let mut open: Vec<[bool; 2]> = vec![[true, true]; params.u];
    let similar = |idr: usize, j: usize| cosine(f.cls.row(idr), f.cls.row(j)) >= params.tau;
    while open.iter().any(|o| o[0] || o[1]) {
        for g in 0..params.u {
            if open[g][0] {
                let (lo, _) = bounds[g];
                if lo > 0 && owner[lo - 1].is_none() && similar(idrs[g], lo - 1) {
                    owner[lo - 1] = Some(g);
                    bounds[g].0 = lo - 1;
                } else {
                    open[g][0] = false;
                }
            }
            if open[g][1] {
                let (_, hi) = bounds[g];
                if hi + 1 < n && owner[hi + 1].is_none() && similar(idrs[g], hi + 1) {
                    owner[hi + 1] = Some(g);
                    bounds[g].1 = hi + 1;
                } else {
                    open[g][1] = false;
                }
            }
        }
    }
    for (j, slot) in owner.iter_mut().enumerate() {
        if slot.is_none() {
            let g = (0..params.u)
                .min_by_key(|&g| (idrs[g].abs_diff(j), g))
                .expect("u >= 1");
            *slot = Some(g);
        }
    }
    let mut gops = Vec::with_capacity(params.u);
    for (g, &idr) in idrs.iter().enumerate() {
        let frames: Vec<usize> = (0..n).filter(|&j| owner[j] == Some(g)).collect();
        let start = frames[0];
        let end = frames[frames.len() - 1] + 1;
        debug_assert_eq!(frames.len(), end - start, "GOP {g} is not contiguous");
        gops.push(Gop {
            idr,
            members: start..end,
            key_ids: Vec::new(),
            context_ids: Vec::new(),
            groups: Vec::new(),
        });
    }
    Ok(gops)
}

/// Top-`k` IDR patches by attention (ties to the lower index) and `c`
/// context patches at stride `r / c` over the remaining `r` patches.
pub fn select_key_tokens(
    f: &FrameFeatureSet,
    gop: &Gop,
    params: &CompressParams,
) -> Result<(Vec<usize>, Vec<usize>)> {
    params.validate(f.p())?;
    let row = f.attn.row(gop.idr);
    let mut order: Vec<usize> = (0..f.p()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let key_ids: Vec<usize> = order[..params.k].to_vec();
    let mut rest: Vec<usize> = order[params.k..].to_vec();
    rest.sort_unstable();
    let r = rest.len();
    let context_ids = (0..params.c).map(|j| rest[j * r / params.c]).collect();
    Ok((key_ids, context_ids))
}

/// Labels every patch of the GOP with the selected token (keys first, then
/// context) of highest cosine similarity; ties go to the lower group id.
pub fn assign_groups(
    f: &FrameFeatureSet,
    gop: &Gop,
    key_ids: &[usize],
    context_ids: &[usize],
) -> GroupMap {
    let p = f.p();
    let idr = f.patches.index_axis(Axis(0), gop.idr);
    let selected: Vec<_> = key_ids
        .iter()
        .chain(context_ids)
        .map(|&j| idr.row(j))
        .collect();
    let mut labels = Vec::with_capacity(gop.len() * p);
    for t in gop.members.clone() {
        let frame = f.patches.index_axis(Axis(0), t);
        for j in 0..p {
            let v = frame.row(j);
            let mut best = (0usize, f64::NEG_INFINITY);
            for (g, s) in selected.iter().enumerate() {
                let sim = cosine(v, s.view());
                if sim > best.1 {
                    best = (g, sim);
                }
            }
            labels.push(best.0);
        }
    }
    GroupMap {
        start: gop.members.start,
        p,
        labels,
        n_groups: selected.len(),
    }
}

/// Keep-mask over the GOP (same layout as the labels). A token is removed
/// when the token at the same patch one frame closer to the IDR carries the
/// same label.
pub fn remove_static(gop: &Gop, groups: &GroupMap) -> Vec<bool> {
    let p = groups.p;
    let mut keep = vec![true; groups.labels.len()];
    for t in gop.members.clone() {
        let toward = match t.cmp(&gop.idr) {
            std::cmp::Ordering::Equal => continue,
            std::cmp::Ordering::Greater => t - 1,
            std::cmp::Ordering::Less => t + 1,
        };
        for j in 0..p {
            if groups.label(t, j) == groups.label(toward, j) {
                keep[(t - groups.start) * p + j] = false;
            }
        }
    }
    keep
}

/// One mean vector per non-empty group, in group-id order, with the
/// `(frame, patch)` members behind each.
pub fn merge_tokens(
    f: &FrameFeatureSet,
    groups: &GroupMap,
    keep: &[bool],
) -> (Array2<f32>, Vec<Vec<(usize, usize)>>) {
    let d = f.feat_dim();
    let mut sums = vec![vec![0.0f64; d]; groups.n_groups];
    let mut members: Vec<Vec<(usize, usize)>> = vec![Vec::new(); groups.n_groups];
    for (idx, &g) in groups.labels.iter().enumerate() {
        if !keep[idx] {
            continue;
        }
        let (t, j) = (groups.start + idx / groups.p, idx % groups.p);
        for (s, &x) in sums[g].iter_mut().zip(f.patches.slice(ndarray::s![t, j, ..]).iter()) {
            *s += x as f64;
        }
        members[g].push((t, j));
    }
    let nonempty: Vec<usize> = (0..groups.n_groups).filter(|&g| !members[g].is_empty()).collect();
    let out = Array2::from_shape_fn((nonempty.len(), d), |(r, k)| {
        let g = nonempty[r];
        (sums[g][k] / members[g].len() as f64) as f32
    });
    let members = nonempty.into_iter().map(|g| std::mem::take(&mut members[g])).collect();
    (out, members)
}

/// Runs the whole pipeline. Returns the S-tokens `[m, feat_dim]` ordered by
/// (GOP, group id), the filled-in GOPs and the per-GOP trace.
pub fn compress(
    f: &FrameFeatureSet,
    params: &CompressParams,
    exec: Exec,
) -> Result<(Array2<f32>, CompressTrace)> {
    let (s, _, trace) = compress_detailed(f, params, exec)?;
    Ok((s, trace))
}

pub fn compress_detailed(
    f: &FrameFeatureSet,
    params: &CompressParams,
    exec: Exec,
) -> Result<(Array2<f32>, Vec<Gop>, CompressTrace)> {
    let gops = partition_gops(f, params)?;
    let per: Vec<(Array2<f32>, Gop, GopTrace)> = exec.try_map(&gops, |gop| {
        let (key_ids, context_ids) = select_key_tokens(f, gop, params)?;
        let groups = assign_groups(f, gop, &key_ids, &context_ids);
        let keep = remove_static(gop, &groups);
        let (tokens, members) = merge_tokens(f, &groups, &keep);
        let kept = keep.iter().filter(|&&k| k).count();
        let trace = GopTrace {
            idr: gop.idr,
            start: gop.members.start,
            end: gop.members.end - 1,
            kept,
            removed: keep.len() - kept,
            groups: tokens.nrows(),
            members,
        };
        let full = Gop {
            key_ids,
            context_ids,
            groups: groups.labels,
            ..gop.clone()
        };
        Ok::<_, crate::Error>((tokens, full, trace))
    })?;
    let d = f.feat_dim();
    let m: usize = per.iter().map(|(t, _, _)| t.nrows()).sum();
    let mut s = Array2::<f32>::zeros((m, d));
    let mut row = 0;
    let mut gops = Vec::with_capacity(per.len());
    let mut per_gop = Vec::with_capacity(per.len());
    for (tokens, gop, trace) in per {
        s.slice_mut(ndarray::s![row..row + tokens.nrows(), ..]).assign(&tokens);
        row += tokens.nrows();
        gops.push(gop);
        per_gop.push(trace);
    }
    Ok((s, gops, CompressTrace { per_gop }))
}

/// Wraps S-tokens in the feature container layout with one patch per token.
pub fn s_token_container(s: &Array2<f32>) -> Result<FrameFeatureSet> {
    let (m, d) = s.dim();
    if m == 0 {
        return Err(invalid!("no S-tokens to store"));
    }
    let patches = s.clone().into_shape_with_order((m, 1, d)).expect("contiguous");
    FrameFeatureSet::new(s.clone(), patches, Array2::ones((m, 1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_video(n: usize, p: usize, d: usize, seed: u64) -> FrameFeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patches = Array3::from_shape_fn((n, p, d), |_| rng.random_range(-1.0f32..1.0));
        let cls = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0f32..1.0));
        let attn = Array2::from_elem((n, p), 1.0 / p as f32);
        FrameFeatureSet::new(cls, patches, attn).unwrap()
    }

    fn params(u: usize, k: usize, c: usize, tau: f64) -> CompressParams {
        CompressParams { u, k, c, tau }
    }

    fn bare_gop(idr: usize, members: Range<usize>) -> Gop {
        Gop {
            idr,
            members,
            key_ids: vec![],
            context_ids: vec![],
            groups: vec![],
        }
    }

    #[test]
    fn uniform_split_when_tau_is_minus_one() {
        let f = random_video(100, 4, 8, 1);
        let gops = partition_gops(&f, &params(4, 1, 0, -1.0)).unwrap();
        let ranges: Vec<_> = gops.iter().map(|g| g.members.clone()).collect();
        assert_eq!(ranges, vec![0..25, 25..50, 50..75, 75..100]);
    }

    #[test]
    fn saturated_partition() {
        let f = random_video(10, 4, 8, 2);
        let gops = partition_gops(&f, &params(10, 1, 0, 0.5)).unwrap();
        for (i, g) in gops.iter().enumerate() {
            assert_eq!(g.idr, i);
            assert_eq!(g.members, i..i + 1);
        }
        assert!(partition_gops(&f, &params(11, 1, 0, 0.5)).is_err());
    }

    #[test]
    fn scene_cut_boundary() {
        let mut f = random_video(100, 4, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for t in 0..100 {
            let base = if t < 50 { 0 } else { 4 };
            for k in 0..8 {
                let on = k >= base && k < base + 4;
                f.cls[[t, k]] = if on { 1.0 + 0.05 * rng.random::<f32>() } else { 0.0 };
            }
        }
        // every pair across the cut is orthogonal
        for a in 0..50 {
            for b in 50..100 {
                assert!(cosine(f.cls.row(a), f.cls.row(b)) < 0.9);
            }
        }
        let gops = partition_gops(&f, &params(2, 1, 0, 0.9)).unwrap();
        assert_eq!(gops[0].members, 0..50);
        assert_eq!(gops[1].members, 50..100);
    }

    #[test]
    fn key_tokens_from_attention() {
        let mut f = random_video(3, 16, 4, 4);
        f.attn.row_mut(1).fill(0.0);
        f.attn[[1, 5]] = 1.0;
        let gop = bare_gop(1, 0..3);
        let (k, c) = select_key_tokens(&f, &gop, &params(1, 1, 0, 0.0)).unwrap();
        assert_eq!((k, c), (vec![5], vec![]));
        let gop0 = bare_gop(0, 0..3);
        let (k, _) = select_key_tokens(&f, &gop0, &params(1, 2, 0, 0.0)).unwrap();
        assert_eq!(k, vec![0, 1]);
    }

    #[test]
    fn context_tokens_stride_over_remaining() {
        let mut f = random_video(1, 16, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw: Vec<f32> = (0..16).map(|_| rng.random::<f32>() + 0.01).collect();
        let total: f32 = raw.iter().sum();
        for (j, r) in raw.iter().enumerate() {
            f.attn[[0, j]] = r / total;
        }
        let gop = bare_gop(0, 0..1);
        let (k, c) = select_key_tokens(&f, &gop, &params(1, 4, 4, 0.0)).unwrap();
        // brute force: the 4 largest, then every third of the other 12
        let mut by_attn: Vec<usize> = (0..16).collect();
        by_attn.sort_by(|&a, &b| raw[b].partial_cmp(&raw[a]).unwrap());
        let keys: Vec<usize> = by_attn[..4].to_vec();
        let others: Vec<usize> = (0..16).filter(|j| !keys.contains(j)).collect();
        let want: Vec<usize> = others.iter().step_by(3).copied().collect();
        assert_eq!(k, keys);
        assert_eq!(c, want);
    }

    #[test]
    fn grouping_matches_brute_force_nearest_neighbour() {
        let f = random_video(3, 6, 5, 6);
        let gop = bare_gop(1, 0..3);
        let keys = [2usize];
        let ctx = [4usize];
        let gm = assign_groups(&f, &gop, &keys, &ctx);
        let sel = [f.patches.slice(ndarray::s![1, 2, ..]), f.patches.slice(ndarray::s![1, 4, ..])];
        for t in 0..3 {
            for j in 0..6 {
                let v = f.patches.slice(ndarray::s![t, j, ..]);
                let cos = |a: ndarray::ArrayView1<f32>| {
                    let dot: f64 = v.iter().zip(a.iter()).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
                    let n1: f64 = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                    let n2: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                    dot / (n1 * n2)
                };
                let want = if cos(sel[1].view()) > cos(sel[0].view()) { 1 } else { 0 };
                assert_eq!(gm.label(t, j), want);
            }
        }
        assert_eq!(gm.label(1, 2), 0);
        assert_eq!(gm.label(1, 4), 1);
    }

    #[test]
    fn equidistant_patches_join_group_zero() {
        let mut f = random_video(1, 3, 2, 7);
        f.patches.slice_mut(ndarray::s![0, 0, ..]).assign(&ndarray::arr1(&[1.0, 0.0]));
        f.patches.slice_mut(ndarray::s![0, 1, ..]).assign(&ndarray::arr1(&[0.0, 1.0]));
        f.patches.slice_mut(ndarray::s![0, 2, ..]).assign(&ndarray::arr1(&[1.0, 1.0]));
        let gm = assign_groups(&f, &bare_gop(0, 0..1), &[0], &[1]);
        assert_eq!(gm.label(0, 2), 0);
    }

    fn map_from(labels: &[&[usize]], start: usize) -> GroupMap {
        let p = labels[0].len();
        GroupMap {
            start,
            p,
            labels: labels.iter().flat_map(|r| r.iter().copied()).collect(),
            n_groups: 3,
        }
    }

    #[test]
    fn static_removal_rules() {
        // identical labels: only IDR survives
        let gm = map_from(&[&[0, 1], &[0, 1], &[0, 1], &[0, 1]], 10);
        let keep = remove_static(&bare_gop(11, 10..14), &gm);
        assert_eq!(keep, vec![false, false, true, true, false, false, false, false]);
        // all different: nothing removed
        let gm = map_from(&[&[0, 1], &[1, 2], &[2, 0]], 0);
        assert!(remove_static(&bare_gop(0, 0..3), &gm).iter().all(|&k| k));
        // A, B, A at one coordinate
        let gm = map_from(&[&[0], &[1], &[0]], 0);
        assert!(remove_static(&bare_gop(0, 0..3), &gm).iter().all(|&k| k));
        // A, A, B after the IDR: the second A goes
        let gm = map_from(&[&[0], &[0], &[1]], 0);
        assert_eq!(remove_static(&bare_gop(0, 0..3), &gm), vec![true, false, true]);
    }

    #[test]
    fn merge_means() {
        let f = random_video(2, 5, 4, 8);
        let gm = GroupMap {
            start: 0,
            p: 5,
            labels: vec![0, 1, 1, 1, 1, 1, 1, 1, 1, 2],
            n_groups: 4,
        };
        let mut keep = vec![true; 10];
        keep[9] = false;
        let (out, members) = merge_tokens(&f, &gm, &keep);
        assert_eq!(out.nrows(), 2);
        assert_eq!(out.row(0), f.patches.slice(ndarray::s![0, 0, ..]));
        assert_eq!(members[1].len(), 8);
        for k in 0..4 {
            let mut acc = 0.0f64;
            for &(t, j) in &members[1] {
                acc += f.patches[[t, j, k]] as f64;
            }
            assert!((acc / 8.0 - out[[1, k]] as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_frames_single_gop_gives_w_tokens() {
        let base = random_video(1, 16, 8, 11);
        let n = 20;
        let patches = Array3::from_shape_fn((n, 16, 8), |(_, j, k)| base.patches[[0, j, k]]);
        let cls = Array2::from_shape_fn((n, 8), |(_, k)| base.cls[[0, k]]);
        let f = FrameFeatureSet::new(cls, patches, Array2::from_elem((n, 16), 1.0 / 16.0)).unwrap();
        let (s, trace) = compress(&f, &params(1, 6, 2, 0.8), Exec::Sequential).unwrap();
        assert_eq!(s.nrows(), 8);
        assert_eq!(trace.per_gop[0].removed, (n - 1) * 16);
    }

    #[test]
    fn single_frame_video() {
        let f = random_video(1, 9, 4, 12);
        let (s, trace) = compress(&f, &params(1, 3, 2, 0.8), Exec::Sequential).unwrap();
        assert_eq!(trace.per_gop[0].removed, 0);
        assert_eq!(trace.per_gop[0].kept, 9);
        assert!(s.nrows() <= 5 && s.nrows() >= 1);
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let f = random_video(40, 16, 8, 13);
        let p = params(4, 4, 2, 0.2);
        let a = compress(&f, &p, Exec::Sequential).unwrap();
        let b = compress(&f, &p, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }
}
