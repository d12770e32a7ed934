//! Two-dimensional layouts of frame embeddings for the day view.
//!
//! The layout follows the usual neighbour-graph recipe: a k-nearest-neighbour
//! graph is turned into a fuzzy membership graph (per-point bandwidth chosen
//! so the memberships sum to `log2(k)`), symmetrised, and then embedded in
//! the plane by stochastic gradient descent with attractive moves along edges
//! and repulsive moves against random points. Initial positions come from
//! the two leading principal components.
//!
//! Every operation is deterministic for a fixed seed.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::index::{IndexParams, IndexScope, SimilarityIndex};
use crate::types::{squared_l2, FrameRef, FrameSource, Polarity};

/// Above this many points the neighbour graph comes from an ANN index
/// instead of an exhaustive scan.
const EXACT_KNN_LIMIT: usize = 6000;
const NEGATIVE_SAMPLES: usize = 5;
// Curve parameters for min_dist = 0.1, spread = 1.0.
const CURVE_A: f32 = 1.577;
const CURVE_B: f32 = 0.8951;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Steering {
    pub concept: String,
    /// Distance multiplier between two positively labelled frames.
    pub attract: f32,
    /// Distance multiplier between frames with opposite labels.
    pub repel: f32,
}

impl Steering {
    pub fn new(concept: impl Into<String>) -> Self {
        Self { concept: concept.into(), attract: 0.3, repel: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionParams {
    pub n_neighbors: usize,
    pub seed: u64,
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steering: Option<Steering>,
}

impl Default for ProjectionParams {
    fn default() -> Self {
        Self { n_neighbors: 15, seed: 0, epochs: 200, steering: None }
    }
}

impl ProjectionParams {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }
}

/// A 2-D layout of frames. `coords[i]` is the position of `refs[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub layout_id: String,
    pub parent: Option<String>,
    pub refs: Vec<FrameRef>,
    pub coords: Vec<[f32; 2]>,
    pub params: ProjectionParams,
}

#[derive(Serialize, Deserialize)]
struct LayoutPoint {
    sensor: String,
    clip_start: i64,
    frame_index: u8,
    x: f32,
    y: f32,
}

#[derive(Serialize, Deserialize)]
struct LayoutJson {
    layout_id: String,
    parent: Option<String>,
    params: ProjectionParams,
    points: Vec<LayoutPoint>,
}

impl Serialize for Layout {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        LayoutJson {
            layout_id: self.layout_id.clone(),
            parent: self.parent.clone(),
            params: self.params.clone(),
            points: self
                .refs
                .iter()
                .zip(&self.coords)
                .map(|(r, c)| LayoutPoint {
                    sensor: r.sensor_id.clone(),
                    clip_start: r.clip_start,
                    frame_index: r.frame_index,
                    x: c[0],
                    y: c[1],
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Layout {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = LayoutJson::deserialize(d)?;
        let mut refs = Vec::with_capacity(raw.points.len());
        let mut coords = Vec::with_capacity(raw.points.len());
        for p in raw.points {
            refs.push(FrameRef::new(p.sensor, p.clip_start, p.frame_index).map_err(serde::de::Error::custom)?);
            coords.push([p.x, p.y]);
        }
        Ok(Layout { layout_id: raw.layout_id, parent: raw.parent, refs, coords, params: raw.params })
    }
}

impl Layout {
    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }
}

fn layout_id(parent: Option<&str>, refs: &[FrameRef], params: &ProjectionParams) -> String {
    let mut h = Sha256::new();
    h.update(parent.unwrap_or("").as_bytes());
    h.update(serde_json::to_vec(params).expect("params serialise"));
    for r in refs {
        h.update(r.to_string().as_bytes());
        h.update(b"\n");
    }
    hex::encode(&h.finalize()[..8])
}

fn gather(refs: &[FrameRef], source: &dyn FrameSource) -> Result<(Vec<f32>, usize)> {
    let dim = source.dim();
    let embeddings = source.embeddings(refs)?;
    let mut values = Vec::with_capacity(refs.len() * dim);
    for e in &embeddings {
        e.check_dim(dim)?;
        values.extend_from_slice(e.as_slice());
    }
    Ok((values, dim))
}

/// Projects the given frames into the plane.
pub fn project(refs: &[FrameRef], source: &dyn FrameSource, params: &ProjectionParams) -> Result<Layout> {
    let (values, dim) = gather(refs, source)?;
    let coords = embed(&values, dim, params, None)?;
    Ok(Layout {
        layout_id: layout_id(None, refs, params),
        parent: None,
        refs: refs.to_vec(),
        coords,
        params: params.clone(),
    })
}

fn child_params(parent: &Layout, seed: u64) -> ProjectionParams {
    ProjectionParams { seed, steering: None, ..parent.params.clone() }
}

fn derived(parent: &Layout, refs: Vec<FrameRef>, source: &dyn FrameSource, seed: u64) -> Result<Layout> {
    if refs.len() < 2 {
        return Err(Error::InvalidParam(format!("a layout needs at least 2 frames, got {}", refs.len())));
    }
    let params = child_params(parent, seed);
    let (values, dim) = gather(&refs, source)?;
    let coords = embed(&values, dim, &params, None)?;
    Ok(Layout {
        layout_id: layout_id(Some(&parent.layout_id), &refs, &params),
        parent: Some(parent.layout_id.clone()),
        refs,
        coords,
        params,
    })
}

/// Re-embeds only `subset`, which must be drawn from `layout`.
pub fn reproject_subset(layout: &Layout, source: &dyn FrameSource, subset: &HashSet<FrameRef>, seed: u64) -> Result<Layout> {
    let members: HashSet<&FrameRef> = layout.refs.iter().collect();
    if subset.iter().any(|r| !members.contains(r)) {
        return Err(Error::NotASubset);
    }
    let refs: Vec<FrameRef> = layout.refs.iter().filter(|r| subset.contains(*r)).cloned().collect();
    derived(layout, refs, source, seed)
}

/// Drops `excluded` from `layout` and re-embeds the remainder.
pub fn remove_and_reproject(layout: &Layout, source: &dyn FrameSource, excluded: &HashSet<FrameRef>, seed: u64) -> Result<Layout> {
    let members: HashSet<&FrameRef> = layout.refs.iter().collect();
    if excluded.iter().any(|r| !members.contains(r)) {
        return Err(Error::NotASubset);
    }
    let refs: Vec<FrameRef> = layout.refs.iter().filter(|r| !excluded.contains(*r)).cloned().collect();
    derived(layout, refs, source, seed)
}

/// Label-steered projection: before the neighbour graph is built, distances
/// between two positive frames are multiplied by `steering.attract` and
/// distances between frames of opposite polarity by `steering.repel`.
pub fn steer(
    refs: &[FrameRef],
    source: &dyn FrameSource,
    labels: &HashMap<FrameRef, Polarity>,
    steering: Steering,
    params: &ProjectionParams,
) -> Result<Layout> {
    if labels.is_empty() {
        return Err(Error::Empty("label map"));
    }
    if !labels.values().any(|p| *p == Polarity::Positive) || !labels.values().any(|p| *p == Polarity::Negative) {
        return Err(Error::InvalidParam("steering needs both positive and negative labels".into()));
    }
    if !(steering.attract > 0.0 && steering.repel > 0.0) {
        return Err(Error::InvalidParam("steering multipliers must be positive".into()));
    }
    let position: HashMap<&FrameRef, usize> = refs.iter().enumerate().map(|(i, r)| (r, i)).collect();
    let mut point_labels = vec![None; refs.len()];
    for (r, p) in labels {
        let i = *position.get(r).ok_or(Error::NotASubset)?;
        point_labels[i] = Some(*p);
    }
    let params = ProjectionParams { steering: Some(steering.clone()), ..params.clone() };
    let (values, dim) = gather(refs, source)?;
    let coords = embed(&values, dim, &params, Some((&point_labels, &steering)))?;
    Ok(Layout {
        layout_id: layout_id(None, refs, &params),
        parent: None,
        refs: refs.to_vec(),
        coords,
        params,
    })
}

type Labels<'a> = Option<(&'a [Option<Polarity>], &'a Steering)>;

fn scale(labels: Labels<'_>, i: usize, j: usize) -> f32 {
    match labels {
        Some((l, s)) => match (l[i], l[j]) {
            (Some(Polarity::Positive), Some(Polarity::Positive)) => s.attract,
            (Some(a), Some(b)) if a != b => s.repel,
            _ => 1.0,
        },
        None => 1.0,
    }
}

/// Embeds `n = values.len() / dim` points; returns one coordinate pair each.
pub fn embed(values: &[f32], dim: usize, params: &ProjectionParams, labels: Labels<'_>) -> Result<Vec<[f32; 2]>> {
    if dim == 0 {
        return Err(Error::Empty("embedding"));
    }
    let n = values.len() / dim;
    if n < 2 {
        return Err(Error::InvalidParam(format!("a layout needs at least 2 frames, got {n}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    if params.n_neighbors < 1 {
        return Err(Error::InvalidParam("n_neighbors must be at least 1".into()));
    }
    let k = params.n_neighbors.min(n - 1);
    let knn = neighbour_lists(values, dim, k, params.seed, labels)?;
    let graph = fuzzy_graph(&knn, k);
    let init = pca_init(values, dim, params.seed);
    Ok(optimize(init, &graph, params.epochs, params.seed))
}

/// For every point, its `k` nearest other points as `(index, distance)`.
fn neighbour_lists(values: &[f32], dim: usize, k: usize, seed: u64, labels: Labels<'_>) -> Result<Vec<Vec<(usize, f32)>>> {
    let n = values.len() / dim;
    let row = |i: usize| &values[i * dim..(i + 1) * dim];
    let labelled: Vec<usize> = labels
        .map(|(l, _)| (0..n).filter(|&i| l[i].is_some()).collect())
        .unwrap_or_default();
    let mut out = Vec::with_capacity(n);
    if n <= EXACT_KNN_LIMIT {
        for i in 0..n {
            let mut d: Vec<(usize, f32)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, squared_l2(row(i), row(j)).sqrt() * scale(labels, i, j)))
                .collect();
            keep_nearest(&mut d, k);
            out.push(d);
        }
        return Ok(out);
    }
    let ids: Vec<FrameRef> = (0..n)
        .map(|i| FrameRef { sensor_id: String::new(), clip_start: (i / 10) as i64, frame_index: (i % 10) as u8 })
        .collect();
    let index = SimilarityIndex::build(
        ids.iter().enumerate().map(|(i, r)| (r, row(i))),
        IndexParams { max_degree: 12, ef_construction: 64, ef_search: 2 * k + 1, seed },
        IndexScope::Explicit,
    )?;
    for i in 0..n {
        let mut cand: HashMap<usize, f32> = index
            .knn_ids(row(i), k + 1, None)?
            .into_iter()
            .map(|(id, _)| id as usize)
            .filter(|&j| j != i)
            .map(|j| (j, squared_l2(row(i), row(j)).sqrt() * scale(labels, i, j)))
            .collect();
        if labels.is_some_and(|(l, _)| l[i].is_some()) {
            for &j in &labelled {
                if j != i {
                    cand.insert(j, squared_l2(row(i), row(j)).sqrt() * scale(labels, i, j));
                }
            }
        }
        let mut d: Vec<(usize, f32)> = cand.into_iter().collect();
        keep_nearest(&mut d, k);
        out.push(d);
    }
    Ok(out)
}

fn keep_nearest(d: &mut Vec<(usize, f32)>, k: usize) {
    let cmp = |a: &(usize, f32), b: &(usize, f32)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
    if d.len() > k {
        d.select_nth_unstable_by(k - 1, cmp);
        d.truncate(k);
    }
    d.sort_by(cmp);
}

/// Symmetric weighted edge list `(i, j, w)` with both directions present.
fn fuzzy_graph(knn: &[Vec<(usize, f32)>], k: usize) -> Vec<(usize, usize, f32)> {
    let target = (k as f32).log2().max(f32::MIN_POSITIVE);
    let mut directed: HashMap<(usize, usize), f32> = HashMap::new();
    for (i, neigh) in knn.iter().enumerate() {
        let rho = neigh.iter().map(|&(_, d)| d).find(|&d| d > 0.0).unwrap_or(0.0);
        let (mut lo, mut hi, mut sigma) = (0.0f32, f32::INFINITY, 1.0f32);
        for _ in 0..64 {
            let sum: f32 = neigh.iter().map(|&(_, d)| (-(d - rho).max(0.0) / sigma).exp()).sum();
            if (sum - target).abs() < 1e-5 {
                break;
            }
            if sum > target {
                hi = sigma;
                sigma = (lo + hi) / 2.0;
            } else {
                lo = sigma;
                sigma = if hi.is_finite() { (lo + hi) / 2.0 } else { sigma * 2.0 };
            }
        }
        let mean_d = neigh.iter().map(|&(_, d)| d).sum::<f32>() / neigh.len().max(1) as f32;
        sigma = sigma.max(1e-3 * mean_d).max(f32::MIN_POSITIVE);
        for &(j, d) in neigh {
            let w = (-(d - rho).max(0.0) / sigma).exp();
            directed.insert((i, j), w);
        }
    }
    let mut edges = Vec::with_capacity(directed.len() * 2);
    for (&(i, j), &w) in &directed {
        let back = directed.get(&(j, i)).copied().unwrap_or(0.0);
        if back > 0.0 && j < i {
            continue;
        }
        let sym = w + back - w * back;
        edges.push((i, j, sym));
        edges.push((j, i, sym));
    }
    edges.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    edges
}

/// Top two principal components, scaled so the largest coordinate is 10,
/// plus a small seeded jitter so duplicate points can separate.
fn pca_init(values: &[f32], dim: usize, seed: u64) -> Vec<[f32; 2]> {
    let n = values.len() / dim;
    let mut mean = vec![0f64; dim];
    for row in values.chunks_exact(dim) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = values.chunks_exact(dim).flat_map(|r| r.iter().zip(&mean).map(|(&v, m)| v as f64 - m)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a70);
    let mut components: Vec<Vec<f64>> = Vec::new();
    for _ in 0..2.min(dim) {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for _ in 0..100 {
            let mut next = vec![0f64; dim];
            for row in centered.chunks_exact(dim) {
                let dot: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (x, r) in next.iter_mut().zip(row) {
                    *x += dot * r;
                }
            }
            for c in &components {
                let dot: f64 = next.iter().zip(c).map(|(a, b)| a * b).sum();
                next.iter_mut().zip(c).for_each(|(x, c)| *x -= dot * c);
            }
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                break;
            }
            v = next.into_iter().map(|x| x / norm).collect();
        }
        components.push(v);
    }
    let mut coords: Vec<[f32; 2]> = centered
        .chunks_exact(dim)
        .map(|row| {
            let mut c = [0f32; 2];
            for (k, comp) in components.iter().enumerate() {
                c[k] = row.iter().zip(comp).map(|(a, b)| a * b).sum::<f64>() as f32;
            }
            c
        })
        .collect();
    let max = coords.iter().flat_map(|c| c.iter().map(|v| v.abs())).fold(0f32, f32::max);
    let factor = if max > 0.0 { 10.0 / max } else { 1.0 };
    for c in &mut coords {
        for v in c.iter_mut() {
            *v = *v * factor + 1e-4 * rng.sample::<f32, _>(StandardNormal);
        }
    }
    coords
}

fn clip(g: f32) -> f32 {
    g.clamp(-4.0, 4.0)
}

fn optimize(mut y: Vec<[f32; 2]>, edges: &[(usize, usize, f32)], epochs: usize, seed: u64) -> Vec<[f32; 2]> {
    let n = y.len();
    let epochs = epochs.max(1);
    let max_w = edges.iter().map(|e| e.2).fold(0f32, f32::max);
    if max_w <= 0.0 {
        return y;
    }
    let kept: Vec<&(usize, usize, f32)> = edges.iter().filter(|e| e.2 >= max_w / epochs as f32).collect();
    let per_sample: Vec<f32> = kept.iter().map(|e| max_w / e.2).collect();
    let per_negative: Vec<f32> = per_sample.iter().map(|p| p / NEGATIVE_SAMPLES as f32).collect();
    let mut next_sample = per_sample.clone();
    let mut next_negative = per_negative.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for epoch in 0..epochs {
        let alpha = 1.0 - epoch as f32 / epochs as f32;
        let now = epoch as f32;
        for (e, &&(i, j, _)) in kept.iter().enumerate() {
            if next_sample[e] > now {
                continue;
            }
            let d2 = squared_l2(&y[i], &y[j]);
            if d2 > 0.0 {
                let coeff = -2.0 * CURVE_A * CURVE_B * d2.powf(CURVE_B - 1.0) / (CURVE_A * d2.powf(CURVE_B) + 1.0);
                for d in 0..2 {
                    let g = clip(coeff * (y[i][d] - y[j][d])) * alpha;
                    y[i][d] += g;
                    y[j][d] -= g;
                }
            }
            next_sample[e] += per_sample[e];

            let negatives = ((now - next_negative[e]) / per_negative[e]).floor().max(0.0) as usize;
            for _ in 0..negatives {
                let other = rng.random_range(0..n);
                if other == i {
                    continue;
                }
                let d2 = squared_l2(&y[i], &y[other]);
                let coeff = if d2 > 0.0 {
                    2.0 * CURVE_B / ((0.001 + d2) * (CURVE_A * d2.powf(CURVE_B) + 1.0))
                } else if other == j {
                    continue;
                } else {
                    0.0
                };
                for d in 0..2 {
                    let g = if coeff > 0.0 { clip(coeff * (y[i][d] - y[other][d])) } else { 4.0 };
                    y[i][d] += g * alpha;
                }
            }
            next_negative[e] += negatives as f32 * per_negative[e];
        }
    }
    y
}

/// Trustworthiness of a 2-D layout: 1 minus a normalised penalty for points
/// that are among the `k` nearest in the layout but not in the original
/// space, weighted by how far down the original ranking they sit.
pub fn trustworthiness(high: &[f32], dim: usize, low: &[[f32; 2]], k: usize) -> Result<f64> {
    if dim == 0 || high.len() != low.len() * dim {
        return Err(Error::InvalidParam("high and low sequences differ in length".into()));
    }
    let n = low.len();
    if k == 0 || k >= n {
        return Err(Error::InvalidParam(format!("k = {k} must be in 1..{n}")));
    }
    let denom = (n * k) as f64 * (2 * n) as f64 - (n * k) as f64 * (3 * k + 1) as f64;
    if denom <= 0.0 {
        return Err(Error::InvalidParam(format!("k = {k} too large for {n} points")));
    }
    let row = |i: usize| &high[i * dim..(i + 1) * dim];
    let mut rank = vec![0usize; n];
    let mut penalty = 0f64;
    for i in 0..n {
        let mut order: Vec<(f32, usize)> =
            (0..n).filter(|&j| j != i).map(|j| (squared_l2(row(i), row(j)), j)).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (r, &(_, j)) in order.iter().enumerate() {
            rank[j] = r + 1;
        }
        let mut low_order: Vec<(f32, usize)> = (0..n).filter(|&j| j != i).map(|j| (squared_l2(&low[i], &low[j]), j)).collect();
        low_order.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in &low_order[..k] {
            if rank[j] > k {
                penalty += (rank[j] - k) as f64;
            }
        }
    }
    Ok(1.0 - 2.0 * penalty / denom)
}
