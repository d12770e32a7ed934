//! Hierarchical clustering of a day's frames and density clustering of
//! labelled frames.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::DayFrameSet;
use crate::error::{Error, Result};
use crate::prototype::Prototype;
use crate::types::{squared_l2, FrameRef};

/// Days larger than this are split on micro-cluster centroids.
pub const MICRO_CLUSTER_THRESHOLD: usize = 20_000;
pub const MICRO_CLUSTERS: usize = 2_000;
const MICRO_ITERATIONS: usize = 3;
const SPLIT_ITERATIONS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_cluster_size: usize,
    pub seed: u64,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self { max_depth: 4, min_cluster_size: 10, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub depth: usize,
    /// Indices into [`ClusterTree::refs`], ascending.
    pub members: Vec<usize>,
    pub centroid: Vec<f32>,
    pub decoration: BTreeMap<String, f64>,
}

/// Node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTree {
    pub refs: Vec<FrameRef>,
    pub nodes: Vec<ClusterNode>,
}

#[derive(Serialize)]
struct NodeJson<'a> {
    id: usize,
    children: Vec<NodeJson<'a>>,
    size: usize,
    decoration: &'a BTreeMap<String, f64>,
}

impl ClusterTree {
    pub fn root(&self) -> &ClusterNode {
        &self.nodes[0]
    }

    pub fn node(&self, id: usize) -> Result<&ClusterNode> {
        self.nodes.get(id).ok_or(Error::UnknownNode(id))
    }

    pub fn leaves(&self) -> impl Iterator<Item = &ClusterNode> {
        self.nodes.iter().filter(|n| n.children.is_empty())
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    fn json_node(&self, id: usize) -> NodeJson<'_> {
        let n = &self.nodes[id];
        NodeJson {
            id,
            children: n.children.iter().map(|&c| self.json_node(c)).collect(),
            size: n.members.len(),
            decoration: &n.decoration,
        }
    }
}

/// Nested `{id, children, size, decoration}`; members are left out.
impl Serialize for ClusterTree {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.json_node(0).serialize(s)
    }
}

pub fn build_cluster_tree(day: &DayFrameSet, params: &TreeParams) -> Result<ClusterTree> {
    build_cluster_tree_from(day.refs(), day.values(), day.dim(), params)
}

/// Divisive 2-means clustering. A node is split only if both halves keep at
/// least `min_cluster_size` members.
pub fn build_cluster_tree_from(refs: &[FrameRef], values: &[f32], dim: usize, params: &TreeParams) -> Result<ClusterTree> {
    if refs.is_empty() {
        return Err(Error::Empty("day"));
    }
    if dim == 0 || values.len() != refs.len() * dim {
        return Err(Error::InvalidParam("values do not match refs".into()));
    }
    if params.min_cluster_size == 0 {
        return Err(Error::InvalidParam("min_cluster_size must be at least 1".into()));
    }
    let n = refs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    // Units are the objects being split: single frames, or micro-clusters.
    let (unit_values, unit_members): (Vec<f32>, Vec<Vec<usize>>) = if n > MICRO_CLUSTER_THRESHOLD {
        micro_clusters(values, dim, MICRO_CLUSTERS, &mut rng)
    } else {
        (values.to_vec(), (0..n).map(|i| vec![i]).collect())
    };
    let weights: Vec<usize> = unit_members.iter().map(Vec::len).collect();

    let mut nodes: Vec<ClusterNode> = Vec::new();
    let mut units_of: Vec<Vec<usize>> = Vec::new();
    let all_units: Vec<usize> = (0..weights.len()).collect();
    nodes.push(make_node(0, None, 0, &all_units, &unit_members, values, dim));
    units_of.push(all_units);

    let mut queue = vec![0usize];
    while let Some(id) = queue.pop() {
        if nodes[id].depth >= params.max_depth {
            continue;
        }
        let units = std::mem::take(&mut units_of[id]);
        let Some((left, right)) = two_means(&units, &unit_values, &weights, dim, &mut rng) else {
            continue;
        };
        let size = |u: &[usize]| u.iter().map(|&i| weights[i]).sum::<usize>();
        if size(&left) < params.min_cluster_size || size(&right) < params.min_cluster_size {
            continue;
        }
        let depth = nodes[id].depth + 1;
        for half in [left, right] {
            let child = nodes.len();
            nodes.push(make_node(child, Some(id), depth, &half, &unit_members, values, dim));
            nodes[id].children.push(child);
            units_of.push(half);
            queue.push(child);
        }
    }
    Ok(ClusterTree { refs: refs.to_vec(), nodes })
}

fn make_node(id: usize, parent: Option<usize>, depth: usize, units: &[usize], unit_members: &[Vec<usize>], values: &[f32], dim: usize) -> ClusterNode {
    let mut members: Vec<usize> = units.iter().flat_map(|&u| unit_members[u].iter().copied()).collect();
    members.sort_unstable();
    let centroid = mean_of(members.iter().map(|&i| &values[i * dim..(i + 1) * dim]), dim);
    ClusterNode { id, parent, children: Vec::new(), depth, members, centroid, decoration: BTreeMap::new() }
}

fn mean_of<'a>(rows: impl Iterator<Item = &'a [f32]>, dim: usize) -> Vec<f32> {
    let mut sum = vec![0f64; dim];
    let mut count = 0usize;
    for row in rows {
        for (s, &v) in sum.iter_mut().zip(row) {
            *s += v as f64;
        }
        count += 1;
    }
    sum.into_iter().map(|s| (s / count.max(1) as f64) as f32).collect()
}

fn nearest(row: &[f32], centers: &[Vec<f32>]) -> usize {
    let mut best = (f32::INFINITY, 0);
    for (c, center) in centers.iter().enumerate() {
        let d = squared_l2(row, center);
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

/// Weighted 2-means over the given units, seeded with k-means++.
/// Returns `None` when all units coincide.
fn two_means(units: &[usize], values: &[f32], weights: &[usize], dim: usize, rng: &mut ChaCha8Rng) -> Option<(Vec<usize>, Vec<usize>)> {
    if units.len() < 2 {
        return None;
    }
    let row = |u: usize| &values[u * dim..(u + 1) * dim];
    let first = units[rng.random_range(0..units.len())];
    let dist: Vec<f64> = units.iter().map(|&u| squared_l2(row(u), row(first)) as f64 * weights[u] as f64).collect();
    let total: f64 = dist.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let mut target = rng.random::<f64>() * total;
    let mut second = units[units.len() - 1];
    for (&u, &d) in units.iter().zip(&dist) {
        if d > 0.0 && target < d {
            second = u;
            break;
        }
        target -= d;
    }
    let mut centers = vec![row(first).to_vec(), row(second).to_vec()];
    let mut assign = vec![0u8; units.len()];
    for iteration in 0..SPLIT_ITERATIONS {
        let mut changed = false;
        for (a, &u) in assign.iter_mut().zip(units) {
            let c = nearest(row(u), &centers) as u8;
            if *a != c || iteration == 0 {
                changed |= *a != c;
                *a = c;
            }
        }
        let mut sums = vec![vec![0f64; dim]; 2];
        let mut counts = [0f64; 2];
        for (&a, &u) in assign.iter().zip(units) {
            let w = weights[u] as f64;
            counts[a as usize] += w;
            for (s, &v) in sums[a as usize].iter_mut().zip(row(u)) {
                *s += w * v as f64;
            }
        }
        for c in 0..2 {
            if counts[c] > 0.0 {
                centers[c] = sums[c].iter().map(|s| (s / counts[c]) as f32).collect();
            }
        }
        if !changed && iteration > 0 {
            break;
        }
    }
    let left: Vec<usize> = units.iter().zip(&assign).filter(|(_, &a)| a == 0).map(|(&u, _)| u).collect();
    let right: Vec<usize> = units.iter().zip(&assign).filter(|(_, &a)| a == 1).map(|(&u, _)| u).collect();
    if left.is_empty() || right.is_empty() {
        return None;
    }
    Some((left, right))
}

/// k-means with random initial centers and a few Lloyd iterations. Returns
/// the non-empty centers and their member lists.
fn micro_clusters(values: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<Vec<usize>>) {
    let n = values.len() / dim;
    let row = |i: usize| &values[i * dim..(i + 1) * dim];
    let picks = rand::seq::index::sample(rng, n, k.min(n));
    let mut centers: Vec<Vec<f32>> = picks.iter().map(|i| row(i).to_vec()).collect();
    let mut assign = vec![0usize; n];
    for iteration in 0..=MICRO_ITERATIONS {
        for (i, a) in assign.iter_mut().enumerate() {
            *a = nearest(row(i), &centers);
        }
        if iteration == MICRO_ITERATIONS {
            break;
        }
        let mut sums = vec![vec![0f64; dim]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(row(i)) {
                *s += v as f64;
            }
        }
        for (c, center) in centers.iter_mut().enumerate() {
            if counts[c] > 0 {
                *center = sums[c].iter().map(|s| (s / counts[c] as f64) as f32).collect();
            }
        }
    }
    let mut members = vec![Vec::new(); centers.len()];
    for (i, &a) in assign.iter().enumerate() {
        members[a].push(i);
    }
    let mut flat = Vec::new();
    let mut kept = Vec::new();
    for (center, m) in centers.into_iter().zip(members) {
        if !m.is_empty() {
            flat.extend(center);
            kept.push(m);
        }
    }
    (flat, kept)
}

/// Sets each node's decoration to the mean likelihood of its members under
/// the latest version of every given prototype.
pub fn decorate_tree(tree: &mut ClusterTree, day: &DayFrameSet, prototypes: &[&Prototype]) -> Result<()> {
    let mut per_frame: Vec<(String, Vec<f64>)> = Vec::with_capacity(prototypes.len());
    for p in prototypes {
        let version = p.latest().ok_or_else(|| Error::Untrained(p.concept.clone()))?;
        let mut likelihoods = Vec::with_capacity(tree.refs.len());
        for r in &tree.refs {
            let pos = day.position(r).ok_or_else(|| Error::UnknownFrame(r.to_string()))?;
            likelihoods.push(version.forest.predict_one(day.vector(pos))?);
        }
        per_frame.push((p.concept.clone(), likelihoods));
    }
    for node in &mut tree.nodes {
        node.decoration.clear();
        for (concept, lik) in &per_frame {
            let mean = node.members.iter().map(|&i| lik[i]).sum::<f64>() / node.members.len() as f64;
            node.decoration.insert(concept.clone(), mean);
        }
    }
    Ok(())
}

pub fn select_node(tree: &ClusterTree, node_id: usize) -> Result<BTreeSet<FrameRef>> {
    let node = tree.node(node_id)?;
    Ok(node.members.iter().map(|&i| tree.refs[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityClustering {
    /// Cluster id per input point, `None` for noise.
    pub assignment: Vec<Option<usize>>,
    pub eps: f32,
    pub min_pts: usize,
}

impl DensityClustering {
    pub fn n_clusters(&self) -> usize {
        self.assignment.iter().flatten().max().map_or(0, |m| m + 1)
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignment.iter().enumerate().filter(|(_, a)| **a == Some(cluster)).map(|(i, _)| i).collect()
    }
}

pub const DEFAULT_MIN_PTS: usize = 5;

/// 90th percentile of each point's distance to its 4th nearest other point
/// (or farthest, with fewer than 5 points), floored at 1e-9.
pub fn default_eps(points: &[&[f32]]) -> f32 {
    if points.len() < 2 {
        return 1e-9;
    }
    let kth = 4.min(points.len() - 1);
    let mut dists: Vec<f32> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f32> = points.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, q)| squared_l2(p, q)).collect();
            d.select_nth_unstable_by(kth - 1, f32::total_cmp);
            d[kth - 1].sqrt()
        })
        .collect();
    dists.sort_by(f32::total_cmp);
    let idx = ((dists.len() as f64 * 0.9).ceil() as usize).clamp(1, dists.len()) - 1;
    dists[idx].max(1e-9)
}

/// Density clustering. A point is core when at least `min_pts` points,
/// itself included, lie within `eps`. Clusters are the connected components
/// of core points; each border point joins the cluster of its nearest core
/// point, so membership does not depend on input order. Cluster ids follow
/// the order of each cluster's first point.
pub fn dbscan(points: &[&[f32]], eps: f32, min_pts: usize) -> Result<DensityClustering> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParam(format!("eps must be positive, got {eps}")));
    }
    if min_pts == 0 {
        return Err(Error::InvalidParam("min_pts must be at least 1".into()));
    }
    let n = points.len();
    let eps2 = eps * eps;
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| squared_l2(points[i], points[j]) <= eps2).collect())
        .collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut component = vec![usize::MAX; n];
    let mut n_components = 0;
    for start in 0..n {
        if !core[start] || component[start] != usize::MAX {
            continue;
        }
        component[start] = n_components;
        let mut stack = vec![start];
        while let Some(p) = stack.pop() {
            for &q in &neighbours[p] {
                if core[q] && component[q] == usize::MAX {
                    component[q] = n_components;
                    stack.push(q);
                }
            }
        }
        n_components += 1;
    }
    let mut raw: Vec<Option<usize>> = (0..n).map(|i| core[i].then_some(component[i])).collect();
    for i in 0..n {
        if core[i] {
            continue;
        }
        let nearest_core = neighbours[i]
            .iter()
            .filter(|&&j| core[j])
            .min_by(|&&a, &&b| {
                squared_l2(points[i], points[a])
                    .total_cmp(&squared_l2(points[i], points[b]))
                    .then_with(|| lexical(points[a], points[b]))
            });
        raw[i] = nearest_core.map(|&j| component[j]);
    }
    let mut renumber: BTreeMap<usize, usize> = BTreeMap::new();
    let assignment = raw
        .into_iter()
        .map(|a| {
            a.map(|c| {
                let next = renumber.len();
                *renumber.entry(c).or_insert(next)
            })
        })
        .collect();
    Ok(DensityClustering { assignment, eps, min_pts })
}

fn lexical(a: &[f32], b: &[f32]) -> std::cmp::Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
}
