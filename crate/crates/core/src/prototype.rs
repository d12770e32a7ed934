//! Concept prototypes: the annotation log, training-set assembly, a random
//! forest classifier, representative frames and versioned persistence.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{dbscan, default_eps, DEFAULT_MIN_PTS};
use crate::corpus::DayFrameSet;
use crate::error::{Error, Result};
use crate::types::{squared_l2, Embedding, FrameRef, FrameSource, Polarity};

pub const ANNOTATION_LOG: &str = "annotations.jsonl";
pub const PROTOTYPE_FORMAT_VERSION: u32 = 1;

/// Concept names double as directory names.
pub fn validate_concept(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name.len() <= 128
        && !name.starts_with('.')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | ' '));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParam(format!("invalid concept name {name:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub user: String,
    pub concept: String,
    pub refs: Vec<FrameRef>,
    pub polarity: Polarity,
    pub created_at: DateTime<Utc>,
}

/// Append-only JSON-lines log. Writes are serialised; reads see a snapshot.
#[derive(Debug)]
pub struct AnnotationLog {
    path: Option<PathBuf>,
    entries: RwLock<Vec<Annotation>>,
}

impl AnnotationLog {
    pub fn in_memory() -> Self {
        Self { path: None, entries: RwLock::new(Vec::new()) }
    }

    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut entries = Vec::new();
        if path.exists() {
            for (n, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let a: Annotation = serde_json::from_str(&line)
                    .map_err(|e| Error::Corrupt(format!("{}:{}: {e}", path.display(), n + 1)))?;
                entries.push(a);
            }
        }
        Ok(Self { path: Some(path), entries: RwLock::new(entries) })
    }

    /// Appends an annotation after checking every frame exists in `source`.
    pub fn record(&self, user: &str, concept: &str, refs: &[FrameRef], polarity: Polarity, source: &dyn FrameSource) -> Result<u64> {
        validate_concept(concept)?;
        if refs.is_empty() {
            return Err(Error::Empty("annotation refs"));
        }
        if let Some(missing) = refs.iter().find(|r| !source.contains(r)) {
            return Err(Error::UnknownFrame(missing.to_string()));
        }
        let unique: BTreeSet<FrameRef> = refs.iter().cloned().collect();
        let mut entries = self.entries.write();
        let annotation = Annotation {
            id: entries.last().map_or(1, |a| a.id + 1),
            user: user.to_string(),
            concept: concept.to_string(),
            refs: unique.into_iter().collect(),
            polarity,
            created_at: Utc::now(),
        };
        if let Some(path) = &self.path {
            let mut line = serde_json::to_vec(&annotation)?;
            line.push(b'\n');
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            f.write_all(&line)?;
            f.sync_data()?;
        }
        let id = annotation.id;
        entries.push(annotation);
        Ok(id)
    }

    pub fn entries(&self) -> Vec<Annotation> {
        self.entries.read().clone()
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.read().is_empty()
    }

    /// Effective label per frame for `concept`; later annotations win.
    pub fn labels(&self, concept: &str) -> BTreeMap<FrameRef, Polarity> {
        let mut out = BTreeMap::new();
        for a in self.entries.read().iter().filter(|a| a.concept == concept) {
            for r in &a.refs {
                out.insert(r.clone(), a.polarity);
            }
        }
        out
    }

    pub fn concepts(&self) -> BTreeSet<String> {
        self.entries.read().iter().map(|a| a.concept.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub positives: BTreeSet<FrameRef>,
    pub explicit_negatives: BTreeSet<FrameRef>,
    pub random_negatives: BTreeSet<FrameRef>,
    pub seed: u64,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.positives.len() + self.explicit_negatives.len() + self.random_negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (tag, set) in [("p", &self.positives), ("n", &self.explicit_negatives), ("r", &self.random_negatives)] {
            for r in set {
                h.update(tag.as_bytes());
                h.update(r.to_string().as_bytes());
                h.update(b"\n");
            }
        }
        h.update(self.seed.to_le_bytes());
        hex::encode(h.finalize())
    }
}

/// Positives and explicit negatives from `labels`, plus `min(2|P|, pool)`
/// random negatives drawn uniformly from the rest of `source`.
pub fn assemble_training_set(concept: &str, labels: &BTreeMap<FrameRef, Polarity>, source: &dyn FrameSource, seed: u64) -> Result<TrainingSet> {
    let positives: BTreeSet<FrameRef> =
        labels.iter().filter(|(_, p)| **p == Polarity::Positive).map(|(r, _)| r.clone()).collect();
    if positives.is_empty() {
        return Err(Error::NoPositives(concept.to_string()));
    }
    let explicit_negatives: BTreeSet<FrameRef> =
        labels.iter().filter(|(_, p)| **p == Polarity::Negative).map(|(r, _)| r.clone()).collect();
    let excluded_in_source = labels.keys().filter(|r| source.contains(r)).count();
    let total = source.frame_count();
    let pool = total.saturating_sub(excluded_in_source);
    let want = (2 * positives.len()).min(pool);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random_negatives = BTreeSet::new();
    if want * 2 >= pool {
        let mut candidates = Vec::with_capacity(pool);
        for ordinal in 0..total {
            let r = source.frame_at(ordinal)?;
            if !labels.contains_key(&r) {
                candidates.push(r);
            }
        }
        for i in 0..want {
            let j = rng.random_range(i..candidates.len());
            candidates.swap(i, j);
        }
        candidates.truncate(want);
        random_negatives.extend(candidates);
    } else {
        let mut tried = HashSet::new();
        while random_negatives.len() < want {
            let ordinal = rng.random_range(0..total);
            if !tried.insert(ordinal) {
                continue;
            }
            let r = source.frame_at(ordinal)?;
            if !labels.contains_key(&r) {
                random_negatives.insert(r);
            }
        }
    }
    Ok(TrainingSet { positives, explicit_negatives, random_negatives, seed })
}

/// One node of a decision tree. Samples with `x[feature] <= threshold` go
/// left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    Split { feature: u32, threshold: f32, left: u32, right: u32 },
    Leaf { positive_fraction: f64 },
}

/// Node 0 is the root; children always come after their parent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    nodes: Vec<TreeNode>,
}

impl DecisionTree {
    pub fn new(nodes: Vec<TreeNode>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Empty("tree"));
        }
        for (i, node) in nodes.iter().enumerate() {
            match *node {
                TreeNode::Split { left, right, threshold, .. } => {
                    let ok = |c: u32| (c as usize) > i && (c as usize) < nodes.len();
                    if !ok(left) || !ok(right) || !threshold.is_finite() {
                        return Err(Error::Corrupt(format!("bad split at node {i}")));
                    }
                }
                TreeNode::Leaf { positive_fraction } => {
                    if !(0.0..=1.0).contains(&positive_fraction) {
                        return Err(Error::Corrupt(format!("leaf fraction {positive_fraction} out of range")));
                    }
                }
            }
        }
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn max_feature(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                TreeNode::Split { feature, .. } => Some(*feature as usize),
                TreeNode::Leaf { .. } => None,
            })
            .max()
    }

    /// Positive fraction of the leaf `x` reaches.
    pub fn leaf_value(&self, x: &[f32]) -> f64 {
        let mut i = 0usize;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { positive_fraction } => return positive_fraction,
                TreeNode::Split { feature, threshold, left, right } => {
                    i = if x[feature as usize] <= threshold { left as usize } else { right as usize };
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Features examined per split; `None` means `floor(sqrt(dim))`.
    pub max_features: Option<usize>,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self { n_trees: 100, max_features: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub dim: usize,
    pub params: ForestParams,
    trees: Vec<DecisionTree>,
}

impl Forest {
    pub fn from_trees(dim: usize, trees: Vec<DecisionTree>) -> Result<Self> {
        if trees.is_empty() {
            return Err(Error::Empty("forest"));
        }
        if trees.iter().filter_map(DecisionTree::max_feature).any(|f| f >= dim) {
            return Err(Error::InvalidParam("split feature outside the embedding".into()));
        }
        let params = ForestParams { n_trees: trees.len(), ..ForestParams::default() };
        Ok(Self { dim, params, trees })
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }

    /// Trains on the row-major matrix `x` with binary labels `y`.
    pub fn fit(x: &[f32], dim: usize, y: &[bool], params: &ForestParams) -> Result<Self> {
        if dim == 0 || x.len() != y.len() * dim {
            return Err(Error::InvalidParam("training matrix does not match labels".into()));
        }
        if params.n_trees == 0 {
            return Err(Error::InvalidParam("n_trees must be at least 1".into()));
        }
        if y.is_empty() || y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
            return Err(Error::Degenerate("training data has a single class"));
        }
        if x.chunks_exact(dim).all(|r| r == &x[..dim]) {
            return Err(Error::Degenerate("all training embeddings are identical"));
        }
        let mtry = params.max_features.unwrap_or((dim as f64).sqrt() as usize).clamp(1, dim);
        let n = y.len();
        let trees = (0..params.n_trees)
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
                rng.set_stream(t as u64);
                let sample: Vec<u32> = (0..n).map(|_| rng.random_range(0..n) as u32).collect();
                grow_tree(x, dim, y, sample, mtry, &mut rng)
            })
            .collect();
        Ok(Self { dim, params: *params, trees })
    }

    /// Mean over trees of the leaf positive fraction.
    pub fn predict_one(&self, x: &[f32]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimMismatch { expected: self.dim, actual: x.len() });
        }
        Ok(self.trees.iter().map(|t| t.leaf_value(x)).sum::<f64>() / self.trees.len() as f64)
    }

    pub fn predict(&self, embeddings: &[Embedding]) -> Result<Vec<f64>> {
        embeddings.iter().map(|e| self.predict_one(e.as_slice())).collect()
    }
}

fn grow_tree(x: &[f32], dim: usize, y: &[bool], sample: Vec<u32>, mtry: usize, rng: &mut ChaCha8Rng) -> DecisionTree {
    let mut nodes = vec![TreeNode::Leaf { positive_fraction: 0.0 }];
    let mut stack = vec![(0usize, sample)];
    let mut features: Vec<usize> = (0..dim).collect();
    let mut column: Vec<(f32, bool)> = Vec::new();
    while let Some((slot, members)) = stack.pop() {
        let positives = members.iter().filter(|&&i| y[i as usize]).count();
        let fraction = positives as f64 / members.len() as f64;
        if positives == 0 || positives == members.len() {
            nodes[slot] = TreeNode::Leaf { positive_fraction: fraction };
            continue;
        }
        // Draw features without replacement until `mtry` non-constant ones
        // have been evaluated.
        let mut best: Option<(f64, usize, f32)> = None;
        let mut evaluated = 0;
        for k in 0..dim {
            if evaluated == mtry {
                break;
            }
            let j = rng.random_range(k..dim);
            features.swap(k, j);
            let f = features[k];
            column.clear();
            column.extend(members.iter().map(|&i| (x[i as usize * dim + f], y[i as usize])));
            column.sort_by(|a, b| a.0.total_cmp(&b.0));
            if column[0].0 == column[column.len() - 1].0 {
                continue;
            }
            evaluated += 1;
            let n = column.len() as f64;
            let total_pos = positives as f64;
            let mut left_pos = 0f64;
            for i in 0..column.len() - 1 {
                if column[i].1 {
                    left_pos += 1.0;
                }
                if column[i].0 == column[i + 1].0 {
                    continue;
                }
                let nl = (i + 1) as f64;
                let nr = n - nl;
                let right_pos = total_pos - left_pos;
                let gini_l = 1.0 - (left_pos / nl).powi(2) - ((nl - left_pos) / nl).powi(2);
                let gini_r = 1.0 - (right_pos / nr).powi(2) - ((nr - right_pos) / nr).powi(2);
                let impurity = nl * gini_l + nr * gini_r;
                if best.is_none_or(|(b, _, _)| impurity < b) {
                    let (a, b) = (column[i].0, column[i + 1].0);
                    let mut threshold = ((a as f64 + b as f64) / 2.0) as f32;
                    if threshold >= b {
                        threshold = a;
                    }
                    best = Some((impurity, f, threshold));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            nodes[slot] = TreeNode::Leaf { positive_fraction: fraction };
            continue;
        };
        let (left, right): (Vec<u32>, Vec<u32>) =
            members.iter().partition(|&&i| x[i as usize * dim + feature] <= threshold);
        let (l, r) = (nodes.len(), nodes.len() + 1);
        nodes.push(TreeNode::Leaf { positive_fraction: 0.0 });
        nodes.push(TreeNode::Leaf { positive_fraction: 0.0 });
        nodes[slot] = TreeNode::Split { feature: feature as u32, threshold, left: l as u32, right: r as u32 };
        stack.push((r, right));
        stack.push((l, left));
    }
    DecisionTree { nodes }
}

/// One representative per density cluster of the positives: the member
/// nearest the cluster centroid. With no clusters, the positive nearest the
/// overall centroid. Ties go to the smaller frame.
pub fn compute_representatives(concept: &str, positives: &BTreeSet<FrameRef>, source: &dyn FrameSource) -> Result<Vec<FrameRef>> {
    if positives.is_empty() {
        return Err(Error::NoPositives(concept.to_string()));
    }
    let refs: Vec<FrameRef> = positives.iter().cloned().collect();
    let embeddings = source.embeddings(&refs)?;
    let points: Vec<&[f32]> = embeddings.iter().map(Embedding::as_slice).collect();
    let clustering = dbscan(&points, default_eps(&points), DEFAULT_MIN_PTS)?;
    let groups: Vec<Vec<usize>> = if clustering.n_clusters() == 0 {
        vec![(0..refs.len()).collect()]
    } else {
        (0..clustering.n_clusters()).map(|c| clustering.members(c)).collect()
    };
    Ok(groups.iter().map(|g| refs[nearest_to_centroid(&points, g)].clone()).collect())
}

fn nearest_to_centroid(points: &[&[f32]], members: &[usize]) -> usize {
    let dim = points[members[0]].len();
    let mut centroid = vec![0f64; dim];
    for &m in members {
        for (c, &v) in centroid.iter_mut().zip(points[m]) {
            *c += v as f64;
        }
    }
    let centroid: Vec<f32> = centroid.into_iter().map(|c| (c / members.len() as f64) as f32).collect();
    let mut best = (f32::INFINITY, members[0]);
    for &m in members {
        let d = squared_l2(points[m], &centroid);
        if d < best.0 {
            best = (d, m);
        }
    }
    best.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledFrame {
    #[serde(flatten)]
    pub frame: FrameRef,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingCounts {
    pub positives: usize,
    pub explicit_negatives: usize,
    pub random_negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeVersion {
    pub concept: String,
    pub version: u32,
    pub created_at: DateTime<Utc>,
    pub seed: u64,
    pub training_digest: String,
    pub training_counts: TrainingCounts,
    /// Effective labels when this version was trained.
    pub labeled: Vec<LabeledFrame>,
    pub representatives: Vec<FrameRef>,
    /// Mean absolute change in likelihood from the previous version over
    /// this version's labelled frames.
    pub convergence_delta: Option<f64>,
    #[serde(skip)]
    pub forest: Forest,
}

impl Default for Forest {
    fn default() -> Self {
        Self { dim: 0, params: ForestParams::default(), trees: Vec::new() }
    }
}

impl PrototypeVersion {
    pub fn predict(&self, embeddings: &[Embedding]) -> Result<Vec<f64>> {
        self.forest.predict(embeddings)
    }

    pub fn labeled_refs(&self) -> Vec<FrameRef> {
        self.labeled.iter().map(|l| l.frame.clone()).collect()
    }
}

pub fn predict(version: &PrototypeVersion, embeddings: &[Embedding]) -> Result<Vec<f64>> {
    version.predict(embeddings)
}

pub fn classify_day(version: &PrototypeVersion, day: &DayFrameSet) -> Result<BTreeMap<FrameRef, f64>> {
    if day.dim() != version.forest.dim {
        return Err(Error::DimMismatch { expected: version.forest.dim, actual: day.dim() });
    }
    day.iter().map(|(r, v)| Ok((r.clone(), version.forest.predict_one(v)?))).collect()
}

/// All versions of one concept, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub concept: String,
    pub versions: Vec<Arc<PrototypeVersion>>,
}

impl Prototype {
    pub fn latest(&self) -> Option<&Arc<PrototypeVersion>> {
        self.versions.last()
    }

    pub fn version(&self, v: u32) -> Option<&Arc<PrototypeVersion>> {
        self.versions.iter().find(|x| x.version == v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionSummary {
    pub version: u32,
    pub created_at: DateTime<Utc>,
    pub convergence_delta: Option<f64>,
    pub representatives: Vec<FrameRef>,
    pub labeled: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub concept: String,
    pub versions: Vec<VersionSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainParams {
    pub seed: u64,
    pub forest: ForestParams,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self { seed: 0, forest: ForestParams::default() }
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    #[serde(flatten)]
    version: PrototypeVersion,
}

/// Annotation log plus trained prototypes, persisted under one directory.
#[derive(Debug)]
pub struct PrototypeStore {
    root: Option<PathBuf>,
    log: AnnotationLog,
    prototypes: RwLock<BTreeMap<String, Prototype>>,
    training: Mutex<BTreeSet<String>>,
}

struct TrainingGuard<'a> {
    set: &'a Mutex<BTreeSet<String>>,
    concept: String,
}

impl Drop for TrainingGuard<'_> {
    fn drop(&mut self) {
        self.set.lock().remove(&self.concept);
    }
}

impl PrototypeStore {
    pub fn in_memory() -> Self {
        Self {
            root: None,
            log: AnnotationLog::in_memory(),
            prototypes: RwLock::new(BTreeMap::new()),
            training: Mutex::new(BTreeSet::new()),
        }
    }

    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("prototypes"))?;
        let log = AnnotationLog::open(root.join(ANNOTATION_LOG))?;
        let mut prototypes = BTreeMap::new();
        for entry in fs::read_dir(root.join("prototypes"))? {
            let dir = entry?.path();
            if !dir.is_dir() {
                continue;
            }
            let concept = dir.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            validate_concept(&concept)?;
            let mut versions = Vec::new();
            for v in fs::read_dir(&dir)? {
                let vdir = v?.path();
                if vdir.join("manifest.json").exists() {
                    versions.push(Arc::new(load_version(&vdir)?));
                }
            }
            versions.sort_by_key(|v| v.version);
            if !versions.is_empty() {
                prototypes.insert(concept.clone(), Prototype { concept, versions });
            }
        }
        Ok(Self { root: Some(root), log, prototypes: RwLock::new(prototypes), training: Mutex::new(BTreeSet::new()) })
    }

    pub fn log(&self) -> &AnnotationLog {
        &self.log
    }

    pub fn record_annotation(&self, user: &str, concept: &str, refs: &[FrameRef], polarity: Polarity, source: &dyn FrameSource) -> Result<u64> {
        self.log.record(user, concept, refs, polarity, source)
    }

    pub fn assemble(&self, concept: &str, source: &dyn FrameSource, seed: u64) -> Result<TrainingSet> {
        assemble_training_set(concept, &self.log.labels(concept), source, seed)
    }

    pub fn concepts(&self) -> Vec<String> {
        self.prototypes.read().keys().cloned().collect()
    }

    pub fn prototype(&self, concept: &str) -> Result<Prototype> {
        self.prototypes.read().get(concept).cloned().ok_or_else(|| Error::UnknownConcept(concept.to_string()))
    }

    pub fn latest(&self, concept: &str) -> Result<Arc<PrototypeVersion>> {
        self.prototype(concept)?.latest().cloned().ok_or_else(|| Error::Untrained(concept.to_string()))
    }

    pub fn is_training(&self, concept: &str) -> bool {
        self.training.lock().contains(concept)
    }

    /// Trains and stores the next version of `concept`. Only one training
    /// run per concept may be active.
    pub fn train(&self, concept: &str, source: &dyn FrameSource, params: &TrainParams) -> Result<Arc<PrototypeVersion>> {
        validate_concept(concept)?;
        if !self.training.lock().insert(concept.to_string()) {
            return Err(Error::TrainingInProgress(concept.to_string()));
        }
        let _guard = TrainingGuard { set: &self.training, concept: concept.to_string() };

        let labels = self.log.labels(concept);
        let set = assemble_training_set(concept, &labels, source, params.seed)?;
        let mut rows = Vec::with_capacity(set.len());
        let mut y = Vec::with_capacity(set.len());
        for (group, positive) in [(&set.positives, true), (&set.explicit_negatives, false), (&set.random_negatives, false)] {
            rows.extend(group.iter().cloned());
            y.extend(std::iter::repeat_n(positive, group.len()));
        }
        let embeddings = source.embeddings(&rows)?;
        let x: Vec<f32> = embeddings.iter().flat_map(|e| e.as_slice().iter().copied()).collect();
        let forest = Forest::fit(&x, source.dim(), &y, &params.forest)?;
        let representatives = compute_representatives(concept, &set.positives, source)?;

        let labeled: Vec<LabeledFrame> =
            labels.iter().map(|(r, p)| LabeledFrame { frame: r.clone(), polarity: *p }).collect();
        let previous = self.prototypes.read().get(concept).and_then(|p| p.latest().cloned());
        let convergence_delta = match &previous {
            Some(prev) => {
                let refs: Vec<FrameRef> = labels.keys().cloned().collect();
                Some(convergence_delta(&prev.forest, &forest, &source.embeddings(&refs)?)?)
            }
            None => None,
        };
        let version = PrototypeVersion {
            concept: concept.to_string(),
            version: previous.as_ref().map_or(1, |p| p.version + 1),
            created_at: Utc::now(),
            seed: params.seed,
            training_digest: set.digest(),
            training_counts: TrainingCounts {
                positives: set.positives.len(),
                explicit_negatives: set.explicit_negatives.len(),
                random_negatives: set.random_negatives.len(),
            },
            labeled,
            representatives,
            convergence_delta,
            forest,
        };
        if let Some(root) = &self.root {
            save_version(&root.join("prototypes").join(concept).join(format!("v{}", version.version)), &version)?;
        }
        let version = Arc::new(version);
        self.prototypes
            .write()
            .entry(concept.to_string())
            .or_insert_with(|| Prototype { concept: concept.to_string(), versions: Vec::new() })
            .versions
            .push(version.clone());
        Ok(version)
    }

    pub fn model_summary(&self, concept: &str) -> Result<ModelSummary> {
        let p = self.prototype(concept)?;
        Ok(ModelSummary {
            concept: concept.to_string(),
            versions: p
                .versions
                .iter()
                .map(|v| VersionSummary {
                    version: v.version,
                    created_at: v.created_at,
                    convergence_delta: v.convergence_delta,
                    representatives: v.representatives.clone(),
                    labeled: v.labeled.len(),
                })
                .collect(),
        })
    }
}

/// Mean absolute difference between two forests' likelihoods.
pub fn convergence_delta(previous: &Forest, current: &Forest, embeddings: &[Embedding]) -> Result<f64> {
    if embeddings.is_empty() {
        return Ok(0.0);
    }
    let a = previous.predict(embeddings)?;
    let b = current.predict(embeddings)?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn save_version(dir: &Path, version: &PrototypeVersion) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join("forest.json"), &serde_json::to_vec(&version.forest)?)?;
    let manifest = Manifest { format_version: PROTOTYPE_FORMAT_VERSION, version: version.clone() };
    write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)
}

fn load_version(dir: &Path) -> Result<PrototypeVersion> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.format_version != PROTOTYPE_FORMAT_VERSION {
        return Err(Error::VersionMismatch { expected: PROTOTYPE_FORMAT_VERSION, found: manifest.format_version });
    }
    let forest: Forest = serde_json::from_slice(&fs::read(dir.join("forest.json"))?)?;
    let trees = forest.trees.into_iter().map(|t| DecisionTree::new(t.nodes)).collect::<Result<Vec<_>>>()?;
    let mut version = manifest.version;
    version.forest = Forest { dim: forest.dim, params: forest.params, trees };
    Ok(version)
}
