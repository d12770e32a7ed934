//! Query modes, hit sets and the summaries built from them.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::index::{IndexParams, IndexScope, SimilarityIndex};
use crate::prototype::PrototypeVersion;
use crate::types::{day_start, ClipId, Embedding, FrameRef, FrameSource, FRAMES_PER_CLIP};

pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_NEIGHBOURS_PER_REPRESENTATIVE: usize = 2000;
pub const SLICES_PER_DAY: usize = 4;
const SECONDS_PER_SLICE: i64 = 6 * 3600;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuerySource {
    ExampleFrame { frame: FrameRef },
    UploadedFrame,
    PrototypeConcept { concept: String, version: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Euclidean distance, ascending.
    Distance,
    /// Prototype likelihood, descending.
    Likelihood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredFrame {
    #[serde(flatten)]
    pub frame: FrameRef,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitSet {
    pub source: QuerySource,
    pub score: ScoreKind,
    pub hits: Vec<ScoredFrame>,
}

impl HitSet {
    pub fn frames(&self) -> impl Iterator<Item = &FrameRef> {
        self.hits.iter().map(|h| &h.frame)
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }
}

/// The per-sensor-year indices a query runs over.
#[derive(Debug, Clone, Default)]
pub struct IndexSet {
    indices: Vec<Arc<SimilarityIndex>>,
}

pub fn index_file_name(sensor_id: &str, year: i32) -> String {
    format!("{sensor_id}-{year}.urix")
}

impl IndexSet {
    pub fn new(indices: Vec<Arc<SimilarityIndex>>) -> Self {
        Self { indices }
    }

    /// Loads every `*.urix` file in `dir`, in file-name order.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = match fs::read_dir(dir) {
            Ok(entries) => entries
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<Vec<_>>>()?
                .into_iter()
                .filter(|p| p.extension().is_some_and(|e| e == "urix"))
                .collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        paths.sort();
        let indices = paths.iter().map(|p| SimilarityIndex::load(p).map(Arc::new)).collect::<Result<_>>()?;
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &[Arc<SimilarityIndex>] {
        &self.indices
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    /// Indices whose scope matches; `None` matches anything.
    pub fn restrict(&self, sensor_id: Option<&str>, year: Option<i32>) -> Self {
        let indices = self
            .indices
            .iter()
            .filter(|ix| match ix.scope() {
                IndexScope::SensorYear { sensor_id: s, year: y } => {
                    sensor_id.is_none_or(|want| want == s) && year.is_none_or(|want| want == *y)
                }
                IndexScope::Explicit => sensor_id.is_none() && year.is_none(),
            })
            .cloned()
            .collect();
        Self { indices }
    }

    fn stored_vector(&self, frame: &FrameRef) -> Option<&[f32]> {
        self.indices.iter().find_map(|ix| ix.position(frame).map(|id| ix.vector(id)))
    }
}

/// Builds one index per (sensor, year) present in the corpus and writes
/// them to `dir`.
pub fn build_indices(corpus: &Corpus, params: IndexParams, dir: &Path) -> Result<Vec<(IndexScope, PathBuf)>> {
    let mut groups: BTreeMap<(String, i32), Vec<NaiveDate>> = BTreeMap::new();
    for (sensor, date) in corpus.days() {
        groups.entry((sensor, date.year())).or_default().push(date);
    }
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for ((sensor, year), dates) in groups {
        let days = dates.iter().map(|d| corpus.load_day(&sensor, *d)).collect::<Result<Vec<_>>>()?;
        let scope = IndexScope::SensorYear { sensor_id: sensor.clone(), year };
        let index = SimilarityIndex::build(days.iter().flat_map(|d| d.iter()), params, scope.clone())?;
        let path = dir.join(index_file_name(&sensor, year));
        index.save(&path)?;
        out.push((scope, path));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum QuerySeed {
    Frame(FrameRef),
    Embedding(Embedding),
}

/// Top-`n` nearest frames to `seed` over every index in `scope`.
pub fn query_by_example(seed: &QuerySeed, n: usize, scope: &IndexSet, source: &dyn FrameSource) -> Result<HitSet> {
    if n == 0 {
        return Err(Error::InvalidParam("n must be at least 1".into()));
    }
    if scope.is_empty() {
        return Err(Error::InvalidParam("no indices in scope".into()));
    }
    let (query, origin) = match seed {
        QuerySeed::Frame(f) => {
            let v = match scope.stored_vector(f) {
                Some(v) => v.to_vec(),
                None => source.embedding(f).map_err(|_| Error::UnknownFrame(f.to_string()))?.into_vec(),
            };
            (v, QuerySource::ExampleFrame { frame: f.clone() })
        }
        QuerySeed::Embedding(e) => (e.as_slice().to_vec(), QuerySource::UploadedFrame),
    };
    let mut hits: Vec<(f32, FrameRef)> = Vec::new();
    for ix in scope.indices() {
        if ix.dim() != query.len() {
            return Err(Error::DimMismatch { expected: ix.dim(), actual: query.len() });
        }
        hits.extend(ix.knn_ids(&query, n, None)?.into_iter().map(|(id, d)| (d, ix.frame_ref(id).clone())));
    }
    hits.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    hits.dedup_by(|a, b| a.1 == b.1);
    hits.truncate(n);
    Ok(HitSet {
        source: origin,
        score: ScoreKind::Distance,
        hits: hits.into_iter().map(|(d, frame)| ScoredFrame { frame, score: d as f64 }).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrototypeQuery {
    pub n: usize,
    pub tau: f64,
    /// Neighbours gathered around each representative.
    pub m: usize,
}

impl Default for PrototypeQuery {
    fn default() -> Self {
        Self { n: 100, tau: DEFAULT_TAU, m: DEFAULT_NEIGHBOURS_PER_REPRESENTATIVE }
    }
}

/// Gathers the `m` nearest frames around each representative, scores them
/// with the prototype and keeps the top `n` with likelihood at least `tau`.
pub fn query_by_prototype(version: &PrototypeVersion, q: &PrototypeQuery, scope: &IndexSet, source: &dyn FrameSource) -> Result<HitSet> {
    if q.n == 0 || q.m == 0 {
        return Err(Error::InvalidParam("n and m must be at least 1".into()));
    }
    if version.representatives.is_empty() {
        return Err(Error::NoRepresentatives(version.concept.clone()));
    }
    if scope.is_empty() {
        return Err(Error::InvalidParam("no indices in scope".into()));
    }
    let mut scored: HashMap<FrameRef, f64> = HashMap::new();
    for rep in &version.representatives {
        let seed = match scope.stored_vector(rep) {
            Some(v) => v.to_vec(),
            None => source.embedding(rep)?.into_vec(),
        };
        for ix in scope.indices() {
            for (id, _) in ix.knn_ids(&seed, q.m, None)? {
                let frame = ix.frame_ref(id);
                if !scored.contains_key(frame) {
                    scored.insert(frame.clone(), version.forest.predict_one(ix.vector(id))?);
                }
            }
        }
    }
    let mut hits: Vec<ScoredFrame> =
        scored.into_iter().filter(|(_, l)| *l >= q.tau).map(|(frame, score)| ScoredFrame { frame, score }).collect();
    hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.frame.cmp(&b.frame)));
    hits.truncate(q.n);
    Ok(HitSet {
        source: QuerySource::PrototypeConcept { concept: version.concept.clone(), version: version.version },
        score: ScoreKind::Likelihood,
        hits,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalendarCell {
    pub date: NaiveDate,
    pub total: u32,
    /// Frames in 00-06, 06-12, 12-18 and 18-24 UTC.
    pub slice_counts: [u32; SLICES_PER_DAY],
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalendarSummary {
    pub year: i32,
    pub cells: Vec<CalendarCell>,
}

/// Per-day frame counts for one year, binned by the UTC start time of each
/// frame. Frames outside the year are ignored.
pub fn calendar_summary<'a>(frames: impl IntoIterator<Item = &'a FrameRef>, year: i32) -> Result<CalendarSummary> {
    let first = NaiveDate::from_ymd_opt(year, 1, 1).ok_or_else(|| Error::InvalidParam(format!("bad year {year}")))?;
    let next = NaiveDate::from_ymd_opt(year + 1, 1, 1).ok_or_else(|| Error::InvalidParam(format!("bad year {year}")))?;
    let days = (next - first).num_days() as usize;
    let (start, end) = (day_start(first), day_start(next));
    let mut counts = vec![[0u32; SLICES_PER_DAY]; days];
    for f in frames {
        let t = f.timestamp();
        if t < start || t >= end {
            continue;
        }
        let offset = t - start;
        counts[(offset / 86_400) as usize][((offset % 86_400) / SECONDS_PER_SLICE) as usize] += 1;
    }
    let max = counts.iter().map(|c| c.iter().sum::<u32>()).max().unwrap_or(0);
    let cells = counts
        .into_iter()
        .enumerate()
        .map(|(i, slice_counts)| {
            let total = slice_counts.iter().sum::<u32>();
            CalendarCell {
                date: first + chrono::Days::new(i as u64),
                total,
                slice_counts,
                density: if max == 0 { 0.0 } else { total as f64 / max as f64 },
            }
        })
        .collect();
    Ok(CalendarSummary { year, cells })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub hour_histogram: [u32; 24],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub likelihood_histogram: Option<[u32; 10]>,
}

pub fn likelihood_bin(l: f64) -> usize {
    ((l * 10.0).floor().max(0.0) as usize).min(9)
}

/// Hour-of-day histogram of `frames`, plus a likelihood histogram under
/// `version` when one is given.
pub fn selection_summary(frames: &[FrameRef], version: Option<&PrototypeVersion>, source: &dyn FrameSource) -> Result<SelectionSummary> {
    let mut hour_histogram = [0u32; 24];
    for f in frames {
        if !source.contains(f) {
            return Err(Error::UnknownFrame(f.to_string()));
        }
        hour_histogram[f.hour() as usize] += 1;
    }
    let likelihood_histogram = match version {
        Some(v) => {
            let mut bins = [0u32; 10];
            for l in v.predict(&source.embeddings(frames)?)? {
                bins[likelihood_bin(l)] += 1;
            }
            Some(bins)
        }
        None => None,
    };
    Ok(SelectionSummary { hour_histogram, likelihood_histogram })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameClassificationMatrix {
    pub clip: String,
    pub concepts: Vec<String>,
    /// One row per frame, one column per concept.
    pub rows: Vec<Vec<f64>>,
}

/// Likelihood of every concept for each of the clip's 10 frames.
pub fn frame_classification_matrix(clip: &ClipId, versions: &[Arc<PrototypeVersion>], source: &dyn FrameSource) -> Result<FrameClassificationMatrix> {
    let frames: Vec<FrameRef> = clip.frames().collect();
    if !frames.iter().all(|f| source.contains(f)) {
        return Err(Error::UnknownClip(clip.to_string()));
    }
    let embeddings = source.embeddings(&frames)?;
    let mut rows = vec![Vec::with_capacity(versions.len()); FRAMES_PER_CLIP as usize];
    for v in versions {
        for (row, l) in rows.iter_mut().zip(v.predict(&embeddings)?) {
            row.push(l);
        }
    }
    Ok(FrameClassificationMatrix {
        clip: clip.to_string(),
        concepts: versions.iter().map(|v| v.concept.clone()).collect(),
        rows,
    })
}
