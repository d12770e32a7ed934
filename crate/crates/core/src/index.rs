//! Approximate nearest-neighbour search over frame embeddings.
//!
//! A layered proximity graph (HNSW): every node lives on layer 0, and a
//! geometrically shrinking subset also lives on higher layers which act as
//! express lanes. Queries descend greedily from the top layer and finish with
//! a beam search on layer 0. The graph is built once, sequentially and
//! deterministically for a given seed, and is immutable afterwards, so any
//! number of threads may query it.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{squared_l2, Embedding, FrameRef};

pub const INDEX_MAGIC: &[u8; 4] = b"URIX";
pub const INDEX_VERSION: u32 = 1;
const MAX_LEVEL: u8 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexParams {
    /// Links per node on the upper layers; layer 0 keeps twice as many.
    pub max_degree: usize,
    /// Beam width while inserting.
    pub ef_construction: usize,
    /// Minimum beam width while querying; the effective beam is
    /// `max(ef_search, k)`.
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for IndexParams {
    fn default() -> Self {
        Self { max_degree: 16, ef_construction: 200, ef_search: 200, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IndexScope {
    SensorYear { sensor_id: String, year: i32 },
    Explicit,
}

/// One search result. Serialises flat: `{sensor, clip_start, frame_index, distance}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    #[serde(flatten)]
    pub frame: FrameRef,
    pub distance: f32,
}

#[derive(Clone, Copy, PartialEq)]
struct Scored {
    dist: f32,
    id: u32,
}

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Generation-stamped visited marks, reused across searches.
struct Visited {
    marks: Vec<u32>,
    generation: u32,
}

impl Visited {
    fn new(n: usize) -> Self {
        Self { marks: vec![0; n], generation: 0 }
    }

    fn reset(&mut self, n: usize) {
        if self.marks.len() < n {
            self.marks.resize(n, 0);
        }
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.marks.iter_mut().for_each(|m| *m = 0);
            self.generation = 1;
        }
    }

    /// Marks `id`; returns false if it was already marked.
    #[inline]
    fn insert(&mut self, id: u32) -> bool {
        let slot = &mut self.marks[id as usize];
        if *slot == self.generation {
            false
        } else {
            *slot = self.generation;
            true
        }
    }
}

/// An immutable nearest-neighbour index over a fixed set of frames.
pub struct SimilarityIndex {
    scope: IndexScope,
    params: IndexParams,
    dim: usize,
    refs: Vec<FrameRef>,
    vectors: Vec<f32>,
    levels: Vec<u8>,
    /// Layer-0 adjacency, `layer0_cap` slots per node.
    layer0: Vec<u32>,
    layer0_len: Vec<u8>,
    /// Adjacency for layers >= 1, keyed by node; `upper[node][l - 1]`.
    upper: BTreeMap<u32, Vec<Vec<u32>>>,
    entry: u32,
    max_level: u8,
    visited: Mutex<Vec<Visited>>,
}

impl std::fmt::Debug for SimilarityIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimilarityIndex")
            .field("scope", &self.scope)
            .field("params", &self.params)
            .field("dim", &self.dim)
            .field("count", &self.refs.len())
            .field("max_level", &self.max_level)
            .finish()
    }
}

impl SimilarityIndex {
    /// Builds an index over `frames`. Frames are inserted in the given order.
    pub fn build<'a, I>(frames: I, params: IndexParams, scope: IndexScope) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a FrameRef, &'a [f32])>,
    {
        if params.max_degree < 2 || params.ef_construction == 0 || params.ef_search == 0 {
            return Err(Error::InvalidParam("index degree must be >= 2 and beams >= 1".into()));
        }
        let mut refs = Vec::new();
        let mut vectors = Vec::new();
        let mut dim = 0;
        for (r, v) in frames {
            if refs.is_empty() {
                dim = v.len();
                if dim == 0 {
                    return Err(Error::Empty("embedding"));
                }
            } else if v.len() != dim {
                return Err(Error::DimMismatch { expected: dim, actual: v.len() });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite);
            }
            refs.push(r.clone());
            vectors.extend_from_slice(v);
        }
        if refs.is_empty() {
            return Err(Error::Empty("index input"));
        }
        if refs.len() > u32::MAX as usize {
            return Err(Error::InvalidParam("too many frames for one index".into()));
        }
        let n = refs.len();
        let cap = 2 * params.max_degree;
        let mut index = SimilarityIndex {
            scope,
            params,
            dim,
            refs,
            vectors,
            levels: vec![0; n],
            layer0: vec![0; n * cap],
            layer0_len: vec![0; n],
            upper: BTreeMap::new(),
            entry: 0,
            max_level: 0,
            visited: Mutex::new(Vec::new()),
        };

        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let level_mult = 1.0 / (params.max_degree as f64).ln();
        let mut visited = Visited::new(n);
        for id in 0..n as u32 {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            let level = ((-u.ln() * level_mult).floor() as u8).min(MAX_LEVEL);
            index.insert(id, level, &mut visited);
        }
        Ok(index)
    }

    fn insert(&mut self, id: u32, level: u8, visited: &mut Visited) {
        self.levels[id as usize] = level;
        if level > 0 {
            self.upper.insert(id, vec![Vec::new(); level as usize]);
        }
        if id == 0 {
            self.entry = 0;
            self.max_level = level;
            return;
        }
        let query = self.vector(id).to_vec();
        let mut ep = vec![Scored { dist: self.dist_to(&query, self.entry), id: self.entry }];
        let mut layer = self.max_level;
        while layer > level {
            ep = vec![self.greedy(&query, ep[0], layer)];
            layer -= 1;
        }
        let top = level.min(self.max_level);
        for layer in (0..=top).rev() {
            let found = self.search_layer(&query, &ep, self.params.ef_construction, layer, visited);
            let degree = self.params.max_degree;
            let chosen = self.select_neighbors(&found, degree);
            self.set_links(id, layer, chosen.iter().map(|s| s.id).collect());
            for s in &chosen {
                self.link_back(s.id, id, s.dist, layer);
            }
            ep = found;
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry = id;
        }
    }

    /// Neighbour-diversity heuristic: keep a candidate only if it is closer
    /// to the base point than to every neighbour kept so far.
    fn select_neighbors(&self, candidates: &[Scored], m: usize) -> Vec<Scored> {
        let mut sorted = candidates.to_vec();
        sorted.sort();
        let mut kept: Vec<Scored> = Vec::with_capacity(m);
        for c in sorted {
            if kept.len() >= m {
                break;
            }
            let cv = self.vector(c.id);
            if kept.iter().all(|k| squared_l2(cv, self.vector(k.id)) > c.dist) {
                kept.push(c);
            }
        }
        kept
    }

    fn link_back(&mut self, node: u32, new: u32, dist: f32, layer: u8) {
        let cap = self.layer_cap(layer);
        let mut links = self.links(node, layer).to_vec();
        if links.len() < cap {
            links.push(new);
            self.set_links(node, layer, links);
            return;
        }
        let base = self.vector(node).to_vec();
        let mut candidates: Vec<Scored> = links
            .iter()
            .map(|&l| Scored { dist: self.dist_to(&base, l), id: l })
            .collect();
        candidates.push(Scored { dist, id: new });
        let kept = self.select_neighbors(&candidates, cap);
        self.set_links(node, layer, kept.iter().map(|s| s.id).collect());
    }

    fn layer_cap(&self, layer: u8) -> usize {
        if layer == 0 {
            2 * self.params.max_degree
        } else {
            self.params.max_degree
        }
    }

    fn links(&self, node: u32, layer: u8) -> &[u32] {
        if layer == 0 {
            let cap = 2 * self.params.max_degree;
            let start = node as usize * cap;
            &self.layer0[start..start + self.layer0_len[node as usize] as usize]
        } else {
            &self.upper[&node][layer as usize - 1]
        }
    }

    fn set_links(&mut self, node: u32, layer: u8, links: Vec<u32>) {
        if layer == 0 {
            let cap = 2 * self.params.max_degree;
            let start = node as usize * cap;
            self.layer0[start..start + links.len()].copy_from_slice(&links);
            self.layer0_len[node as usize] = links.len() as u8;
        } else {
            self.upper.get_mut(&node).expect("node has upper layers")[layer as usize - 1] = links;
        }
    }

    #[inline]
    fn dist_to(&self, query: &[f32], id: u32) -> f32 {
        squared_l2(query, self.vector(id))
    }

    fn greedy(&self, query: &[f32], mut best: Scored, layer: u8) -> Scored {
        loop {
            let mut improved = false;
            for &n in self.links(best.id, layer) {
                let d = self.dist_to(query, n);
                let cand = Scored { dist: d, id: n };
                if cand < best {
                    best = cand;
                    improved = true;
                }
            }
            if !improved {
                return best;
            }
        }
    }

    /// Beam search on one layer; returns up to `ef` closest nodes found.
    fn search_layer(&self, query: &[f32], entry: &[Scored], ef: usize, layer: u8, visited: &mut Visited) -> Vec<Scored> {
        visited.reset(self.refs.len());
        let mut candidates: BinaryHeap<Reverse<Scored>> = BinaryHeap::with_capacity(ef * 2);
        let mut results: BinaryHeap<Scored> = BinaryHeap::with_capacity(ef + 1);
        for &e in entry {
            if visited.insert(e.id) {
                candidates.push(Reverse(e));
                results.push(e);
            }
        }
        while results.len() > ef {
            results.pop();
        }
        while let Some(Reverse(current)) = candidates.pop() {
            let worst = results.peek().map_or(f32::INFINITY, |w| w.dist);
            if current.dist > worst && results.len() >= ef {
                break;
            }
            for &n in self.links(current.id, layer) {
                if !visited.insert(n) {
                    continue;
                }
                let d = self.dist_to(query, n);
                let worst = results.peek().map_or(f32::INFINITY, |w| w.dist);
                if results.len() < ef || d < worst {
                    let s = Scored { dist: d, id: n };
                    candidates.push(Reverse(s));
                    results.push(s);
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        results.into_vec()
    }

    /// Candidate pool of `max(ef_search, k)` nodes, as `(node id, squared
    /// distance)` sorted ascending with frame order breaking ties.
    fn candidate_pool(&self, query: &[f32], k: usize) -> Result<Vec<Scored>> {
        if k == 0 {
            return Err(Error::InvalidParam("k must be at least 1".into()));
        }
        if query.len() != self.dim {
            return Err(Error::DimMismatch { expected: self.dim, actual: query.len() });
        }
        if query.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        let ef = self.params.ef_search.max(k);
        let mut visited = self.visited.lock().pop().unwrap_or_else(|| Visited::new(self.refs.len()));
        let mut ep = Scored { dist: self.dist_to(query, self.entry), id: self.entry };
        for layer in (1..=self.max_level).rev() {
            ep = self.greedy(query, ep, layer);
        }
        let mut pool = self.search_layer(query, &[ep], ef, 0, &mut visited);
        self.visited.lock().push(visited);
        pool.sort_by(|a, b| {
            a.dist.total_cmp(&b.dist).then_with(|| self.refs[a.id as usize].cmp(&self.refs[b.id as usize]))
        });
        Ok(pool)
    }

    /// Up to `k` nearest frames, ascending by distance. With a filter, the
    /// candidate pool is restricted to frames satisfying it.
    pub fn knn_query(&self, query: &Embedding, k: usize, filter: Option<&dyn Fn(&FrameRef) -> bool>) -> Result<Vec<Hit>> {
        Ok(self
            .knn_ids(query.as_slice(), k, filter)?
            .into_iter()
            .map(|(id, distance)| Hit { frame: self.refs[id as usize].clone(), distance })
            .collect())
    }

    /// Like [`knn_query`](Self::knn_query) but returns internal node ids, so
    /// callers can read the stored vectors without a corpus lookup.
    pub fn knn_ids(&self, query: &[f32], k: usize, filter: Option<&dyn Fn(&FrameRef) -> bool>) -> Result<Vec<(u32, f32)>> {
        let pool = self.candidate_pool(query, k)?;
        Ok(pool
            .into_iter()
            .filter(|s| filter.is_none_or(|f| f(&self.refs[s.id as usize])))
            .take(k)
            .map(|s| (s.id, s.dist.sqrt()))
            .collect())
    }

    pub fn scope(&self) -> &IndexScope {
        &self.scope
    }

    pub fn params(&self) -> IndexParams {
        self.params
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn frame_ref(&self, id: u32) -> &FrameRef {
        &self.refs[id as usize]
    }

    pub fn refs(&self) -> &[FrameRef] {
        &self.refs
    }

    pub fn vector(&self, id: u32) -> &[f32] {
        let start = id as usize * self.dim;
        &self.vectors[start..start + self.dim]
    }

    /// Node id of a frame, by linear scan.
    pub fn position(&self, frame: &FrameRef) -> Option<u32> {
        self.refs.iter().position(|r| r == frame).map(|p| p as u32)
    }

    /// Writes the index as `URIX` header, body and a trailing SHA-256 of
    /// everything before it.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut body = Vec::with_capacity(self.vectors.len() * 4 + self.layer0.len() * 4 + self.refs.len() * 16);
        body.extend_from_slice(INDEX_MAGIC);
        put_u32(&mut body, INDEX_VERSION);
        put_u32(&mut body, self.dim as u32);
        put_u64(&mut body, self.refs.len() as u64);
        put_u32(&mut body, self.params.max_degree as u32);
        put_u32(&mut body, self.params.ef_construction as u32);
        put_u32(&mut body, self.params.ef_search as u32);
        put_u64(&mut body, self.params.seed);
        let scope = serde_json::to_vec(&self.scope)?;
        put_u32(&mut body, scope.len() as u32);
        body.extend_from_slice(&scope);
        put_u32(&mut body, self.entry);
        body.push(self.max_level);

        let mut sensors: Vec<&str> = self.refs.iter().map(|r| r.sensor_id.as_str()).collect();
        sensors.sort_unstable();
        sensors.dedup();
        put_u32(&mut body, sensors.len() as u32);
        for s in &sensors {
            put_u32(&mut body, s.len() as u32);
            body.extend_from_slice(s.as_bytes());
        }
        for r in &self.refs {
            let si = sensors.binary_search(&r.sensor_id.as_str()).expect("sensor listed");
            put_u32(&mut body, si as u32);
            body.extend_from_slice(&r.clip_start.to_le_bytes());
            body.push(r.frame_index);
        }
        for v in &self.vectors {
            body.extend_from_slice(&v.to_le_bytes());
        }
        body.extend_from_slice(&self.levels);
        body.extend_from_slice(&self.layer0_len);
        for (node, len) in self.layer0_len.iter().enumerate() {
            for &l in self.links(node as u32, 0).iter().take(*len as usize) {
                put_u32(&mut body, l);
            }
        }
        for lists in self.upper.values() {
            for list in lists {
                put_u32(&mut body, list.len() as u32);
                for &l in list {
                    put_u32(&mut body, l);
                }
            }
        }
        let digest = Sha256::digest(&body);
        let tmp = path.with_extension("urix.tmp");
        {
            let mut out = BufWriter::new(fs::File::create(&tmp)?);
            out.write_all(&body)?;
            out.write_all(&digest)?;
            out.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() < 4 || &bytes[..4] != INDEX_MAGIC {
            return Err(Error::BadMagic(path.to_path_buf()));
        }
        let corrupt = |what: &str| Error::Corrupt(format!("{}: {what}", path.display()));
        if bytes.len() < 8 + 32 {
            return Err(corrupt("truncated"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != INDEX_VERSION {
            return Err(Error::VersionMismatch { expected: INDEX_VERSION, found: version });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut rd = Reader { buf: body, pos: 8 };
        let dim = rd.u32()? as usize;
        let n = rd.u64()? as usize;
        let params = IndexParams {
            max_degree: rd.u32()? as usize,
            ef_construction: rd.u32()? as usize,
            ef_search: rd.u32()? as usize,
            seed: rd.u64()?,
        };
        let scope_len = rd.u32()? as usize;
        let scope: IndexScope = serde_json::from_slice(rd.take(scope_len)?)?;
        let entry = rd.u32()?;
        let max_level = rd.take(1)?[0];
        let n_sensors = rd.u32()? as usize;
        let mut sensors = Vec::with_capacity(n_sensors);
        for _ in 0..n_sensors {
            let len = rd.u32()? as usize;
            let s = std::str::from_utf8(rd.take(len)?).map_err(|_| corrupt("sensor name"))?;
            sensors.push(s.to_string());
        }
        let mut refs = Vec::with_capacity(n);
        for _ in 0..n {
            let si = rd.u32()? as usize;
            let clip_start = rd.i64()?;
            let frame_index = rd.take(1)?[0];
            let sensor = sensors.get(si).ok_or_else(|| corrupt("sensor index"))?;
            refs.push(FrameRef::new(sensor.clone(), clip_start, frame_index)?);
        }
        let vectors: Vec<f32> = rd
            .take(n * dim * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let levels = rd.take(n)?.to_vec();
        let layer0_len = rd.take(n)?.to_vec();
        let cap = 2 * params.max_degree;
        let mut layer0 = vec![0u32; n * cap];
        for (node, &len) in layer0_len.iter().enumerate() {
            if len as usize > cap {
                return Err(corrupt("layer-0 degree"));
            }
            for slot in 0..len as usize {
                layer0[node * cap + slot] = rd.u32()?;
            }
        }
        let mut upper = BTreeMap::new();
        for (node, &level) in levels.iter().enumerate() {
            if level == 0 {
                continue;
            }
            let mut lists = Vec::with_capacity(level as usize);
            for _ in 0..level {
                let len = rd.u32()? as usize;
                let list: Result<Vec<u32>> = (0..len).map(|_| rd.u32()).collect();
                lists.push(list?);
            }
            upper.insert(node as u32, lists);
        }
        if rd.pos != body.len() || n == 0 || entry as usize >= n {
            return Err(corrupt("trailing or inconsistent data"));
        }
        let all_links_valid = layer0.iter().all(|&l| (l as usize) < n)
            && upper.values().flatten().flatten().all(|&l| (l as usize) < n);
        if !all_links_valid {
            return Err(corrupt("link out of range"));
        }
        Ok(SimilarityIndex {
            scope,
            params,
            dim,
            refs,
            vectors,
            levels,
            layer0,
            layer0_len,
            upper,
            entry,
            max_level,
            visited: Mutex::new(Vec::new()),
        })
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let out = &self.buf[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Corrupt("index truncated".into())),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Exact top-`k` by Euclidean distance; equal distances are ordered by
/// `(clip_start, frame_index)`.
pub fn brute_force_knn<'a, I>(frames: I, query: &[f32], k: usize) -> Result<Vec<Hit>>
where
    I: IntoIterator<Item = (&'a FrameRef, &'a [f32])>,
{
    let mut all = Vec::new();
    for (r, v) in frames {
        if v.len() != query.len() {
            return Err(Error::DimMismatch { expected: query.len(), actual: v.len() });
        }
        all.push((squared_l2(query, v), r));
    }
    if all.is_empty() {
        return Err(Error::Empty("frame set"));
    }
    if k == 0 {
        return Err(Error::InvalidParam("k must be at least 1".into()));
    }
    let cmp = |a: &(f32, &FrameRef), b: &(f32, &FrameRef)| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1));
    if all.len() > k {
        all.select_nth_unstable_by(k - 1, cmp);
        all.truncate(k);
    }
    all.sort_by(cmp);
    Ok(all.into_iter().map(|(d, r)| Hit { frame: r.clone(), distance: d.sqrt() }).collect())
}
