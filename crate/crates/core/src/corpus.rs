//! Frame storage: the frameset binary format, the on-disk corpus layout and
//! an in-memory frame collection.
//!
//! Layout under a corpus root:
//!
//! ```text
//! sensors.json
//! <sensor_id>/<YYYY>/<MM>/<DD>.urfs
//! <sensor_id>/audio/<clip_start>.wav      (optional)
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{Datelike, NaiveDate};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    day_start, utc, validate_sensor_id, ClipId, Embedding, Frame, FrameRef, FrameSource,
    FRAMES_PER_CLIP,
};

pub const FRAMESET_MAGIC: &[u8; 4] = b"URFS";
pub const FRAMESET_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;
const SECONDS_PER_DAY: i64 = 86_400;

fn record_len(dim: usize) -> usize {
    8 + 1 + 4 * dim
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorInfo {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    pub name: String,
}

impl SensorInfo {
    pub fn validate(&self) -> Result<()> {
        validate_sensor_id(&self.id)?;
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::InvalidParam(format!("sensor {} has invalid coordinates", self.id)));
        }
        Ok(())
    }
}

/// All frames of one sensor-day, sorted by `(clip_start, frame_index)`.
///
/// Embeddings are stored contiguously; `vector(i)` borrows row `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DayFrameSet {
    pub sensor_id: String,
    pub date: NaiveDate,
    dim: usize,
    refs: Vec<FrameRef>,
    values: Vec<f32>,
}

impl DayFrameSet {
    /// Builds a day from loose frames, sorting them and checking that they
    /// belong to `sensor_id` on `date` with a uniform dimension.
    pub fn from_frames(sensor_id: &str, date: NaiveDate, mut frames: Vec<Frame>) -> Result<Self> {
        let first = frames.first().ok_or(Error::Empty("frameset"))?;
        let dim = first.embedding.dim();
        frames.sort_by(|a, b| a.id.cmp(&b.id));
        let mut refs = Vec::with_capacity(frames.len());
        let mut values = Vec::with_capacity(frames.len() * dim);
        for frame in frames {
            if frame.id.sensor_id != sensor_id {
                return Err(Error::MixedFrameset("sensors"));
            }
            if frame.id.date() != date {
                return Err(Error::MixedFrameset("days"));
            }
            frame.embedding.check_dim(dim)?;
            if refs.last() == Some(&frame.id) {
                return Err(Error::DuplicateFrame(frame.id.to_string()));
            }
            values.extend_from_slice(frame.embedding.as_slice());
            refs.push(frame.id);
        }
        Ok(Self { sensor_id: sensor_id.to_string(), date, dim, refs, values })
    }

    /// Assembles a day from parts the caller already knows to be sorted,
    /// unique and in range.
    pub(crate) fn from_frames_unchecked(
        sensor_id: String,
        date: NaiveDate,
        dim: usize,
        refs: Vec<FrameRef>,
        values: Vec<f32>,
    ) -> Self {
        debug_assert_eq!(refs.len() * dim, values.len());
        debug_assert!(refs.windows(2).all(|w| w[0] < w[1]));
        Self { sensor_id, date, dim, refs, values }
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

    pub fn refs(&self) -> &[FrameRef] {
        &self.refs
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn embedding(&self, i: usize) -> Embedding {
        Embedding::new(self.vector(i).to_vec()).expect("stored values are finite")
    }

    /// Flat row-major embedding matrix.
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn position(&self, id: &FrameRef) -> Option<usize> {
        self.refs.binary_search(id).ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&FrameRef, &[f32])> {
        self.refs.iter().zip(self.values.chunks_exact(self.dim))
    }

    pub fn to_frames(&self) -> Vec<Frame> {
        (0..self.len()).map(|i| Frame::new(self.refs[i].clone(), self.embedding(i))).collect()
    }
}

/// Writes one sensor-day as a frameset file. Records are written in
/// `(clip_start, frame_index)` order.
pub fn write_frameset(frames: &[Frame], path: &Path) -> Result<()> {
    let first = frames.first().ok_or(Error::Empty("frameset"))?;
    let sensor = first.id.sensor_id.clone();
    let date = first.id.date();
    let day = DayFrameSet::from_frames(&sensor, date, frames.to_vec())?;
    write_day(&day, path)
}

pub(crate) fn write_day(day: &DayFrameSet, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("urfs.tmp");
    {
        let mut out = BufWriter::new(fs::File::create(&tmp)?);
        out.write_all(FRAMESET_MAGIC)?;
        out.write_all(&FRAMESET_VERSION.to_le_bytes())?;
        out.write_all(&(day.dim as u32).to_le_bytes())?;
        out.write_all(&(day.len() as u64).to_le_bytes())?;
        for (r, v) in day.iter() {
            out.write_all(&r.clip_start.to_le_bytes())?;
            out.write_all(&[r.frame_index])?;
            for x in v {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        out.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Decoded frameset file content. Sensor and date are not stored in the file;
/// they come from its location in the corpus layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FramesetRecords {
    pub dim: usize,
    pub records: Vec<(i64, u8)>,
    pub values: Vec<f32>,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<(usize, u64)> {
    if bytes.len() < 4 || &bytes[..4] != FRAMESET_MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Corrupt(format!("{}: truncated header", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FRAMESET_VERSION {
        return Err(Error::VersionMismatch { expected: FRAMESET_VERSION, found: version });
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    if dim == 0 {
        return Err(Error::Corrupt(format!("{}: zero dim", path.display())));
    }
    Ok((dim, count))
}

/// Reads `(dim, count)` from a frameset header and checks the file length.
pub fn read_frameset_header(path: &Path) -> Result<(usize, u64)> {
    let mut file = fs::File::open(path)?;
    let mut head = Vec::with_capacity(HEADER_LEN);
    (&mut file).take(HEADER_LEN as u64).read_to_end(&mut head)?;
    let (dim, count) = parse_header(&head, path)?;
    let expected = HEADER_LEN as u64 + count * record_len(dim) as u64;
    if file.metadata()?.len() != expected {
        return Err(Error::Corrupt(format!("{}: length does not match header", path.display())));
    }
    Ok((dim, count))
}

pub fn read_frameset(path: &Path) -> Result<FramesetRecords> {
    let bytes = fs::read(path)?;
    let (dim, count) = parse_header(&bytes, path)?;
    let rec = record_len(dim);
    let body = &bytes[HEADER_LEN..];
    if body.len() as u64 != count * rec as u64 {
        return Err(Error::Corrupt(format!(
            "{}: expected {count} records of {rec} bytes, found {} bytes",
            path.display(),
            body.len()
        )));
    }
    let mut records = Vec::with_capacity(count as usize);
    let mut values = Vec::with_capacity(count as usize * dim);
    for chunk in body.chunks_exact(rec) {
        let clip_start = i64::from_le_bytes(chunk[..8].try_into().unwrap());
        let frame_index = chunk[8];
        if frame_index >= FRAMES_PER_CLIP {
            return Err(Error::FrameIndexOutOfRange(frame_index as u32));
        }
        for x in chunk[9..].chunks_exact(4) {
            let v = f32::from_le_bytes(x.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::NonFinite);
            }
            values.push(v);
        }
        records.push((clip_start, frame_index));
    }
    Ok(FramesetRecords { dim, records, values })
}

/// Reads a frameset into a validated [`DayFrameSet`]: records must be sorted,
/// unique, inside `date`, and each clip must hold frames 0..9 exactly.
pub fn read_day(path: &Path, sensor_id: &str, date: NaiveDate) -> Result<DayFrameSet> {
    let raw = read_frameset(path)?;
    let start = day_start(date);
    let mut refs = Vec::with_capacity(raw.records.len());
    for &(clip_start, frame_index) in &raw.records {
        if clip_start < start || clip_start >= start + SECONDS_PER_DAY {
            return Err(Error::MixedFrameset("days"));
        }
        let r = FrameRef { sensor_id: sensor_id.to_string(), clip_start, frame_index };
        if let Some(prev) = refs.last() {
            if *prev >= r {
                return Err(Error::Corrupt(format!("{}: records not sorted or duplicated", path.display())));
            }
        }
        refs.push(r);
    }
    check_clip_completeness(&refs)?;
    Ok(DayFrameSet { sensor_id: sensor_id.to_string(), date, dim: raw.dim, refs, values: raw.values })
}

fn check_clip_completeness(sorted: &[FrameRef]) -> Result<()> {
    let mut i = 0;
    while i < sorted.len() {
        let clip = sorted[i].clip_start;
        let mut j = i;
        while j < sorted.len() && sorted[j].clip_start == clip {
            j += 1;
        }
        let complete = j - i == FRAMES_PER_CLIP as usize
            && sorted[i..j].iter().enumerate().all(|(k, r)| r.frame_index as usize == k);
        if !complete {
            return Err(Error::IncompleteClip {
                sensor: sorted[i].sensor_id.clone(),
                clip_start: clip,
                found: j - i,
            });
        }
        i = j;
    }
    Ok(())
}

/// Location of a sensor-day inside a corpus root.
pub fn day_path(root: &Path, sensor_id: &str, date: NaiveDate) -> PathBuf {
    root.join(sensor_id)
        .join(format!("{:04}", date.year()))
        .join(format!("{:02}", date.month()))
        .join(format!("{:02}.urfs", date.day()))
}

/// Recovers `(sensor, date)` from a path following the corpus layout.
pub fn parse_day_path(path: &Path) -> Result<(String, NaiveDate)> {
    let bad = || Error::PathLayout(path.to_path_buf());
    let parts: Vec<&str> = path.iter().rev().take(4).map(|p| p.to_str().unwrap_or("")).collect();
    if parts.len() != 4 {
        return Err(bad());
    }
    let day = parts[0].strip_suffix(".urfs").ok_or_else(bad)?;
    let (y, m, d): (i32, u32, u32) = (
        parts[2].parse().map_err(|_| bad())?,
        parts[1].parse().map_err(|_| bad())?,
        day.parse().map_err(|_| bad())?,
    );
    let date = NaiveDate::from_ymd_opt(y, m, d).ok_or_else(bad)?;
    validate_sensor_id(parts[3]).map_err(|_| bad())?;
    Ok((parts[3].to_string(), date))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub sensor: String,
    pub date: NaiveDate,
    pub frame_count: u64,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClipMeta {
    pub clip: ClipId,
    pub date: NaiveDate,
    pub audio_path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
struct DayEntry {
    path: PathBuf,
    count: u64,
    /// Ordinal of the first frame of this day across the whole corpus.
    offset: u64,
}

#[derive(Default)]
struct Catalog {
    dim: Option<usize>,
    days: BTreeMap<(String, NaiveDate), DayEntry>,
    total: u64,
}

impl Catalog {
    fn reindex(&mut self) {
        let mut offset = 0;
        for entry in self.days.values_mut() {
            entry.offset = offset;
            offset += entry.count;
        }
        self.total = offset;
    }
}

struct DayCache {
    capacity: usize,
    order: VecDeque<(String, NaiveDate)>,
    days: HashMap<(String, NaiveDate), Arc<DayFrameSet>>,
}

impl DayCache {
    fn get(&mut self, key: &(String, NaiveDate)) -> Option<Arc<DayFrameSet>> {
        let hit = self.days.get(key).cloned();
        if hit.is_some() {
            self.order.retain(|k| k != key);
            self.order.push_back(key.clone());
        }
        hit
    }

    fn insert(&mut self, key: (String, NaiveDate), day: Arc<DayFrameSet>) {
        if self.capacity == 0 {
            return;
        }
        if self.days.insert(key.clone(), day).is_none() {
            self.order.push_back(key);
        }
        while self.order.len() > self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.days.remove(&old);
            }
        }
    }

    fn remove(&mut self, key: &(String, NaiveDate)) {
        self.days.remove(key);
        self.order.retain(|k| k != key);
    }
}

/// An on-disk corpus of sensor-days.
///
/// Reads may run concurrently; ingestion takes the catalog write lock, so at
/// most one writer touches a given day at a time. Loaded days are returned as
/// shared immutable snapshots.
pub struct Corpus {
    root: PathBuf,
    sensors: RwLock<Vec<SensorInfo>>,
    catalog: RwLock<Catalog>,
    cache: Mutex<DayCache>,
}

const DEFAULT_CACHE_DAYS: usize = 8;

impl Corpus {
    /// Creates the root directory if needed and opens it.
    pub fn create(root: impl AsRef<Path>) -> Result<Self> {
        fs::create_dir_all(root.as_ref())?;
        Self::open(root)
    }

    /// Opens an existing corpus root, scanning the layout for ingested days.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        if !root.is_dir() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("corpus root {} does not exist", root.display()),
            )));
        }
        let sensors_path = root.join("sensors.json");
        let sensors: Vec<SensorInfo> = if sensors_path.exists() {
            serde_json::from_slice(&fs::read(&sensors_path)?)?
        } else {
            Vec::new()
        };
        let mut catalog = Catalog::default();
        for entry in fs::read_dir(&root)? {
            let sensor_dir = entry?.path();
            if !sensor_dir.is_dir() {
                continue;
            }
            for year in sorted_dirs(&sensor_dir)? {
                for month in sorted_dirs(&year)? {
                    for file in fs::read_dir(&month)? {
                        let path = file?.path();
                        if path.extension().and_then(|e| e.to_str()) != Some("urfs") {
                            continue;
                        }
                        let (sensor, date) = parse_day_path(&path)?;
                        let (dim, count) = read_frameset_header(&path)?;
                        if *catalog.dim.get_or_insert(dim) != dim {
                            return Err(Error::DimMismatch { expected: catalog.dim.unwrap(), actual: dim });
                        }
                        catalog.days.insert((sensor, date), DayEntry { path, count, offset: 0 });
                    }
                }
            }
        }
        catalog.reindex();
        Ok(Self {
            root,
            sensors: RwLock::new(sensors),
            catalog: RwLock::new(catalog),
            cache: Mutex::new(DayCache {
                capacity: DEFAULT_CACHE_DAYS,
                order: VecDeque::new(),
                days: HashMap::new(),
            }),
        })
    }

    /// Number of decoded days kept in memory.
    pub fn set_cache_capacity(&self, days: usize) {
        let mut cache = self.cache.lock();
        cache.capacity = days;
        while cache.order.len() > days {
            if let Some(old) = cache.order.pop_front() {
                cache.days.remove(&old);
            }
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn sensors(&self) -> Vec<SensorInfo> {
        self.sensors.read().clone()
    }

    /// Adds or replaces a sensor entry and rewrites `sensors.json`.
    pub fn register_sensor(&self, info: SensorInfo) -> Result<()> {
        info.validate()?;
        let mut sensors = self.sensors.write();
        match sensors.iter_mut().find(|s| s.id == info.id) {
            Some(existing) => *existing = info,
            None => sensors.push(info),
        }
        fs::write(self.root.join("sensors.json"), serde_json::to_vec_pretty(&*sensors)?)?;
        Ok(())
    }

    /// Sorted `(sensor, date)` pairs of every ingested day.
    pub fn days(&self) -> Vec<(String, NaiveDate)> {
        self.catalog.read().days.keys().cloned().collect()
    }

    pub fn days_for(&self, sensor_id: &str) -> Vec<NaiveDate> {
        self.catalog
            .read()
            .days
            .keys()
            .filter(|(s, _)| s == sensor_id)
            .map(|(_, d)| *d)
            .collect()
    }

    pub fn frames_in_day(&self, sensor_id: &str, date: NaiveDate) -> Option<u64> {
        self.catalog.read().days.get(&(sensor_id.to_string(), date)).map(|e| e.count)
    }

    fn knows_sensor(&self, sensor_id: &str) -> bool {
        self.sensors.read().iter().any(|s| s.id == sensor_id)
            || self.catalog.read().days.keys().any(|(s, _)| s == sensor_id)
    }

    /// Validates a frameset file whose path follows the corpus layout and
    /// registers it under this corpus, copying it into place if needed.
    pub fn ingest_frameset(&self, path: &Path, overwrite: bool) -> Result<IngestReport> {
        let (sensor, date) = parse_day_path(path)?;
        self.ingest_checked(path, sensor, date, overwrite)
    }

    /// Ingests a frameset from anywhere on disk for the given sensor. The
    /// day is taken from the first record.
    pub fn ingest_frameset_for(&self, path: &Path, sensor_id: &str, overwrite: bool) -> Result<IngestReport> {
        validate_sensor_id(sensor_id)?;
        let records = read_frameset(path)?;
        let first = records.records.first().ok_or(Error::Empty("frameset"))?;
        let date = utc(first.0).date_naive();
        self.ingest_checked(path, sensor_id.to_string(), date, overwrite)
    }

    fn ingest_checked(&self, path: &Path, sensor: String, date: NaiveDate, overwrite: bool) -> Result<IngestReport> {
        let day = read_day(path, &sensor, date)?;
        let key = (sensor.clone(), date);
        let dest = day_path(&self.root, &sensor, date);

        let mut catalog = self.catalog.write();
        if let Some(dim) = catalog.dim {
            if !catalog.days.is_empty() && dim != day.dim() {
                return Err(Error::DimMismatch { expected: dim, actual: day.dim() });
            }
        }
        if catalog.days.contains_key(&key) && !overwrite {
            return Err(Error::DuplicateDay { sensor, date: date.to_string() });
        }
        if !same_file(path, &dest) {
            if let Some(parent) = dest.parent() {
                fs::create_dir_all(parent)?;
            }
            let tmp = dest.with_extension("urfs.tmp");
            fs::copy(path, &tmp)?;
            fs::rename(&tmp, &dest)?;
        }
        catalog.dim = Some(day.dim());
        catalog.days.insert(key.clone(), DayEntry { path: dest, count: day.len() as u64, offset: 0 });
        catalog.reindex();
        self.cache.lock().remove(&key);
        Ok(IngestReport { sensor, date, frame_count: day.len() as u64, dim: day.dim() })
    }

    /// Every stored frame of one sensor-day.
    pub fn load_day(&self, sensor_id: &str, date: NaiveDate) -> Result<Arc<DayFrameSet>> {
        let key = (sensor_id.to_string(), date);
        if let Some(day) = self.cache.lock().get(&key) {
            return Ok(day);
        }
        let path = {
            let catalog = self.catalog.read();
            match catalog.days.get(&key) {
                Some(entry) => entry.path.clone(),
                None if !self.knows_sensor(sensor_id) => {
                    return Err(Error::UnknownSensor(sensor_id.to_string()))
                }
                None => {
                    return Err(Error::MissingDay { sensor: sensor_id.to_string(), date: date.to_string() })
                }
            }
        };
        let day = Arc::new(read_day(&path, sensor_id, date)?);
        self.cache.lock().insert(key, day.clone());
        Ok(day)
    }

    /// Embedding and clip metadata of one frame.
    pub fn get_frame(&self, id: &FrameRef) -> Result<(Embedding, ClipMeta)> {
        if id.frame_index >= FRAMES_PER_CLIP {
            return Err(Error::FrameIndexOutOfRange(id.frame_index as u32));
        }
        let day = self.load_day(&id.sensor_id, id.date()).map_err(|e| match e {
            Error::MissingDay { .. } | Error::UnknownSensor(_) => Error::UnknownFrame(id.to_string()),
            other => other,
        })?;
        let pos = day.position(id).ok_or_else(|| Error::UnknownFrame(id.to_string()))?;
        Ok((day.embedding(pos), self.clip_meta(&id.clip(), day.date)))
    }

    fn clip_meta(&self, clip: &ClipId, date: NaiveDate) -> ClipMeta {
        let audio = self.audio_path(clip);
        ClipMeta { clip: clip.clone(), date, audio_path: audio.exists().then_some(audio) }
    }

    pub fn audio_path(&self, clip: &ClipId) -> PathBuf {
        self.root.join(&clip.sensor_id).join("audio").join(format!("{}.wav", clip.clip_start))
    }

    /// The ten frames of a clip, in frame order.
    pub fn clip_frames(&self, clip: &ClipId) -> Result<Vec<Frame>> {
        let date = utc(clip.clip_start).date_naive();
        let day = self
            .load_day(&clip.sensor_id, date)
            .map_err(|_| Error::UnknownClip(clip.to_string()))?;
        clip.frames()
            .map(|r| {
                let pos = day.position(&r).ok_or_else(|| Error::UnknownClip(clip.to_string()))?;
                Ok(Frame::new(r, day.embedding(pos)))
            })
            .collect()
    }
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() && path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.parse::<u32>().is_ok()) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

impl FrameSource for Corpus {
    fn dim(&self) -> usize {
        self.catalog.read().dim.unwrap_or(0)
    }

    fn frame_count(&self) -> usize {
        self.catalog.read().total as usize
    }

    fn frame_at(&self, ordinal: usize) -> Result<FrameRef> {
        let (sensor, path, local, dim) = {
            let catalog = self.catalog.read();
            let ordinal = ordinal as u64;
            let ((sensor, _), entry) = catalog
                .days
                .iter()
                .find(|(_, e)| ordinal >= e.offset && ordinal < e.offset + e.count)
                .ok_or_else(|| Error::InvalidParam(format!("ordinal {ordinal} out of range")))?;
            (sensor.clone(), entry.path.clone(), ordinal - entry.offset, catalog.dim.unwrap_or(0))
        };
        let mut file = fs::File::open(&path)?;
        file.seek(SeekFrom::Start(HEADER_LEN as u64 + local * record_len(dim) as u64))?;
        let mut buf = [0u8; 9];
        file.read_exact(&mut buf)?;
        let clip_start = i64::from_le_bytes(buf[..8].try_into().unwrap());
        FrameRef::new(sensor, clip_start, buf[8])
    }

    fn contains(&self, id: &FrameRef) -> bool {
        self.load_day(&id.sensor_id, id.date()).is_ok_and(|d| d.position(id).is_some())
    }

    fn embedding(&self, id: &FrameRef) -> Result<Embedding> {
        self.get_frame(id).map(|(e, _)| e)
    }

    fn embeddings(&self, ids: &[FrameRef]) -> Result<Vec<Embedding>> {
        let mut by_day: BTreeMap<(String, NaiveDate), Vec<usize>> = BTreeMap::new();
        for (i, id) in ids.iter().enumerate() {
            by_day.entry((id.sensor_id.clone(), id.date())).or_default().push(i);
        }
        let mut out: Vec<Option<Embedding>> = vec![None; ids.len()];
        for ((sensor, date), positions) in by_day {
            let day = self.load_day(&sensor, date).map_err(|_| Error::UnknownFrame(ids[positions[0]].to_string()))?;
            for i in positions {
                let pos = day.position(&ids[i]).ok_or_else(|| Error::UnknownFrame(ids[i].to_string()))?;
                out[i] = Some(day.embedding(pos));
            }
        }
        Ok(out.into_iter().map(|e| e.expect("every position filled")).collect())
    }
}

impl FrameSource for DayFrameSet {
    fn dim(&self) -> usize {
        self.dim
    }

    fn frame_count(&self) -> usize {
        self.refs.len()
    }

    fn frame_at(&self, ordinal: usize) -> Result<FrameRef> {
        self.refs
            .get(ordinal)
            .cloned()
            .ok_or_else(|| Error::InvalidParam(format!("ordinal {ordinal} out of range")))
    }

    fn contains(&self, id: &FrameRef) -> bool {
        self.position(id).is_some()
    }

    fn embedding(&self, id: &FrameRef) -> Result<Embedding> {
        let i = self.position(id).ok_or_else(|| Error::UnknownFrame(id.to_string()))?;
        Ok(DayFrameSet::embedding(self, i))
    }
}

/// An in-memory frame collection, used for explicit frame lists and tests.
#[derive(Debug, Clone, Default)]
pub struct MemoryFrames {
    dim: usize,
    refs: Vec<FrameRef>,
    values: Vec<f32>,
    lookup: HashMap<FrameRef, usize>,
}

impl MemoryFrames {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        let mut out = Self::default();
        for frame in frames {
            out.push(frame)?;
        }
        Ok(out)
    }

    pub fn from_days<'a>(days: impl IntoIterator<Item = &'a DayFrameSet>) -> Result<Self> {
        let mut out = Self::default();
        for day in days {
            for (r, v) in day.iter() {
                out.push(Frame::new(r.clone(), Embedding::new(v.to_vec())?))?;
            }
        }
        Ok(out)
    }

    pub fn push(&mut self, frame: Frame) -> Result<()> {
        if self.refs.is_empty() {
            self.dim = frame.embedding.dim();
        }
        frame.embedding.check_dim(self.dim)?;
        if self.lookup.contains_key(&frame.id) {
            return Err(Error::DuplicateFrame(frame.id.to_string()));
        }
        self.lookup.insert(frame.id.clone(), self.refs.len());
        self.values.extend_from_slice(frame.embedding.as_slice());
        self.refs.push(frame.id);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn refs(&self) -> &[FrameRef] {
        &self.refs
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &FrameRef) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&FrameRef, &[f32])> {
        self.refs.iter().zip(self.values.chunks_exact(self.dim.max(1)))
    }
}

impl FrameSource for MemoryFrames {
    fn dim(&self) -> usize {
        self.dim
    }

    fn frame_count(&self) -> usize {
        self.refs.len()
    }

    fn frame_at(&self, ordinal: usize) -> Result<FrameRef> {
        self.refs
            .get(ordinal)
            .cloned()
            .ok_or_else(|| Error::InvalidParam(format!("ordinal {ordinal} out of range")))
    }

    fn contains(&self, id: &FrameRef) -> bool {
        self.lookup.contains_key(id)
    }

    fn embedding(&self, id: &FrameRef) -> Result<Embedding> {
        let i = self.position(id).ok_or_else(|| Error::UnknownFrame(id.to_string()))?;
        Embedding::new(self.vector(i).to_vec())
    }
}

/// Planted concept labels of a synthetic corpus.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    pub labels: BTreeMap<FrameRef, BTreeSet<String>>,
}

#[derive(Serialize, Deserialize)]
struct GroundTruthLine {
    sensor: String,
    clip_start: i64,
    frame_index: u8,
    concepts: Vec<String>,
}

impl GroundTruth {
    pub fn add(&mut self, id: FrameRef, concept: &str) {
        self.labels.entry(id).or_default().insert(concept.to_string());
    }

    pub fn has(&self, id: &FrameRef, concept: &str) -> bool {
        self.labels.get(id).is_some_and(|c| c.contains(concept))
    }

    /// All frames carrying `concept`, in frame order.
    pub fn frames_of(&self, concept: &str) -> Vec<FrameRef> {
        self.labels.iter().filter(|(_, c)| c.contains(concept)).map(|(r, _)| r.clone()).collect()
    }

    /// Writes one JSON object per labelled frame.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for (r, concepts) in &self.labels {
            let line = GroundTruthLine {
                sensor: r.sensor_id.clone(),
                clip_start: r.clip_start,
                frame_index: r.frame_index,
                concepts: concepts.iter().cloned().collect(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let mut gt = GroundTruth::default();
        for line in BufReader::new(fs::File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let l: GroundTruthLine = serde_json::from_str(&line)?;
            let id = FrameRef::new(l.sensor, l.clip_start, l.frame_index)?;
            for c in l.concepts {
                gt.add(id.clone(), &c);
            }
        }
        Ok(gt)
    }

    /// Checks that every labelled frame exists in `source`.
    pub fn validate(&self, source: &dyn FrameSource) -> Result<()> {
        match self.labels.keys().find(|r| !source.contains(r)) {
            Some(r) => Err(Error::UnknownFrame(r.to_string())),
            None => Ok(()),
        }
    }
}
