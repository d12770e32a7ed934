//! Shared domain types: frame identity, embeddings and the frame-source trait
//! the higher layers read through.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every clip is 10 seconds long and yields one frame per second.
pub const FRAMES_PER_CLIP: u8 = 10;

/// Identity of one 1-second audio frame.
///
/// Ordering is `(clip_start, frame_index, sensor_id)`, which is also the
/// tie-break order for equal search distances.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameRef {
    #[serde(rename = "sensor")]
    pub sensor_id: String,
    pub clip_start: i64,
    pub frame_index: u8,
}

impl FrameRef {
    pub fn new(sensor_id: impl Into<String>, clip_start: i64, frame_index: u8) -> Result<Self> {
        if frame_index >= FRAMES_PER_CLIP {
            return Err(Error::FrameIndexOutOfRange(frame_index as u32));
        }
        let sensor_id = sensor_id.into();
        validate_sensor_id(&sensor_id)?;
        Ok(Self { sensor_id, clip_start, frame_index })
    }

    /// Start of this frame in seconds since the epoch.
    pub fn timestamp(&self) -> i64 {
        self.clip_start + self.frame_index as i64
    }

    pub fn datetime(&self) -> DateTime<Utc> {
        utc(self.timestamp())
    }

    /// UTC calendar day of the clip the frame belongs to.
    pub fn date(&self) -> NaiveDate {
        utc(self.clip_start).date_naive()
    }

    /// UTC hour (0..24) of the frame start.
    pub fn hour(&self) -> u32 {
        self.datetime().hour()
    }

    pub fn clip(&self) -> ClipId {
        ClipId { sensor_id: self.sensor_id.clone(), clip_start: self.clip_start }
    }
}

impl Ord for FrameRef {
    fn cmp(&self, other: &Self) -> Ordering {
        self.clip_start
            .cmp(&other.clip_start)
            .then(self.frame_index.cmp(&other.frame_index))
            .then_with(|| self.sensor_id.cmp(&other.sensor_id))
    }
}

impl PartialOrd for FrameRef {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for FrameRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.sensor_id, self.clip_start, self.frame_index)
    }
}

impl FromStr for FrameRef {
    type Err = Error;

    /// Parses `sensor:clip_start:frame_index`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParam(format!("bad frame ref {s:?}"));
        let mut parts = s.rsplitn(3, ':');
        let idx: u32 = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let start: i64 = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let sensor = parts.next().ok_or_else(bad)?;
        if idx >= FRAMES_PER_CLIP as u32 {
            return Err(Error::FrameIndexOutOfRange(idx));
        }
        FrameRef::new(sensor, start, idx as u8)
    }
}

/// Identity of one 10-second clip.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClipId {
    #[serde(rename = "sensor")]
    pub sensor_id: String,
    pub clip_start: i64,
}

impl ClipId {
    pub fn frame(&self, frame_index: u8) -> FrameRef {
        FrameRef { sensor_id: self.sensor_id.clone(), clip_start: self.clip_start, frame_index }
    }

    pub fn frames(&self) -> impl Iterator<Item = FrameRef> + '_ {
        (0..FRAMES_PER_CLIP).map(|i| self.frame(i))
    }
}

impl fmt::Display for ClipId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.sensor_id, self.clip_start)
    }
}

impl FromStr for ClipId {
    type Err = Error;

    /// Parses `sensor:clip_start`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParam(format!("bad clip id {s:?}"));
        let (sensor, start) = s.rsplit_once(':').ok_or_else(bad)?;
        let clip_start = start.parse().map_err(|_| bad())?;
        validate_sensor_id(sensor)?;
        Ok(ClipId { sensor_id: sensor.to_string(), clip_start })
    }
}

/// Sensor ids double as directory names, so they are restricted to a
/// filesystem- and URL-safe token alphabet.
pub fn validate_sensor_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParam(format!("sensor id {id:?} is not a token")))
    }
}

pub fn utc(seconds: i64) -> DateTime<Utc> {
    DateTime::from_timestamp(seconds, 0).unwrap_or(DateTime::<Utc>::MIN_UTC)
}

/// Seconds since the epoch at 00:00 UTC of `date`.
pub fn day_start(date: NaiveDate) -> i64 {
    date.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc().timestamp()
}

/// A fixed-length vector of finite 32-bit reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("embedding"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    pub fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() == expected {
            Ok(())
        } else {
            Err(Error::DimMismatch { expected, actual: self.dim() })
        }
    }
}

impl TryFrom<Vec<f32>> for Embedding {
    type Error = Error;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Embedding::new(values)
    }
}

impl From<Embedding> for Vec<f32> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

impl AsRef<[f32]> for Embedding {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

/// A frame together with its embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub id: FrameRef,
    pub embedding: Embedding,
}

impl Frame {
    pub fn new(id: FrameRef, embedding: Embedding) -> Self {
        Self { id, embedding }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

/// Read access to a collection of frames.
///
/// Implemented by the on-disk [`crate::corpus::Corpus`] and the in-memory
/// [`crate::corpus::MemoryFrames`]. Frames are addressable by ordinal so that
/// uniform sampling over the whole collection does not need to materialise it.
pub trait FrameSource: Send + Sync {
    fn dim(&self) -> usize;

    fn frame_count(&self) -> usize;

    /// The frame with the given ordinal, `0..frame_count()`.
    fn frame_at(&self, ordinal: usize) -> Result<FrameRef>;

    fn contains(&self, id: &FrameRef) -> bool;

    fn embedding(&self, id: &FrameRef) -> Result<Embedding>;

    fn embeddings(&self, ids: &[FrameRef]) -> Result<Vec<Embedding>> {
        ids.iter().map(|id| self.embedding(id)).collect()
    }
}

/// Squared Euclidean distance.
///
/// Eight independent accumulators so the loop vectorises.
#[inline]
pub fn squared_l2(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; 8];
    let chunks_a = a.chunks_exact(8);
    let chunks_b = b.chunks_exact(8);
    let tail: f32 = chunks_a
        .remainder()
        .iter()
        .zip(chunks_b.remainder())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for i in 0..8 {
            let d = ca[i] - cb[i];
            acc[i] += d * d;
        }
    }
    acc.iter().sum::<f32>() + tail
}

#[inline]
pub fn l2(a: &[f32], b: &[f32]) -> f32 {
    squared_l2(a, b).sqrt()
}
