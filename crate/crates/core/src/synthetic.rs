//! Deterministic synthetic corpora with planted concepts.
//!
//! Each sensor records three 10-second clips per minute at random offsets.
//! Frames of a planted concept are drawn from an isotropic Gaussian blob
//! around the concept centre; all other frames come from a broad Gaussian
//! centred at the origin whose stddev is three times the largest concept
//! stddev.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{Datelike, Duration, NaiveDate, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::corpus::{day_path, write_day, DayFrameSet, GroundTruth, SensorInfo};
use crate::error::{Error, Result};
use crate::types::{day_start, utc, FrameRef, FRAMES_PER_CLIP};

pub const CLIPS_PER_MINUTE: i64 = 3;

/// When a planted concept occurs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalPattern {
    /// Active months (1..=12); empty means every month.
    #[serde(default)]
    pub months: Vec<u32>,
    /// Daily window in minutes since midnight UTC, `[start, end)`. A window
    /// with `start > end` wraps past midnight.
    pub start_minute: u32,
    pub end_minute: u32,
    /// Probability that a clip overlapping the window carries the concept.
    pub probability: f64,
    /// Sensors the concept occurs at; empty means all.
    #[serde(default)]
    pub sensors: Vec<String>,
}

impl TemporalPattern {
    pub fn all_day(probability: f64) -> Self {
        Self { months: Vec::new(), start_minute: 0, end_minute: 24 * 60, probability, sensors: Vec::new() }
    }

    fn active_month(&self, month: u32) -> bool {
        self.months.is_empty() || self.months.contains(&month)
    }

    fn covers(&self, timestamp: i64) -> bool {
        let t = utc(timestamp);
        let minute = t.hour() * 60 + t.minute();
        if self.start_minute <= self.end_minute {
            minute >= self.start_minute && minute < self.end_minute
        } else {
            minute >= self.start_minute || minute < self.end_minute
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedConcept {
    pub name: String,
    pub center: Vec<f32>,
    pub stddev: f32,
    pub pattern: TemporalPattern,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub sensors: Vec<SensorInfo>,
    pub start_date: NaiveDate,
    pub days: u32,
    pub dim: usize,
    pub seed: u64,
    pub concepts: Vec<PlantedConcept>,
    /// Clips per sensor-day that also get a WAV file; clips carrying a
    /// planted concept are chosen first.
    #[serde(default)]
    pub audio_clips_per_day: usize,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.days == 0 {
            return Err(Error::InvalidParam("zero days".into()));
        }
        if self.sensors.is_empty() {
            return Err(Error::InvalidParam("no sensors".into()));
        }
        if self.dim == 0 {
            return Err(Error::InvalidParam("zero dim".into()));
        }
        for s in &self.sensors {
            s.validate()?;
        }
        for (i, c) in self.concepts.iter().enumerate() {
            if !(c.stddev > 0.0) || !c.stddev.is_finite() {
                return Err(Error::InvalidParam(format!("concept {} has non-positive stddev", c.name)));
            }
            if c.center.len() != self.dim {
                return Err(Error::DimMismatch { expected: self.dim, actual: c.center.len() });
            }
            if !(0.0..=1.0).contains(&c.pattern.probability) {
                return Err(Error::InvalidParam(format!("concept {} probability outside [0,1]", c.name)));
            }
            if self.concepts[..i].iter().any(|o| o.center == c.center) {
                return Err(Error::InvalidParam(format!("concept {} duplicates another centre", c.name)));
            }
            if self.concepts[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::InvalidParam(format!("concept name {} repeated", c.name)));
            }
        }
        Ok(())
    }

    pub fn background_stddev(&self) -> f32 {
        let max = self.concepts.iter().map(|c| c.stddev).fold(0.0f32, f32::max);
        if max > 0.0 {
            3.0 * max
        } else {
            1.0
        }
    }
}

/// Axis-aligned concept centres `radius * e_i`, pairwise distinct for
/// `n <= dim`.
pub fn axis_centers(n: usize, dim: usize, radius: f32) -> Vec<Vec<f32>> {
    (0..n)
        .map(|i| {
            let mut c = vec![0.0; dim];
            c[i % dim] = if i < dim { radius } else { -radius };
            c
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub root: PathBuf,
    pub day_files: Vec<PathBuf>,
    pub ground_truth: GroundTruth,
}

pub const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";
pub const AUDIO_SAMPLE_RATE: u32 = 16_000;

/// Tone frequency used for a planted concept in synthetic audio.
pub fn concept_tone_hz(concept_index: usize) -> f64 {
    400.0 + 300.0 * concept_index as f64
}

/// Ten seconds of quiet noise; each second whose frame carries a concept
/// also holds that concept's tone.
pub fn synthesize_clip_audio(frame_concepts: &[Option<usize>], seed: u64) -> Waveform {
    let sr = AUDIO_SAMPLE_RATE as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(sr * FRAMES_PER_CLIP as usize);
    for f in 0..FRAMES_PER_CLIP as usize {
        let tone = frame_concepts.get(f).copied().flatten().map(concept_tone_hz);
        for i in 0..sr {
            let noise: f32 = rng.sample::<f32, _>(StandardNormal) * 0.01;
            let t = (f * sr + i) as f64 / sr as f64;
            let s = tone.map_or(0.0, |hz| 0.5 * (2.0 * std::f64::consts::PI * hz * t).sin() as f32);
            samples.push((s + noise).clamp(-1.0, 1.0));
        }
    }
    Waveform { sample_rate: AUDIO_SAMPLE_RATE, samples }
}

fn write_day_audio(spec: &SyntheticSpec, root: &Path, day: &DayFrameSet, planted: &[(FrameRef, usize)]) -> Result<()> {
    if spec.audio_clips_per_day == 0 {
        return Ok(());
    }
    let mut by_clip: BTreeMap<i64, [Option<usize>; FRAMES_PER_CLIP as usize]> = BTreeMap::new();
    for r in day.refs() {
        by_clip.entry(r.clip_start).or_default();
    }
    for (r, ci) in planted {
        by_clip.get_mut(&r.clip_start).expect("planted frame in day")[r.frame_index as usize] = Some(*ci);
    }
    let (with, without): (Vec<_>, Vec<_>) = by_clip.into_iter().partition(|(_, c)| c.iter().any(Option::is_some));
    let dir = root.join(&day.sensor_id).join("audio");
    std::fs::create_dir_all(&dir)?;
    for (clip_start, concepts) in with.into_iter().chain(without).take(spec.audio_clips_per_day) {
        let audio = synthesize_clip_audio(&concepts, spec.seed ^ clip_start as u64);
        std::fs::write(dir.join(format!("{clip_start}.wav")), audio.to_wav_bytes()?)?;
    }
    Ok(())
}

/// Clip start times for one day: three per minute, one in each 20-second
/// slot at a random offset of 0..=10 s, so clips never overlap.
pub fn clip_schedule(date: NaiveDate, rng: &mut impl Rng) -> Vec<i64> {
    let start = day_start(date);
    let mut out = Vec::with_capacity(24 * 60 * CLIPS_PER_MINUTE as usize);
    for minute in 0..24 * 60 {
        for slot in 0..CLIPS_PER_MINUTE {
            out.push(start + minute * 60 + slot * 20 + rng.random_range(0..=10));
        }
    }
    out
}

/// Generates one sensor-day and its planted labels without touching disk.
pub fn generate_day(spec: &SyntheticSpec, sensor_index: usize, day_index: u32) -> Result<(DayFrameSet, Vec<(FrameRef, usize)>)> {
    spec.validate()?;
    let sensor = &spec.sensors[sensor_index].id;
    let date = spec.start_date + Duration::days(day_index as i64);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(((sensor_index as u64) << 32) | day_index as u64);

    let background = spec.background_stddev();
    let clips = clip_schedule(date, &mut rng);
    let mut refs = Vec::with_capacity(clips.len() * 10);
    let mut values = Vec::with_capacity(clips.len() * 10 * spec.dim);
    let mut planted = Vec::new();
    for clip_start in clips {
        // Each clip carries at most one concept; the first active concept
        // whose draw succeeds wins.
        let mut chosen = None;
        for (ci, c) in spec.concepts.iter().enumerate() {
            let sensor_ok = c.pattern.sensors.is_empty() || c.pattern.sensors.contains(sensor);
            let overlaps = (0..FRAMES_PER_CLIP as i64).any(|f| c.pattern.covers(clip_start + f));
            if sensor_ok && c.pattern.active_month(date.month()) && overlaps {
                let draw: f64 = rng.random();
                if chosen.is_none() && draw < c.pattern.probability {
                    chosen = Some(ci);
                }
            }
        }
        for f in 0..FRAMES_PER_CLIP {
            let id = FrameRef { sensor_id: sensor.clone(), clip_start, frame_index: f };
            let concept = chosen.filter(|&ci| spec.concepts[ci].pattern.covers(id.timestamp()));
            match concept {
                Some(ci) => {
                    let c = &spec.concepts[ci];
                    for d in 0..spec.dim {
                        let z: f32 = rng.sample(StandardNormal);
                        values.push(c.center[d] + c.stddev * z);
                    }
                    planted.push((id.clone(), ci));
                }
                None => {
                    for _ in 0..spec.dim {
                        let z: f32 = rng.sample(StandardNormal);
                        values.push(background * z);
                    }
                }
            }
            refs.push(id);
        }
    }
    let day = DayFrameSet::from_frames_unchecked(sensor.clone(), date, spec.dim, refs, values);
    Ok((day, planted))
}

/// Writes a complete synthetic corpus under `root`: one frameset per
/// sensor-day in the corpus layout, `sensors.json`, and the ground truth as
/// JSON lines.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, root: &Path) -> Result<SyntheticCorpus> {
    spec.validate()?;
    std::fs::create_dir_all(root)?;
    std::fs::write(root.join("sensors.json"), serde_json::to_vec_pretty(&spec.sensors)?)?;
    let mut ground_truth = GroundTruth::default();
    let mut day_files = Vec::new();
    for (si, sensor) in spec.sensors.iter().enumerate() {
        for di in 0..spec.days {
            let (day, planted) = generate_day(spec, si, di)?;
            let path = day_path(root, &sensor.id, day.date);
            write_day(&day, &path)?;
            write_day_audio(spec, root, &day, &planted)?;
            day_files.push(path);
            for (id, ci) in planted {
                ground_truth.add(id, &spec.concepts[ci].name);
            }
        }
    }
    ground_truth.write_jsonl(&root.join(GROUND_TRUTH_FILE))?;
    Ok(SyntheticCorpus { root: root.to_path_buf(), day_files, ground_truth })
}
