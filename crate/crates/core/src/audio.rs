//! Raw-audio support: WAV input, spectrograms, one-second framing and a
//! deterministic log-mel baseline embedding.

use std::io::{Cursor, Read, Seek};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Embedding, FRAMES_PER_CLIP};

pub const WINDOW: usize = 1024;
pub const HOP: usize = 256;
pub const DB_FLOOR: f32 = -80.0;
pub const MEL_BANDS: usize = 128;
pub const MIN_EMBEDDING_DIM: usize = 16;
const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub sample_rate: u32,
    pub samples: Vec<f32>,
}

impl Waveform {
    pub fn new(sample_rate: u32, samples: Vec<f32>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::UnsupportedAudio("sample rate 0".into()));
        }
        if samples.is_empty() {
            return Err(Error::TooShort("waveform has no samples".into()));
        }
        Ok(Self { sample_rate, samples })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// 16-bit PCM mono WAV bytes.
    pub fn to_wav_bytes(&self) -> Result<Vec<u8>> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut out = Cursor::new(Vec::new());
        let mut w = hound::WavWriter::new(&mut out, spec)?;
        for &s in &self.samples {
            w.write_sample((s * 32_768.0).round().clamp(i16::MIN as f32, i16::MAX as f32) as i16)?;
        }
        w.finalize()?;
        Ok(out.into_inner())
    }
}

pub fn load_wav(path: &Path) -> Result<Waveform> {
    read_wav(hound::WavReader::open(path)?)
}

pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    read_wav(hound::WavReader::new(Cursor::new(bytes))?)
}

fn read_wav<R: Read + Seek>(reader: hound::WavReader<R>) -> Result<Waveform> {
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedAudio(format!("{} channels, expected mono", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || !matches!(spec.bits_per_sample, 8 | 16) {
        return Err(Error::UnsupportedAudio(format!("{}-bit {:?}, expected 8/16-bit PCM", spec.bits_per_sample, spec.sample_format)));
    }
    let scale = (1i32 << (spec.bits_per_sample - 1)) as f32;
    let samples = reader
        .into_samples::<i32>()
        .map(|s| s.map(|v| v as f32 / scale))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(spec.sample_rate, samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrogram {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    pub freq_bins: usize,
    pub time_steps: usize,
    /// `values[t][f]` in dB relative to the clip maximum, within [-80, 0].
    pub values: Vec<Vec<f32>>,
}

impl Spectrogram {
    pub fn bin_hz(&self, bin: usize) -> f64 {
        bin as f64 * self.sample_rate as f64 / self.window as f64
    }
}

fn hann(n: usize) -> Vec<f32> {
    (0..n).map(|i| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()) as f32).collect()
}

/// Magnitudes of the Hann-windowed STFT, `[time][bin]`, bins `0..=n/2`.
fn stft_magnitudes(samples: &[f32], window: usize, hop: usize) -> Vec<Vec<f32>> {
    let fft = FftPlanner::<f32>::new().plan_fft_forward(window);
    let w = hann(window);
    let steps = (samples.len() - window) / hop + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); window];
    (0..steps)
        .map(|t| {
            let frame = &samples[t * hop..t * hop + window];
            for ((b, &s), &h) in buf.iter_mut().zip(frame).zip(&w) {
                *b = Complex::new(s * h, 0.0);
            }
            fft.process(&mut buf);
            buf[..=window / 2].iter().map(|c| c.norm()).collect()
        })
        .collect()
}

/// Short-time Fourier magnitude in dB, normalised to the clip maximum and
/// clipped at -80 dB. Window 1024, hop 256, no padding.
pub fn spectrogram(w: &Waveform) -> Result<Spectrogram> {
    if w.samples.len() < WINDOW {
        return Err(Error::TooShort(format!("{} samples, need at least {WINDOW}", w.samples.len())));
    }
    let mags = stft_magnitudes(&w.samples, WINDOW, HOP);
    let max = mags.iter().flatten().fold(0f32, |a, &b| a.max(b));
    let values: Vec<Vec<f32>> = mags
        .into_iter()
        .map(|col| {
            col.into_iter()
                .map(|m| if max > 0.0 && m > 0.0 { (20.0 * (m / max).log10()).clamp(DB_FLOOR, 0.0) } else { DB_FLOOR })
                .collect()
        })
        .collect();
    Ok(Spectrogram {
        sample_rate: w.sample_rate,
        window: WINDOW,
        hop: HOP,
        freq_bins: WINDOW / 2 + 1,
        time_steps: values.len(),
        values,
    })
}

/// Grey-scale PNG with time on x and frequency rising upwards.
pub fn spectrogram_png(s: &Spectrogram) -> Result<Vec<u8>> {
    let (width, height) = (s.time_steps as u32, s.freq_bins as u32);
    let mut pixels = Vec::with_capacity((width * height) as usize);
    for f in (0..s.freq_bins).rev() {
        for t in 0..s.time_steps {
            let v = (s.values[t][f] - DB_FLOOR) / -DB_FLOOR;
            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Corrupt(e.to_string()))?;
        writer.write_image_data(&pixels).map_err(|e| Error::Corrupt(e.to_string()))?;
    }
    Ok(out)
}

/// Ten one-second segments `[i, i+1)` seconds. Audio past ten seconds is
/// dropped; missing audio is zero-filled.
pub fn slice_frames(w: &Waveform) -> Result<Vec<Vec<f32>>> {
    let sr = w.sample_rate as usize;
    if w.samples.len() < sr {
        return Err(Error::TooShort(format!("{:.3} s, need at least 1 s", w.duration())));
    }
    Ok((0..FRAMES_PER_CLIP as usize)
        .map(|i| {
            let mut seg = vec![0f32; sr];
            let start = (i * sr).min(w.samples.len());
            let end = ((i + 1) * sr).min(w.samples.len());
            seg[..end - start].copy_from_slice(&w.samples[start..end]);
            seg
        })
        .collect())
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters over `bins` FFT bins, as `(first_bin, weights)`.
fn mel_filters(sample_rate: u32, bins: usize, bands: usize) -> Vec<(usize, Vec<f64>)> {
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..bands + 2).map(|i| mel_to_hz(top * i as f64 / (bands + 1) as f64)).collect();
    let bin_hz = nyquist / (bins - 1) as f64;
    (0..bands)
        .map(|b| {
            let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            let first = (lo / bin_hz).floor() as usize;
            let last = ((hi / bin_hz).ceil() as usize).min(bins - 1);
            let weights = (first..=last)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect();
            (first, weights)
        })
        .collect()
}

/// For each one-second frame: mean and standard deviation over time of 128
/// log-mel band energies, repeated or cut to `dim` values.
pub fn baseline_embedding(w: &Waveform, dim: usize) -> Result<Vec<Embedding>> {
    if dim < MIN_EMBEDDING_DIM {
        return Err(Error::InvalidParam(format!("embedding dim {dim} below {MIN_EMBEDDING_DIM}")));
    }
    if w.sample_rate < 1000 {
        return Err(Error::UnsupportedAudio(format!("sample rate {} Hz too low", w.sample_rate)));
    }
    let frames = slice_frames(w)?;
    let sr = w.sample_rate as usize;
    let window = WINDOW.min(sr.next_power_of_two() / 2).max(64);
    let hop = (window / 4).max(1);
    let bins = window / 2 + 1;
    let filters = mel_filters(w.sample_rate, bins, MEL_BANDS);
    frames
        .iter()
        .map(|seg| {
            let mags = stft_magnitudes(seg, window, hop);
            let mut sum = vec![0f64; MEL_BANDS];
            let mut sq = vec![0f64; MEL_BANDS];
            for col in &mags {
                for (b, (first, weights)) in filters.iter().enumerate() {
                    let e: f64 = weights.iter().enumerate().map(|(k, wt)| wt * (col[first + k] as f64).powi(2)).sum();
                    let l = e.max(LOG_FLOOR).ln();
                    sum[b] += l;
                    sq[b] += l * l;
                }
            }
            let n = mags.len() as f64;
            let mut features = Vec::with_capacity(2 * MEL_BANDS);
            for b in 0..MEL_BANDS {
                features.push((sum[b] / n) as f32);
            }
            for b in 0..MEL_BANDS {
                let mean = sum[b] / n;
                features.push((sq[b] / n - mean * mean).max(0.0).sqrt() as f32);
            }
            Embedding::new(features.iter().cycle().take(dim).copied().collect())
        })
        .collect()
}
