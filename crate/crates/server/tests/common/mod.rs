#![allow(dead_code)]

use std::path::PathBuf;
use std::time::Duration;

use axum::body::Body;
use axum::http::{HeaderMap, Request, StatusCode};
use axum::Router;
use chrono::NaiveDate;
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use soundscape_core::corpus::{write_frameset, Corpus, SensorInfo};
use soundscape_core::index::IndexParams;
use soundscape_core::query::build_indices;
use soundscape_core::synthetic::synthesize_clip_audio;
use soundscape_core::types::day_start;
use soundscape_core::{Embedding, Frame, FrameRef};
use soundscape_server::{router, AppState, ServeConfig};
use tower::ServiceExt;

pub const SENSOR: &str = "s1";
pub const DIM: usize = 16;
pub const CLIPS_PER_DAY: i64 = 30;

pub fn day1() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 3, 1).unwrap()
}

pub fn day2() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 3, 2).unwrap()
}

/// Clip `i` of `date`; clips cycle through three blobs by `i % 3`.
pub fn clip_start(date: NaiveDate, i: i64) -> i64 {
    day_start(date) + 600 * i
}

pub fn frame(date: NaiveDate, clip: i64, index: u8) -> FrameRef {
    FrameRef::new(SENSOR, clip_start(date, clip), index).unwrap()
}

/// Every frame of the clips of `date` whose index is `blob` modulo 3.
pub fn blob_frames(date: NaiveDate, blob: i64) -> Vec<FrameRef> {
    (0..CLIPS_PER_DAY).filter(|i| i % 3 == blob).flat_map(|i| (0..10).map(move |f| frame(date, i, f))).collect()
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub corpus: PathBuf,
    pub store: PathBuf,
}

impl Fixture {
    pub fn config(&self) -> ServeConfig {
        ServeConfig::new(&self.corpus, &self.store)
    }

    pub fn state(&self) -> AppState {
        AppState::open(self.config()).unwrap()
    }

    pub fn app(&self) -> Router {
        router(self.state())
    }
}

/// Two days of 30 clips at one sensor, three well separated blobs, indices
/// built, and audio for clip 0 of the first day.
pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let corpus_root = dir.path().join("corpus");
    let corpus = Corpus::create(&corpus_root).unwrap();
    corpus.register_sensor(SensorInfo { id: SENSOR.into(), lat: 40.73, lon: -73.99, name: "Square".into() }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for date in [day1(), day2()] {
        let mut frames = Vec::new();
        for i in 0..CLIPS_PER_DAY {
            for f in 0..10 {
                let mut v: Vec<f32> = (0..DIM).map(|_| rng.random_range(-0.3f32..0.3)).collect();
                v[(i % 3) as usize] += 6.0;
                frames.push(Frame::new(frame(date, i, f), Embedding::new(v).unwrap()));
            }
        }
        let file = dir.path().join(format!("{date}.urfs"));
        write_frameset(&frames, &file).unwrap();
        corpus.ingest_frameset_for(&file, SENSOR, false).unwrap();
    }
    let clip = frame(day1(), 0, 0).clip();
    let audio = corpus.audio_path(&clip);
    std::fs::create_dir_all(audio.parent().unwrap()).unwrap();
    std::fs::write(&audio, synthesize_clip_audio(&[Some(0); 10], 3).to_wav_bytes().unwrap()).unwrap();
    build_indices(&corpus, IndexParams::default(), &corpus_root.join("indices")).unwrap();
    let store = dir.path().join("store");
    Fixture { dir, corpus: corpus_root, store }
}

pub struct Reply {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }

    pub fn content_type(&self) -> &str {
        self.headers.get("content-type").map(|v| v.to_str().unwrap()).unwrap_or("")
    }
}

pub async fn send(app: &Router, req: Request<Body>) -> Reply {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, headers, body }
}

pub async fn get(app: &Router, uri: &str, session: Option<&str>) -> Reply {
    let mut b = Request::get(uri);
    if let Some(s) = session {
        b = b.header("x-session-id", s);
    }
    send(app, b.body(Body::empty()).unwrap()).await
}

pub async fn post(app: &Router, uri: &str, session: Option<&str>, body: Value) -> Reply {
    let mut b = Request::post(uri).header("content-type", "application/json");
    if let Some(s) = session {
        b = b.header("x-session-id", s);
    }
    send(app, b.body(Body::from(serde_json::to_vec(&body).unwrap())).unwrap()).await
}

/// Polls a job until it leaves the running state.
pub async fn wait_job(app: &Router, id: u64) -> Value {
    for _ in 0..3000 {
        let job = get(app, &format!("/v1/jobs/{id}"), None).await.json();
        if job["status"] != "running" {
            return job;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    panic!("job {id} did not finish");
}

pub fn frames_json(frames: &[FrameRef]) -> Value {
    serde_json::to_value(frames).unwrap()
}
