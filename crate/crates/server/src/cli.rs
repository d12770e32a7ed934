//! `soundscape` subcommands. Every command writes its result as JSON to the
//! given writer so tests can run them in-process.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use soundscape_core::corpus::{Corpus, SensorInfo};
use soundscape_core::index::IndexParams;
use soundscape_core::prototype::{ForestParams, PrototypeStore, TrainParams};
use soundscape_core::query::{build_indices, query_by_example, query_by_prototype, IndexSet, PrototypeQuery, QuerySeed};
use soundscape_core::synthetic::{axis_centers, generate_synthetic_corpus, PlantedConcept, SyntheticSpec, TemporalPattern};
use soundscape_core::{Embedding, Error as CoreError, FrameRef, FrameSource, Polarity};

use crate::error::{ApiError, ApiResult};
use crate::state::{ServeConfig, DEFAULT_PORT};

/// Concept names of the default synthetic corpus, in planting order.
pub const DEFAULT_CONCEPTS: [&str; 5] = ["jackhammer", "siren", "dog_bark", "car_horn", "engine_idling"];

#[derive(Debug, Parser)]
#[command(name = "soundscape", version, about = "Explore and label large urban sound embedding corpora")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus with planted concepts.
    Generate(GenerateArgs),
    /// Add frameset files to a corpus.
    Ingest(IngestArgs),
    /// Build one similarity index per sensor and year.
    Index(IndexArgs),
    /// Record labels for a concept.
    Annotate(AnnotateArgs),
    /// Train a new prototype version from the current labels.
    Train(TrainArgs),
    /// Run a similarity or prototype query and print the hit set.
    Query(QueryArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub days: u32,
    #[arg(long, default_value_t = 2)]
    pub sensors: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value = "2019-10-01")]
    pub start_date: NaiveDate,
    /// Clips per sensor-day that also get a WAV file.
    #[arg(long, default_value_t = 4)]
    pub audio_clips: usize,
    /// JSON generator spec; replaces every other generator flag except --out.
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub root: PathBuf,
    /// Sensor the files belong to; otherwise taken from each file's
    /// `<sensor>/<YYYY>/<MM>/<DD>.urfs` path.
    #[arg(long)]
    pub sensor: Option<String>,
    #[arg(long)]
    pub overwrite: bool,
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub root: PathBuf,
    /// Defaults to `<root>/indices`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = IndexParams::default().max_degree)]
    pub max_degree: usize,
    #[arg(long, default_value_t = IndexParams::default().ef_construction)]
    pub ef_construction: usize,
    #[arg(long, default_value_t = IndexParams::default().ef_search)]
    pub ef_search: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct StoreArgs {
    #[arg(long)]
    pub root: PathBuf,
    /// Prototype store; defaults to `<root>/prototypes`.
    #[arg(long)]
    pub store: Option<PathBuf>,
}

impl StoreArgs {
    fn store_root(&self) -> PathBuf {
        self.store.clone().unwrap_or_else(|| self.root.join("prototypes"))
    }
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    #[command(flatten)]
    pub paths: StoreArgs,
    #[arg(long)]
    pub concept: String,
    #[arg(long, default_value = "analyst")]
    pub user: String,
    /// Label the frames as negatives.
    #[arg(long)]
    pub negative: bool,
    /// File with one `sensor:clip_start:frame_index` per line.
    #[arg(long)]
    pub from_file: Option<PathBuf>,
    pub frames: Vec<FrameRef>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub paths: StoreArgs,
    #[arg(long)]
    pub concept: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = ForestParams::default().n_trees)]
    pub trees: usize,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[command(flatten)]
    pub paths: StoreArgs,
    /// Defaults to `<root>/indices`.
    #[arg(long)]
    pub indices: Option<PathBuf>,
    #[arg(long, group = "seed")]
    pub frame: Option<FrameRef>,
    /// Comma-separated embedding values.
    #[arg(long, group = "seed", allow_hyphen_values = true)]
    pub embedding: Option<String>,
    /// Query with the latest prototype of this concept.
    #[arg(long, group = "seed")]
    pub concept: Option<String>,
    #[arg(long, requires = "concept")]
    pub version: Option<u32>,
    #[arg(long, short = 'k', alias = "n", default_value_t = 100)]
    pub k: usize,
    #[arg(long, default_value_t = PrototypeQuery::default().tau)]
    pub tau: f64,
    #[arg(long, default_value_t = PrototypeQuery::default().m)]
    pub m: usize,
    #[arg(long)]
    pub sensor: Option<String>,
    #[arg(long)]
    pub year: Option<i32>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub paths: StoreArgs,
    #[arg(long)]
    pub indices: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = DEFAULT_PORT)]
    pub port: u16,
    /// Expected embedding dimension.
    #[arg(long)]
    pub dim: Option<usize>,
}

/// The generator spec behind `soundscape generate` without `--spec`: five
/// urban concepts on separate axes with distinct daily windows.
pub fn default_planted_spec(dim: usize, sensors: usize, days: u32, seed: u64, start_date: NaiveDate) -> SyntheticSpec {
    let windows: [(u32, u32, f64); 5] = [(7 * 60, 17 * 60, 0.04), (0, 24 * 60, 0.01), (5 * 60, 9 * 60, 0.05), (16 * 60, 20 * 60, 0.05), (22 * 60, 4 * 60, 0.04)];
    let centers = axis_centers(DEFAULT_CONCEPTS.len(), dim, 8.0);
    let concepts = DEFAULT_CONCEPTS
        .iter()
        .zip(centers)
        .zip(windows)
        .map(|((name, center), (start, end, p))| PlantedConcept {
            name: name.to_string(),
            center,
            stddev: 1.0,
            pattern: TemporalPattern { months: Vec::new(), start_minute: start, end_minute: end, probability: p, sensors: Vec::new() },
        })
        .collect();
    let sensors = (0..sensors)
        .map(|i| SensorInfo {
            id: format!("sensor-{:02}", i + 1),
            lat: 40.70 + 0.01 * i as f64,
            lon: -74.00 + 0.01 * i as f64,
            name: format!("Sensor {}", i + 1),
        })
        .collect();
    SyntheticSpec { sensors, start_date, days, dim, seed, concepts, audio_clips_per_day: 0 }
}

fn print_json(out: &mut dyn Write, v: &impl serde::Serialize) -> ApiResult<()> {
    let s = serde_json::to_string(v).map_err(CoreError::from)?;
    writeln!(out, "{s}").map_err(CoreError::from)?;
    Ok(())
}

fn open_or_create(root: &Path) -> ApiResult<Corpus> {
    Ok(if root.is_dir() { Corpus::open(root)? } else { Corpus::create(root)? })
}

fn parse_embedding(s: &str) -> ApiResult<Embedding> {
    let values = s
        .trim()
        .trim_start_matches('[')
        .trim_end_matches(']')
        .split(',')
        .map(|v| v.trim().parse::<f32>().map_err(|e| ApiError::bad_request(format!("bad embedding value {v:?}: {e}"))))
        .collect::<ApiResult<Vec<f32>>>()?;
    Ok(Embedding::new(values)?)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> ApiResult<()> {
    match cli.command {
        Command::Generate(a) => generate(a, out),
        Command::Ingest(a) => ingest(a, out),
        Command::Index(a) => index(a, out),
        Command::Annotate(a) => annotate(a, out),
        Command::Train(a) => train(a, out),
        Command::Query(a) => query(a, out),
        Command::Serve(a) => serve(a),
    }
}

fn generate(a: GenerateArgs, out: &mut dyn Write) -> ApiResult<()> {
    let spec = match &a.spec {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(CoreError::from)?;
            serde_json::from_slice(&bytes).map_err(CoreError::from)?
        }
        None => SyntheticSpec {
            audio_clips_per_day: a.audio_clips,
            ..default_planted_spec(a.dim, a.sensors, a.days, a.seed, a.start_date)
        },
    };
    let corpus = generate_synthetic_corpus(&spec, &a.out)?;
    let mut planted: BTreeMap<&str, usize> = spec.concepts.iter().map(|c| (c.name.as_str(), 0)).collect();
    for c in &spec.concepts {
        planted.insert(&c.name, corpus.ground_truth.frames_of(&c.name).len());
    }
    let frames = Corpus::open(&a.out)?.frame_count();
    print_json(
        out,
        &json!({
            "root": a.out,
            "day_files": corpus.day_files.len(),
            "frames": frames,
            "dim": spec.dim,
            "planted": planted,
        }),
    )
}

fn ingest(a: IngestArgs, out: &mut dyn Write) -> ApiResult<()> {
    let corpus = open_or_create(&a.root)?;
    for file in &a.files {
        let report = match &a.sensor {
            Some(s) => corpus.ingest_frameset_for(file, s, a.overwrite)?,
            None => corpus.ingest_frameset(file, a.overwrite)?,
        };
        print_json(out, &report)?;
    }
    Ok(())
}

fn index(a: IndexArgs, out: &mut dyn Write) -> ApiResult<()> {
    let corpus = Corpus::open(&a.root)?;
    let params = IndexParams { max_degree: a.max_degree, ef_construction: a.ef_construction, ef_search: a.ef_search, seed: a.seed };
    let dir = a.out.unwrap_or_else(|| a.root.join("indices"));
    let built = build_indices(&corpus, params, &dir)?;
    let built: Vec<_> = built.into_iter().map(|(scope, path)| json!({ "scope": scope, "path": path })).collect();
    print_json(out, &built)
}

fn annotate(a: AnnotateArgs, out: &mut dyn Write) -> ApiResult<()> {
    let corpus = Corpus::open(&a.paths.root)?;
    let store = PrototypeStore::open(a.paths.store_root())?;
    let mut frames = a.frames;
    if let Some(path) = &a.from_file {
        let text = std::fs::read_to_string(path).map_err(CoreError::from)?;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            frames.push(line.parse()?);
        }
    }
    if frames.is_empty() {
        return Err(ApiError::bad_request("no frames given"));
    }
    let polarity = if a.negative { Polarity::Negative } else { Polarity::Positive };
    let id = store.record_annotation(&a.user, &a.concept, &frames, polarity, &corpus)?;
    print_json(out, &json!({ "annotation_id": id, "frames": frames.len() }))
}

fn train(a: TrainArgs, out: &mut dyn Write) -> ApiResult<()> {
    let corpus = Corpus::open(&a.paths.root)?;
    let store = PrototypeStore::open(a.paths.store_root())?;
    let params = TrainParams { seed: a.seed, forest: ForestParams { n_trees: a.trees, seed: a.seed, ..ForestParams::default() } };
    let version = store.train(&a.concept, &corpus, &params)?;
    print_json(out, &*version)
}

fn query(a: QueryArgs, out: &mut dyn Write) -> ApiResult<()> {
    let corpus = Corpus::open(&a.paths.root)?;
    let dir = a.indices.clone().unwrap_or_else(|| a.paths.root.join("indices"));
    let scope = IndexSet::load_dir(&dir)?.restrict(a.sensor.as_deref(), a.year);
    let hits = match (&a.frame, &a.embedding, &a.concept) {
        (Some(f), None, None) => query_by_example(&QuerySeed::Frame(f.clone()), a.k, &scope, &corpus)?,
        (None, Some(e), None) => query_by_example(&QuerySeed::Embedding(parse_embedding(e)?), a.k, &scope, &corpus)?,
        (None, None, Some(c)) => {
            let store = PrototypeStore::open(a.paths.store_root())?;
            let version = match a.version {
                None => store.latest(c)?,
                Some(v) => store
                    .prototype(c)?
                    .version(v)
                    .cloned()
                    .ok_or_else(|| ApiError::not_found("unknown_version", format!("concept {c} has no version {v}")))?,
            };
            query_by_prototype(&version, &PrototypeQuery { n: a.k, tau: a.tau, m: a.m }, &scope, &corpus)?
        }
        _ => return Err(ApiError::bad_request("give exactly one of --frame, --embedding and --concept")),
    };
    print_json(out, &hits)
}

fn serve(a: ServeArgs) -> ApiResult<()> {
    let config = ServeConfig {
        store_root: a.paths.store_root(),
        corpus_root: a.paths.root,
        index_dir: a.indices,
        host: a.host,
        port: a.port,
        dim: a.dim,
    };
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    runtime.block_on(crate::serve(config))
}
