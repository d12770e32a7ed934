//! `/v1` routes. Handlers translate requests into engine calls and serialise
//! the engine's result as the response body.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::str::FromStr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{FromRequest, FromRequestParts, Path, Request, State};
use axum::http::header::{ACCEPT, CONTENT_TYPE};
use axum::http::request::Parts;
use axum::http::{HeaderMap, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use soundscape_core::audio::{baseline_embedding, decode_wav, load_wav, spectrogram, spectrogram_png};
use soundscape_core::cluster::{build_cluster_tree, decorate_tree, select_node, ClusterTree, TreeParams};
use soundscape_core::corpus::DayFrameSet;
use soundscape_core::projection::{project, remove_and_reproject, reproject_subset, steer, Layout, ProjectionParams, Steering};
use soundscape_core::prototype::{validate_concept, ForestParams, PrototypeVersion, TrainParams};
use soundscape_core::query::{
    calendar_summary, frame_classification_matrix, query_by_example, query_by_prototype, selection_summary, HitSet,
    PrototypeQuery, QuerySeed, DEFAULT_NEIGHBOURS_PER_REPRESENTATIVE, DEFAULT_TAU,
};
use soundscape_core::types::ClipId;
use soundscape_core::{Error as CoreError, FrameRef, FrameSource, Polarity};
use tower_http::cors::{Any, CorsLayer};

use crate::error::{ApiError, ApiResult};
use crate::state::{AppState, Session};

pub const SESSION_HEADER: &str = "x-session-id";
pub const QUERY_ID_HEADER: &str = "x-query-id";
pub const DEFAULT_SESSION: &str = "default";
/// Hits gathered for a concept calendar when the request gives no `n`.
pub const CALENDAR_HITS: usize = 10_000;

pub fn router(state: AppState) -> Router {
    let v1 = Router::new()
        .route("/health", get(health))
        .route("/sensors", get(sensors))
        .route("/sensors/{id}/days", get(sensor_days))
        .route("/calendar", get(calendar))
        .route("/query/example", post(query_example))
        .route("/query/prototype", post(query_prototype))
        .route("/query/upload", post(query_upload))
        .route("/indices/reload", post(reload_indices))
        .route("/day/load", post(day_load))
        .route("/session", get(session_view))
        .route("/layout/{id}", get(layout_get))
        .route("/layout/reproject", post(layout_reproject))
        .route("/layout/remove", post(layout_remove))
        .route("/layout/steer", post(layout_steer))
        .route("/tree", get(tree_get))
        .route("/tree/{node}/select", post(tree_select))
        .route("/selection", post(selection_set))
        .route("/selection/summary", post(selection_summary_handler))
        .route("/annotate", post(annotate))
        .route("/concepts", get(concepts))
        .route("/prototype/train", post(train))
        .route("/prototype/{concept}/summary", get(prototype_summary))
        .route("/clip/{id}/spectrogram", get(clip_spectrogram))
        .route("/clip/{id}/audio", get(clip_audio))
        .route("/clip/{id}/classification", get(clip_classification))
        .route("/jobs/{id}", get(job));
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods(Any)
        .allow_headers(Any)
        .expose_headers([HeaderName::from_static(QUERY_ID_HEADER)]);
    Router::new().nest("/v1", v1).layer(cors).with_state(state)
}

/// Session named by the `X-Session-Id` header, `default` when absent.
pub struct SessionId(pub String);

impl<S: Send + Sync> FromRequestParts<S> for SessionId {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, _: &S) -> Result<Self, ApiError> {
        let Some(v) = parts.headers.get(SESSION_HEADER) else {
            return Ok(SessionId(DEFAULT_SESSION.into()));
        };
        let id = v.to_str().map_err(|_| ApiError::bad_request("session id is not ASCII"))?;
        let ok = !id.is_empty() && id.len() <= 128 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_');
        if !ok {
            return Err(ApiError::bad_request(format!("bad session id {id:?}")));
        }
        Ok(SessionId(id.to_string()))
    }
}

/// JSON body whose rejections use the API error shape.
pub struct Body<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, ApiError> {
        let Json(v) = Json::<T>::from_request(req, state).await.map_err(|e| ApiError::bad_request(e.body_text()))?;
        Ok(Body(v))
    }
}

/// Query string whose rejections use the API error shape.
pub struct Params<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequestParts<S> for Params<T> {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &S) -> Result<Self, ApiError> {
        let axum::extract::Query(v) = axum::extract::Query::<T>::from_request_parts(parts, state)
            .await
            .map_err(|e| ApiError::bad_request(e.body_text()))?;
        Ok(Params(v))
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::Internal(e.to_string()))?
}

fn accepted(job_id: u64) -> Response {
    (StatusCode::ACCEPTED, Json(json!({ "job_id": job_id }))).into_response()
}

fn hits_response(state: &AppState, hits: HitSet) -> Response {
    let hits = Arc::new(hits);
    let id = state.remember_query(hits.clone());
    let mut resp = Json(&*hits).into_response();
    if let Ok(v) = HeaderValue::from_str(&id) {
        resp.headers_mut().insert(QUERY_ID_HEADER, v);
    }
    resp
}

fn parse_clip(id: &str) -> ApiResult<ClipId> {
    Ok(ClipId::from_str(id)?)
}

fn resolve_version(state: &AppState, concept: &str, version: Option<u32>) -> ApiResult<Arc<PrototypeVersion>> {
    if state.store.prototype(concept).is_err() && state.store.log().concepts().contains(concept) {
        return Err(CoreError::Untrained(concept.to_string()).into());
    }
    match version {
        None => Ok(state.store.latest(concept)?),
        Some(v) => state.store.prototype(concept)?.version(v).cloned().ok_or_else(|| {
            ApiError::not_found("unknown_version", format!("concept {concept} has no version {v}"))
        }),
    }
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))
}

async fn sensors(State(state): State<AppState>) -> Response {
    Json(state.corpus.sensors()).into_response()
}

async fn sensor_days(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    if !state.corpus.sensors().iter().any(|s| s.id == id) && state.corpus.days_for(&id).is_empty() {
        return Err(CoreError::UnknownSensor(id).into());
    }
    Ok(Json(state.corpus.days_for(&id)).into_response())
}

#[derive(Debug, Deserialize)]
pub struct CalendarParams {
    pub year: i32,
    pub concept: Option<String>,
    pub version: Option<u32>,
    pub query_id: Option<String>,
    pub n: Option<usize>,
    pub tau: Option<f64>,
}

/// Calendar of a stored query's hits, or of a concept's prototype-query hits
/// within the year. Frames are counted, not clips.
async fn calendar(State(state): State<AppState>, Params(p): Params<CalendarParams>) -> ApiResult<Response> {
    let summary = match (&p.concept, &p.query_id) {
        (Some(_), Some(_)) | (None, None) => {
            return Err(ApiError::bad_request("give exactly one of concept and query_id"));
        }
        (None, Some(q)) => {
            let hits = state.query(q)?;
            calendar_summary(hits.frames(), p.year)?
        }
        (Some(concept), None) => {
            let version = resolve_version(&state, concept, p.version)?;
            let scope = state.indices().restrict(None, Some(p.year));
            let n = p.n.unwrap_or(CALENDAR_HITS);
            let q = PrototypeQuery { n, tau: p.tau.unwrap_or(DEFAULT_TAU), m: n.max(DEFAULT_NEIGHBOURS_PER_REPRESENTATIVE) };
            let st = state.clone();
            blocking(move || {
                if scope.is_empty() {
                    return Ok(calendar_summary(std::iter::empty(), p.year)?);
                }
                let hits = query_by_prototype(&version, &q, &scope, &*st.corpus)?;
                Ok(calendar_summary(hits.frames(), p.year)?)
            })
            .await?
        }
    };
    Ok(Json(summary).into_response())
}

#[derive(Debug, Deserialize)]
pub struct ExampleRequest {
    pub seed: QuerySeed,
    pub n: usize,
    pub sensor: Option<String>,
    pub year: Option<i32>,
}

async fn query_example(State(state): State<AppState>, Body(req): Body<ExampleRequest>) -> ApiResult<Response> {
    let scope = state.indices().restrict(req.sensor.as_deref(), req.year);
    let st = state.clone();
    let hits = blocking(move || Ok(query_by_example(&req.seed, req.n, &scope, &*st.corpus)?)).await?;
    Ok(hits_response(&state, hits))
}

#[derive(Debug, Deserialize)]
pub struct PrototypeRequest {
    pub concept: String,
    pub version: Option<u32>,
    pub n: Option<usize>,
    pub tau: Option<f64>,
    pub m: Option<usize>,
    pub sensor: Option<String>,
    pub year: Option<i32>,
}

async fn query_prototype(State(state): State<AppState>, Body(req): Body<PrototypeRequest>) -> ApiResult<Response> {
    let version = resolve_version(&state, &req.concept, req.version)?;
    let defaults = PrototypeQuery::default();
    let q = PrototypeQuery {
        n: req.n.unwrap_or(defaults.n),
        tau: req.tau.unwrap_or(defaults.tau),
        m: req.m.unwrap_or(defaults.m),
    };
    let scope = state.indices().restrict(req.sensor.as_deref(), req.year);
    let st = state.clone();
    let hits = blocking(move || Ok(query_by_prototype(&version, &q, &scope, &*st.corpus)?)).await?;
    Ok(hits_response(&state, hits))
}

#[derive(Debug, Deserialize)]
pub struct UploadParams {
    #[serde(default = "default_upload_n")]
    pub n: usize,
    /// Which one-second frame of the upload seeds the query.
    #[serde(default)]
    pub frame: usize,
    pub sensor: Option<String>,
    pub year: Option<i32>,
}

fn default_upload_n() -> usize {
    100
}

/// Similarity query seeded by an uploaded WAV clip, embedded with the
/// baseline provider.
async fn query_upload(State(state): State<AppState>, Params(p): Params<UploadParams>, body: Bytes) -> ApiResult<Response> {
    let scope = state.indices().restrict(p.sensor.as_deref(), p.year);
    let dim = scope.indices().first().map(|i| i.dim()).unwrap_or_else(|| state.corpus.dim());
    let st = state.clone();
    let hits = blocking(move || {
        let wave = decode_wav(&body)?;
        let mut frames = baseline_embedding(&wave, dim)?;
        if p.frame >= frames.len() {
            return Err(ApiError::bad_request(format!("frame {} out of range 0..{}", p.frame, frames.len())));
        }
        let seed = QuerySeed::Embedding(frames.swap_remove(p.frame));
        Ok(query_by_example(&seed, p.n, &scope, &*st.corpus)?)
    })
    .await?;
    Ok(hits_response(&state, hits))
}

async fn reload_indices(State(state): State<AppState>) -> ApiResult<Response> {
    let st = state.clone();
    let n = blocking(move || st.reload_indices()).await?;
    Ok(Json(json!({ "indices": n })).into_response())
}

#[derive(Debug, Deserialize)]
pub struct DayLoadRequest {
    pub sensor: String,
    pub date: NaiveDate,
    #[serde(default)]
    pub seed: u64,
}

/// Day view payload: the projection of the whole day and its cluster tree.
#[derive(Serialize)]
struct DayView<'a> {
    layout: &'a Layout,
    tree: &'a ClusterTree,
}

fn build_day_view(state: &AppState, req: &DayLoadRequest) -> ApiResult<(Arc<DayFrameSet>, Layout, ClusterTree)> {
    let day = state.corpus.load_day(&req.sensor, req.date)?;
    let layout = project(day.refs(), &*day, &ProjectionParams::with_seed(req.seed))?;
    let mut tree = build_cluster_tree(&day, &TreeParams { seed: req.seed, ..TreeParams::default() })?;
    let mut prototypes = Vec::new();
    for concept in state.store.concepts() {
        let p = state.store.prototype(&concept)?;
        if p.latest().is_some_and(|v| v.forest.dim == day.dim()) {
            prototypes.push(p);
        }
    }
    decorate_tree(&mut tree, &day, &prototypes.iter().collect::<Vec<_>>())?;
    Ok((day, layout, tree))
}

/// Starts loading a day into the session. A newer load in the same session
/// cancels this one.
async fn day_load(State(state): State<AppState>, sid: SessionId, Body(req): Body<DayLoadRequest>) -> ApiResult<Response> {
    if state.corpus.frames_in_day(&req.sensor, req.date).is_none() {
        return Err(CoreError::MissingDay { sensor: req.sensor, date: req.date.to_string() }.into());
    }
    let session = state.session(&sid.0);
    let (job, generation) = {
        let mut s = session.lock();
        if let Some(prev) = s.pending_load.take() {
            state.jobs.cancel(prev);
        }
        s.load_generation += 1;
        let job = state.jobs.start("day_load");
        s.pending_load = Some(job);
        (job, s.load_generation)
    };
    let st = state.clone();
    tokio::task::spawn_blocking(move || {
        let outcome = build_day_view(&st, &req);
        let mut s = session.lock();
        let current = s.load_generation == generation;
        if current {
            s.pending_load = None;
        }
        match outcome {
            Ok((day, layout, tree)) if current => {
                let result = serde_json::to_value(DayView { layout: &layout, tree: &tree }).map_err(CoreError::from);
                s.day = Some(day);
                s.layouts = vec![layout];
                s.tree = Some(tree);
                s.selection.clear();
                st.jobs.finish(job, result.map_err(ApiError::from));
            }
            Ok(_) => st.jobs.cancel(job),
            Err(e) => st.jobs.finish(job, Err(e)),
        }
    });
    Ok(accepted(job))
}

async fn session_view(State(state): State<AppState>, sid: SessionId) -> Response {
    let session = state.session(&sid.0);
    let view = session.lock().view(&sid.0);
    Json(view).into_response()
}

async fn layout_get(State(state): State<AppState>, sid: SessionId, Path(id): Path<String>) -> ApiResult<Response> {
    let session = state.session(&sid.0);
    let s = session.lock();
    Ok(Json(s.layout(Some(&id))?).into_response())
}

#[derive(Debug, Deserialize)]
pub struct SubsetRequest {
    /// Base layout; the top of the session's stack when absent.
    pub layout_id: Option<String>,
    pub frames: Vec<FrameRef>,
    pub seed: Option<u64>,
}

fn base_layout(session: &Session, id: Option<&str>) -> ApiResult<(Layout, Arc<DayFrameSet>)> {
    Ok((session.layout(id)?.clone(), session.loaded_day()?))
}

async fn derive_layout(
    state: AppState,
    sid: SessionId,
    req: SubsetRequest,
    f: fn(&Layout, &dyn FrameSource, &HashSet<FrameRef>, u64) -> soundscape_core::Result<Layout>,
) -> ApiResult<Response> {
    let session = state.session(&sid.0);
    let (base, day) = base_layout(&session.lock(), req.layout_id.as_deref())?;
    let seed = req.seed.unwrap_or(base.params.seed);
    let frames: HashSet<FrameRef> = req.frames.into_iter().collect();
    let layout = blocking(move || Ok(f(&base, &*day, &frames, seed)?)).await?;
    let body = Json(&layout).into_response();
    session.lock().push_layout(layout);
    Ok(body)
}

async fn layout_reproject(State(state): State<AppState>, sid: SessionId, Body(req): Body<SubsetRequest>) -> ApiResult<Response> {
    derive_layout(state, sid, req, reproject_subset).await
}

async fn layout_remove(State(state): State<AppState>, sid: SessionId, Body(req): Body<SubsetRequest>) -> ApiResult<Response> {
    derive_layout(state, sid, req, remove_and_reproject).await
}

#[derive(Debug, Deserialize)]
pub struct SteerRequest {
    pub layout_id: Option<String>,
    pub concept: String,
    pub seed: Option<u64>,
    pub attract: Option<f32>,
    pub repel: Option<f32>,
}

/// Re-projects a layout with the concept's current labels pulling positives
/// together and pushing opposite labels apart.
async fn layout_steer(State(state): State<AppState>, sid: SessionId, Body(req): Body<SteerRequest>) -> ApiResult<Response> {
    validate_concept(&req.concept)?;
    let session = state.session(&sid.0);
    let (base, day) = base_layout(&session.lock(), req.layout_id.as_deref())?;
    let members: HashSet<&FrameRef> = base.refs.iter().collect();
    let labels: HashMap<FrameRef, Polarity> =
        state.store.log().labels(&req.concept).into_iter().filter(|(r, _)| members.contains(r)).collect();
    let defaults = Steering::new(req.concept.clone());
    let steering = Steering {
        concept: req.concept,
        attract: req.attract.unwrap_or(defaults.attract),
        repel: req.repel.unwrap_or(defaults.repel),
    };
    let params = ProjectionParams { seed: req.seed.unwrap_or(base.params.seed), steering: None, ..base.params.clone() };
    let layout = blocking(move || {
        let mut out = steer(&base.refs, &*day, &labels, steering, &params)?;
        out.parent = Some(base.layout_id.clone());
        Ok(out)
    })
    .await?;
    let body = Json(&layout).into_response();
    session.lock().push_layout(layout);
    Ok(body)
}

async fn tree_get(State(state): State<AppState>, sid: SessionId) -> ApiResult<Response> {
    let session = state.session(&sid.0);
    let s = session.lock();
    let tree = s.tree.as_ref().ok_or_else(|| ApiError::conflict("no_day", "no day loaded in this session"))?;
    Ok(Json(tree).into_response())
}

/// Selects every frame of a cluster-tree node.
async fn tree_select(State(state): State<AppState>, sid: SessionId, Path(node): Path<usize>) -> ApiResult<Response> {
    let session = state.session(&sid.0);
    let mut s = session.lock();
    let tree = s.tree.as_ref().ok_or_else(|| ApiError::conflict("no_day", "no day loaded in this session"))?;
    let frames = select_node(tree, node)?;
    let body = Json(&frames).into_response();
    s.selection = frames;
    Ok(body)
}

#[derive(Debug, Deserialize)]
pub struct SelectionRequest {
    pub frames: Vec<FrameRef>,
}

async fn selection_set(State(state): State<AppState>, sid: SessionId, Body(req): Body<SelectionRequest>) -> ApiResult<Response> {
    let session = state.session(&sid.0);
    let mut s = session.lock();
    let day = s.loaded_day()?;
    if let Some(r) = req.frames.iter().find(|r| day.position(r).is_none()) {
        return Err(ApiError::bad_request(format!("frame {r} is not part of the loaded day")));
    }
    s.selection = req.frames.into_iter().collect();
    Ok(Json(s.view(&sid.0)).into_response())
}

#[derive(Debug, Deserialize)]
pub struct SelectionSummaryRequest {
    /// Defaults to the session's current selection.
    pub frames: Option<Vec<FrameRef>>,
    pub concept: Option<String>,
    pub version: Option<u32>,
}

async fn selection_summary_handler(
    State(state): State<AppState>,
    sid: SessionId,
    Body(req): Body<SelectionSummaryRequest>,
) -> ApiResult<Response> {
    let frames = match req.frames {
        Some(f) => f,
        None => state.session(&sid.0).lock().selection.iter().cloned().collect(),
    };
    let version = match &req.concept {
        Some(c) => Some(resolve_version(&state, c, req.version)?),
        None => None,
    };
    let st = state.clone();
    let summary = blocking(move || Ok(selection_summary(&frames, version.as_deref(), &*st.corpus)?)).await?;
    Ok(Json(summary).into_response())
}

#[derive(Debug, Deserialize)]
pub struct AnnotateRequest {
    #[serde(default = "default_user")]
    pub user: String,
    pub concept: String,
    pub frames: Vec<FrameRef>,
    pub polarity: Polarity,
}

fn default_user() -> String {
    "analyst".into()
}

async fn annotate(State(state): State<AppState>, Body(req): Body<AnnotateRequest>) -> ApiResult<Response> {
    let st = state.clone();
    let id = blocking(move || {
        Ok(st.store.record_annotation(&req.user, &req.concept, &req.frames, req.polarity, &*st.corpus)?)
    })
    .await?;
    Ok(Json(json!({ "annotation_id": id })).into_response())
}

async fn concepts(State(state): State<AppState>) -> Response {
    let mut all: BTreeSet<String> = state.store.log().concepts();
    all.extend(state.store.concepts());
    Json(all).into_response()
}

#[derive(Debug, Deserialize)]
pub struct TrainRequest {
    pub concept: String,
    #[serde(default)]
    pub seed: u64,
    pub n_trees: Option<usize>,
}

/// Starts a training job; at most one per concept.
async fn train(State(state): State<AppState>, Body(req): Body<TrainRequest>) -> ApiResult<Response> {
    validate_concept(&req.concept)?;
    if state.store.is_training(&req.concept) {
        return Err(CoreError::TrainingInProgress(req.concept).into());
    }
    let forest = ForestParams {
        n_trees: req.n_trees.unwrap_or(ForestParams::default().n_trees),
        seed: req.seed,
        ..ForestParams::default()
    };
    let params = TrainParams { seed: req.seed, forest };
    let job = state.jobs.start("train");
    let st = state.clone();
    tokio::task::spawn_blocking(move || {
        let outcome = st
            .store
            .train(&req.concept, &*st.corpus, &params)
            .map_err(ApiError::from)
            .and_then(|v| serde_json::to_value(&*v).map_err(|e| ApiError::from(CoreError::from(e))));
        st.jobs.finish(job, outcome);
    });
    Ok(accepted(job))
}

async fn prototype_summary(State(state): State<AppState>, Path(concept): Path<String>) -> ApiResult<Response> {
    Ok(Json(state.store.model_summary(&concept)?).into_response())
}

#[derive(Debug, Deserialize)]
pub struct SpectrogramParams {
    /// `json` or `png`; otherwise decided by the Accept header.
    pub format: Option<String>,
}

fn clip_audio_path(state: &AppState, clip: &ClipId) -> ApiResult<std::path::PathBuf> {
    state.corpus.clip_frames(clip)?;
    let path = state.corpus.audio_path(clip);
    if !path.exists() {
        return Err(ApiError::not_found("no_audio", format!("clip {clip} has no stored audio")));
    }
    Ok(path)
}

async fn clip_spectrogram(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Params(p): Params<SpectrogramParams>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let clip = parse_clip(&id)?;
    let png = match p.format.as_deref() {
        Some("png") => true,
        Some("json") => false,
        Some(other) => return Err(ApiError::bad_request(format!("unknown format {other}"))),
        None => headers.get(ACCEPT).and_then(|v| v.to_str().ok()).is_some_and(|v| v.contains("image/png")),
    };
    let st = state.clone();
    blocking(move || {
        let spec = spectrogram(&load_wav(&clip_audio_path(&st, &clip)?)?)?;
        if png {
            Ok(([(CONTENT_TYPE, "image/png")], spectrogram_png(&spec)?).into_response())
        } else {
            Ok(Json(spec).into_response())
        }
    })
    .await
}

async fn clip_audio(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let clip = parse_clip(&id)?;
    let st = state.clone();
    blocking(move || {
        let bytes = std::fs::read(clip_audio_path(&st, &clip)?).map_err(CoreError::from)?;
        Ok(([(CONTENT_TYPE, "audio/wav")], bytes).into_response())
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct ClassificationParams {
    /// Comma-separated concepts; every trained concept when absent.
    pub concepts: Option<String>,
}

async fn clip_classification(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Params(p): Params<ClassificationParams>,
) -> ApiResult<Response> {
    let clip = parse_clip(&id)?;
    let names: Vec<String> = match &p.concepts {
        None => state.store.concepts(),
        Some(s) => s.split(',').map(str::trim).filter(|c| !c.is_empty()).map(String::from).collect(),
    };
    let versions = names.iter().map(|c| resolve_version(&state, c, None)).collect::<ApiResult<Vec<_>>>()?;
    let st = state.clone();
    let matrix = blocking(move || Ok(frame_classification_matrix(&clip, &versions, &*st.corpus)?)).await?;
    Ok(Json(matrix).into_response())
}

async fn job(State(state): State<AppState>, Path(id): Path<u64>) -> ApiResult<Response> {
    let job = state.jobs.get(id).ok_or_else(|| ApiError::not_found("unknown_job", format!("unknown job {id}")))?;
    Ok(Json(job).into_response())
}
