use std::collections::{BTreeSet, HashMap, VecDeque};
use std::path::PathBuf;
use std::sync::Arc;

use chrono::NaiveDate;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use soundscape_core::cluster::ClusterTree;
use soundscape_core::corpus::{Corpus, DayFrameSet};
use soundscape_core::projection::Layout;
use soundscape_core::prototype::PrototypeStore;
use soundscape_core::query::{HitSet, IndexSet};
use soundscape_core::{FrameRef, FrameSource};

use crate::error::{ApiError, ApiResult};
use crate::jobs::Jobs;

pub const DEFAULT_PORT: u16 = 8080;
const QUERY_CACHE: usize = 64;

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub corpus_root: PathBuf,
    pub store_root: PathBuf,
    /// Defaults to `<corpus_root>/indices`.
    pub index_dir: Option<PathBuf>,
    pub host: String,
    pub port: u16,
    /// Expected embedding dimension; checked against the corpus when set.
    pub dim: Option<usize>,
}

impl ServeConfig {
    pub fn new(corpus_root: impl Into<PathBuf>, store_root: impl Into<PathBuf>) -> Self {
        Self {
            corpus_root: corpus_root.into(),
            store_root: store_root.into(),
            index_dir: None,
            host: "127.0.0.1".into(),
            port: DEFAULT_PORT,
            dim: None,
        }
    }

    pub fn index_dir(&self) -> PathBuf {
        self.index_dir.clone().unwrap_or_else(|| self.corpus_root.join("indices"))
    }
}

/// Per-session exploration state. Layouts form a stack; the first entry is
/// the projection of the loaded day.
#[derive(Default)]
pub struct Session {
    pub day: Option<Arc<DayFrameSet>>,
    pub layouts: Vec<Layout>,
    pub tree: Option<ClusterTree>,
    pub selection: BTreeSet<FrameRef>,
    pub load_generation: u64,
    pub pending_load: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadedDay {
    pub sensor: String,
    pub date: NaiveDate,
}

/// What `GET /session` returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub day: Option<LoadedDay>,
    pub layouts: Vec<String>,
    pub selection: Vec<FrameRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending_load: Option<u64>,
}

impl Session {
    pub fn view(&self, session_id: &str) -> SessionState {
        SessionState {
            session_id: session_id.to_string(),
            day: self.day.as_ref().map(|d| LoadedDay { sensor: d.sensor_id.clone(), date: d.date }),
            layouts: self.layouts.iter().map(|l| l.layout_id.clone()).collect(),
            selection: self.selection.iter().cloned().collect(),
            pending_load: self.pending_load,
        }
    }

    pub fn loaded_day(&self) -> ApiResult<Arc<DayFrameSet>> {
        self.day.clone().ok_or_else(|| ApiError::conflict("no_day", "no day loaded in this session"))
    }

    /// The layout with the given id, or the top of the stack.
    pub fn layout(&self, id: Option<&str>) -> ApiResult<&Layout> {
        match id {
            Some(id) => self
                .layouts
                .iter()
                .find(|l| l.layout_id == id)
                .ok_or_else(|| ApiError::not_found("unknown_layout", format!("unknown layout {id}"))),
            None => self.layouts.last().ok_or_else(|| ApiError::conflict("no_day", "no day loaded in this session")),
        }
    }

    pub fn push_layout(&mut self, layout: Layout) {
        // Re-running an identical projection does not grow the stack.
        if self.layouts.iter().all(|l| l.layout_id != layout.layout_id) {
            self.layouts.push(layout);
        }
    }
}

pub struct Inner {
    pub config: ServeConfig,
    pub corpus: Arc<Corpus>,
    pub store: Arc<PrototypeStore>,
    pub indices: RwLock<Arc<IndexSet>>,
    pub sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    pub jobs: Jobs,
    queries: Mutex<(u64, VecDeque<(String, Arc<HitSet>)>)>,
}

#[derive(Clone)]
pub struct AppState(pub Arc<Inner>);

impl std::ops::Deref for AppState {
    type Target = Inner;

    fn deref(&self) -> &Inner {
        &self.0
    }
}

impl AppState {
    pub fn open(config: ServeConfig) -> ApiResult<Self> {
        let corpus = Corpus::open(&config.corpus_root)?;
        if let Some(dim) = config.dim {
            if corpus.frame_count() > 0 && corpus.dim() != dim {
                return Err(soundscape_core::Error::DimMismatch { expected: dim, actual: corpus.dim() }.into());
            }
        }
        let store = PrototypeStore::open(&config.store_root)?;
        let dir = config.index_dir();
        let indices = if dir.is_dir() { IndexSet::load_dir(&dir)? } else { IndexSet::new(Vec::new()) };
        Ok(Self(Arc::new(Inner {
            config,
            corpus: Arc::new(corpus),
            store: Arc::new(store),
            indices: RwLock::new(Arc::new(indices)),
            sessions: Mutex::new(HashMap::new()),
            jobs: Jobs::default(),
            queries: Mutex::new((0, VecDeque::new())),
        })))
    }

    pub fn session(&self, id: &str) -> Arc<Mutex<Session>> {
        self.sessions.lock().entry(id.to_string()).or_default().clone()
    }

    pub fn indices(&self) -> Arc<IndexSet> {
        self.indices.read().clone()
    }

    /// Reloads the index directory, e.g. after `soundscape index` ran.
    pub fn reload_indices(&self) -> ApiResult<usize> {
        let dir = self.config.index_dir();
        let set = if dir.is_dir() { IndexSet::load_dir(&dir)? } else { IndexSet::new(Vec::new()) };
        let n = set.len();
        *self.indices.write() = Arc::new(set);
        Ok(n)
    }

    /// Keeps a hit set for later calendar requests and returns its id.
    pub fn remember_query(&self, hits: Arc<HitSet>) -> String {
        let mut q = self.queries.lock();
        q.0 += 1;
        let id = format!("q{}", q.0);
        q.1.push_back((id.clone(), hits));
        while q.1.len() > QUERY_CACHE {
            q.1.pop_front();
        }
        id
    }

    pub fn query(&self, id: &str) -> ApiResult<Arc<HitSet>> {
        self.queries
            .lock()
            .1
            .iter()
            .find(|(q, _)| q == id)
            .map(|(_, h)| h.clone())
            .ok_or_else(|| ApiError::not_found("unknown_query", format!("unknown query {id}")))
    }
}
