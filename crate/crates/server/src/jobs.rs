use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{ApiError, ErrorBody};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Running,
    Done,
    Failed,
    Cancelled,
}

/// What `GET /jobs/{id}` returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: u64,
    pub kind: String,
    pub status: JobStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

#[derive(Debug, Default)]
pub struct Jobs {
    next: AtomicU64,
    jobs: Mutex<HashMap<u64, Job>>,
}

impl Jobs {
    pub fn start(&self, kind: &str) -> u64 {
        let id = self.next.fetch_add(1, Ordering::Relaxed) + 1;
        self.jobs.lock().insert(id, Job { id, kind: kind.to_string(), status: JobStatus::Running, result: None, error: None });
        id
    }

    /// Records the outcome unless the job was cancelled meanwhile.
    pub fn finish(&self, id: u64, outcome: Result<Value, ApiError>) {
        let mut jobs = self.jobs.lock();
        let Some(job) = jobs.get_mut(&id) else { return };
        if job.status == JobStatus::Cancelled {
            return;
        }
        match outcome {
            Ok(v) => {
                job.status = JobStatus::Done;
                job.result = Some(v);
            }
            Err(e) => {
                job.status = JobStatus::Failed;
                job.error = Some(e.body());
            }
        }
    }

    pub fn cancel(&self, id: u64) {
        if let Some(job) = self.jobs.lock().get_mut(&id) {
            if job.status == JobStatus::Running {
                job.status = JobStatus::Cancelled;
            }
        }
    }

    pub fn get(&self, id: u64) -> Option<Job> {
        self.jobs.lock().get(&id).cloned()
    }
}
