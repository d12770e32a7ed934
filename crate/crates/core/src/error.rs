use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dim mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("non-finite embedding value")]
    NonFinite,

    #[error("frame index {0} out of range 0..=9")]
    FrameIndexOutOfRange(u32),

    #[error("frameset mixes {0}")]
    MixedFrameset(&'static str),

    #[error("duplicate frame {0}")]
    DuplicateFrame(String),

    #[error("incomplete clip {sensor}@{clip_start}: {found} of 10 frames")]
    IncompleteClip { sensor: String, clip_start: i64, found: usize },

    #[error("bad magic in {0}")]
    BadMagic(PathBuf),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated or corrupt file: {0}")]
    Corrupt(String),

    #[error("duplicate day {sensor} {date}")]
    DuplicateDay { sensor: String, date: String },

    #[error("missing day {sensor} {date}")]
    MissingDay { sensor: String, date: String },

    #[error("unknown sensor {0}")]
    UnknownSensor(String),

    #[error("unknown frame {0}")]
    UnknownFrame(String),

    #[error("unknown clip {0}")]
    UnknownClip(String),

    #[error("invalid path layout: {0}")]
    PathLayout(PathBuf),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("subset not contained in parent layout")]
    NotASubset,

    #[error("no positives for concept {0}")]
    NoPositives(String),

    #[error("degenerate training data: {0}")]
    Degenerate(&'static str),

    #[error("unknown concept {0}")]
    UnknownConcept(String),

    #[error("concept {0} has no trained version")]
    Untrained(String),

    #[error("concept {0} has no representatives")]
    NoRepresentatives(String),

    #[error("training already running for concept {0}")]
    TrainingInProgress(String),

    #[error("unknown node {0}")]
    UnknownNode(usize),

    #[error("unsupported audio: {0}")]
    UnsupportedAudio(String),

    #[error("audio too short: {0}")]
    TooShort(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

impl Error {
    /// Stable machine-readable code, used by the HTTP facade.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DimMismatch { .. } => "dim_mismatch",
            Error::NonFinite => "non_finite",
            Error::FrameIndexOutOfRange(_) => "frame_index",
            Error::MixedFrameset(_) => "mixed_frameset",
            Error::DuplicateFrame(_) => "duplicate_frame",
            Error::IncompleteClip { .. } => "incomplete_clip",
            Error::BadMagic(_) => "bad_magic",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::Corrupt(_) => "corrupt",
            Error::DuplicateDay { .. } => "duplicate_day",
            Error::MissingDay { .. } => "missing_day",
            Error::UnknownSensor(_) => "unknown_sensor",
            Error::UnknownFrame(_) => "unknown_frame",
            Error::UnknownClip(_) => "unknown_clip",
            Error::PathLayout(_) => "path_layout",
            Error::Empty(_) => "empty",
            Error::InvalidParam(_) => "invalid_param",
            Error::NotASubset => "not_a_subset",
            Error::NoPositives(_) => "no_positives",
            Error::Degenerate(_) => "degenerate",
            Error::UnknownConcept(_) => "unknown_concept",
            Error::Untrained(_) => "untrained",
            Error::NoRepresentatives(_) => "no_representatives",
            Error::TrainingInProgress(_) => "training_in_progress",
            Error::UnknownNode(_) => "unknown_node",
            Error::UnsupportedAudio(_) => "unsupported_audio",
            Error::TooShort(_) => "too_short",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Wav(_) => "wav",
        }
    }

    /// True when the error describes something the caller asked for that
    /// does not exist.
    pub fn is_not_found(&self) -> bool {
        matches!(
            self,
            Error::MissingDay { .. }
                | Error::UnknownSensor(_)
                | Error::UnknownFrame(_)
                | Error::UnknownClip(_)
                | Error::UnknownConcept(_)
                | Error::UnknownNode(_)
        )
    }
}
