//! Core engine for exploring large urban-audio embedding corpora.
//!
//! The crate is organised around the analyst loop: frames are ingested into a
//! [`corpus::Corpus`], indexed for nearest-neighbour search
//! ([`index::SimilarityIndex`]), projected and clustered per day
//! ([`projection`], [`cluster`]), labelled and turned into concept classifiers
//! ([`prototype`]), and finally used to scan the corpus ([`query`]).
//! [`audio`] holds the optional raw-audio path (WAV, spectrograms and a
//! deterministic baseline embedding).

pub mod audio;
pub mod cluster;
pub mod corpus;
pub mod error;
pub mod index;
pub mod metrics;
pub mod projection;
pub mod prototype;
pub mod query;
pub mod synthetic;
pub mod types;

pub use error::{Error, Result};
pub use types::{Embedding, FrameRef, Frame, FrameSource, Polarity, FRAMES_PER_CLIP};
