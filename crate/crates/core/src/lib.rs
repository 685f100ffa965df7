//! Tile-based panoramic video streaming.
//!
//! * [`geometry`] – periodic viewport distances, tile masks, IoU.
//! * [`vp`] – multi-head transformer viewport predictor and its training.
//! * [`qoe`] – three-term QoE model and preference pool.
//! * [`simenv`] – deterministic chunk-level streaming simulator.
//! * [`agent`] / [`identifier`] – preference-conditioned policy and the
//!   preference regressor whose error shapes the reward.
//! * [`orchestrator`] – the alternating identifier/PPO training loop and
//!   evaluation campaigns.
//! * [`traces`] – synthetic viewport/bandwidth/manifest generators and CSV IO.
//! * [`registry`] – name-keyed factories for policies, predictors and
//!   generators.

pub mod agent;
pub mod config;
pub mod geometry;
pub mod identifier;
pub mod orchestrator;
pub mod qoe;
pub mod registry;
pub mod report;
pub mod simenv;
pub mod traces;
pub mod vp;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("tile grids differ: {left:?} vs {right:?}")]
    GridMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("viewport mask is empty")]
    EmptyMask,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("batch too small: {0}")]
    DegenerateBatch(String),
    #[error("session already finished")]
    SessionFinished,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unknown {kind} {name:?}; known: {known}")]
    UnknownName {
        kind: &'static str,
        name: String,
        known: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Nn(#[from] tilestream_nn::NnError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Deterministic generator used everywhere a seed is accepted.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Seeds a [`Rng`] from a master seed and a stream label, so that
/// independent consumers of one seed never share a sequence.
pub fn rng_for(seed: u64, stream: u64) -> Rng {
    use rand::SeedableRng;
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        ^ 0x5851_F42D_4C95_7F2D;
    Rng::seed_from_u64(mixed)
}
