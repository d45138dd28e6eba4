use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in logits")]
    NonFiniteLogits,
    #[error("vector norm below 1e-12")]
    ZeroNormVector,
    #[error("rotary embedding requires an even dimension, got {0}")]
    OddRotaryDim(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("max_seq_len {requested} exceeds the implementation cap of {cap}")]
    ConfigTooLarge { requested: usize, cap: usize },
    #[error("token id {token} at position {position} is outside the vocabulary (size {vocab})")]
    TokenOutOfRange {
        token: u32,
        position: usize,
        vocab: usize,
    },
    #[error("position {position} outside sequence of length {len}")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("partial forward requested before the cache was populated by a full pass")]
    ColdCache,
    #[error("output position {0} is not in the recompute set")]
    OutputsNotRecomputed(usize),

    #[error("no masked positions remain")]
    GenerationComplete,
    #[error("max entropy requested over an empty decoded set")]
    NoDecodedTokens,
    #[error("position {0} decoded twice")]
    DoubleDecode(usize),

    #[error("rank vector is constant; correlation undefined")]
    DegenerateRanks,
    #[error("covariance has rank zero")]
    DegenerateCovariance,

    #[error("failed to write {path}: {source}")]
    WriteFailed {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("payload checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("weights file config does not match requested config: {0}")]
    ConfigMismatch(String),
    #[error("not an ECW1 weights file")]
    NotAWeightsFile,
    #[error("weights file truncated")]
    Truncated,

    #[error("comparison requires a baseline row")]
    NoBaselineReference,
    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Whether the error stems from user input rather than runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Usage(_)
                | Error::InvalidConfig(_)
                | Error::ConfigTooLarge { .. }
                | Error::TokenOutOfRange { .. }
                | Error::ConfigMismatch(_)
        )
    }
}
