use std::path::PathBuf;

use crate::factorize::FactorizedMatrix;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("rank {rank} out of range [1, {max}]")]
    RankOutOfRange { rank: usize, max: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("reference matrix has zero Frobenius norm")]
    ZeroNorm,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("token id {token} at position {position} outside vocabulary of {vocab}")]
    InvalidToken {
        token: u32,
        position: usize,
        vocab: usize,
    },

    #[error("sequence of length {len} exceeds context of {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("rank deficient: {available} nonzero directions, {requested} requested")]
    RankDeficient { available: usize, requested: usize },

    #[error("optimization diverged after {batches} batches")]
    Diverged {
        batches: usize,
        /// Best finite iterate seen before the loss became non-finite.
        last_finite: Box<FactorizedMatrix>,
    },

    #[error("corpus has {available} tokens, {required} required")]
    CorpusTooSmall { available: usize, required: usize },

    #[error("fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("adapter cache has no entry for layer {layer} {kind} at level {level}")]
    MissingEntry {
        layer: usize,
        kind: String,
        level: usize,
    },

    #[error("baseline outputs are required for baseline-agreement tasks")]
    MissingBaseline,

    #[error("no chromosome qualifies for bottleneck analysis")]
    EmptySelection,

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn mismatch(
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    ) -> Self {
        Error::DimensionMismatch { op, lhs, rhs }
    }
}
