//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Two masks (or a mask and a search space) disagree on length.
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    /// Architecture mask prunes every operation; channel sparsity is undefined.
    #[error("degenerate mask: architecture sparsity is 1, no operations left to prune channels from")]
    DegenerateMask,

    /// Tensor shapes do not line up with the configured search space.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Non-finite value where a finite one is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A data split that must be non-empty is empty.
    #[error("empty split: {0}")]
    EmptySplit(String),

    /// Not enough samples to satisfy a partition precondition.
    #[error("not enough samples: need at least {needed}, got {got}")]
    NotEnoughSamples { needed: usize, got: usize },

    /// Partition retries exhausted without satisfying the per-client minimum.
    #[error("partition failed after {attempts} attempts: {reason}")]
    PartitionFailed { attempts: usize, reason: String },

    /// A mask log line failed to parse. Lines are 1-indexed.
    #[error("mask log line {line}: {msg}")]
    MaskLogParse { line: usize, msg: String },

    /// IDX file carries the wrong magic number.
    #[error("{path}: bad IDX magic 0x{got:08x}, expected 0x{expected:08x}")]
    IdxBadMagic { path: String, got: u32, expected: u32 },

    /// IDX file ends before the declared payload.
    #[error("{path}: truncated IDX file, expected {expected} bytes, got {got}")]
    IdxTruncated { path: String, expected: usize, got: usize },

    /// Image and label files disagree on sample count.
    #[error("IDX count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    /// Numeric cell failed to parse. Row and column are 1-indexed (header is row 1).
    #[error("csv parse error at row {row}, column {col}: {msg}")]
    CsvParse { row: usize, col: usize, msg: String },

    /// CSV is missing a required column or has an unusable layout.
    #[error("csv schema error: {0}")]
    CsvSchema(String),

    /// Dataset has no samples.
    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    /// Checkpoint contents are inconsistent with the requested run.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
