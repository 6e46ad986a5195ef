//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid {h}x{w} is not divisible into {m}x{m} regions")]
    ShapeNotDivisible { h: usize, w: usize, m: usize },
    #[error("invalid grid shape: {0}")]
    BadShape(String),
    #[error("sequence index {index} out of range (token count {count})")]
    SeqIndexOutOfRange { index: usize, count: usize },
    #[error("grid coordinate ({t},{y},{x}) out of range for {shape}")]
    CoordOutOfRange { t: usize, y: usize, x: usize, shape: String },
    #[error("mask size {got} does not match layout slot count {expected}")]
    MaskSizeMismatch { got: usize, expected: usize },
    #[error("head_dim {head_dim} is not divisible by 2*axes ({axes} axes)")]
    BadHeadDim { head_dim: usize, axes: usize },
    #[error("coordinate {coord} on axis {axis} exceeds table bound {bound}")]
    RopeCoordOutOfRange { coord: usize, axis: usize, bound: usize },
    #[error("vector length {got} does not match head_dim {expected}")]
    BadVectorLen { got: usize, expected: usize },
    #[error("invalid model config: {0}")]
    BadModelConfig(String),
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch { context: String, expected: String, got: String },
    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("non-finite loss at step {step}; parameters left untouched")]
    NonFiniteLoss { step: usize },
    #[error("logit row {row} has no finite entry to sample from")]
    DegenerateLogits { row: usize },
    #[error("chunk does not match the next attention group: {0}")]
    ChunkMismatch(String),
    #[error("decoder state desync: {0}")]
    DecodeDesync(String),
    #[error("sampler config invalid: {0}")]
    BadSampler(String),
    #[error("regression is ill-posed: {samples} samples for {dims} unknowns; need more data")]
    IllPosed { samples: usize, dims: usize },
    #[error("normal equations are rank-deficient with ridge 0; retry with ridge > 0")]
    RankDeficient,
    #[error("conditioning dimension {got} exceeds cap {cap}; raise the cap or subsample")]
    ConditioningTooLarge { got: usize, cap: usize },
    #[error("dataset too small: {0}")]
    InsufficientSamples(String),
    #[error("synthetic config invalid: {0}")]
    BadSyntheticConfig(String),
    #[error("bad file magic at offset {offset}: expected {expected:?}, found {found:?}")]
    BadMagic { offset: usize, expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported file version {found} (expected {expected}) at offset {offset}")]
    BadVersion { offset: usize, expected: u32, found: u32 },
    #[error("file truncated: needed {needed} bytes at offset {offset}, only {available} remain")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("malformed file: {0}")]
    MalformedFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
