//! Crate-wide error type.
//!
//! Every fallible operation in this crate returns [`Error`]; the variants
//! carry enough context (dims, paths, offending values) that a caller can
//! print them and know what went wrong without a backtrace.

use crate::grid::Dims;

/// Unified error for grid ops, file formats, training, and inference.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Intensity window with `lo >= hi`.
    #[error("invalid window: lo ({lo}) must be < hi ({hi})")]
    InvalidWindow { lo: f64, hi: f64 },

    /// An operation that needs at least one foreground voxel got none.
    #[error("mask is empty: {context}")]
    EmptyMask { context: String },

    /// Bounding box with inverted or out-of-range corners.
    #[error("invalid bbox: min {min:?} max {max:?} within dims {dims:?}")]
    InvalidBBox {
        min: [usize; 3],
        max: [usize; 3],
        dims: Dims,
    },

    /// Dimension or length mismatch between grids or buffers.
    #[error("shape mismatch: {context} (expected {expected:?}, got {got:?})")]
    ShapeError {
        context: String,
        expected: Dims,
        got: Dims,
    },

    /// Mix coefficient outside `[0, 1]`.
    #[error("mix coefficient {a} outside [0, 1]")]
    InvalidMix { a: f64 },

    /// Bad value in a run configuration or network configuration.
    #[error("config error: {0}")]
    ConfigError(String),

    /// Operation called on an object in the wrong state.
    #[error("state error: {0}")]
    StateError(String),

    /// Malformed file contents (bad magic, bad field value, trailing bytes).
    #[error("format error in {path}: {reason}")]
    FormatError { path: String, reason: String },

    /// File ended before the declared payload was read.
    #[error("truncated file {path}: needed {needed} more bytes")]
    TruncatedFile { path: String, needed: usize },

    /// Payload dtype does not match what the caller asked for.
    #[error("dtype mismatch in {path}: expected {expected}, got {got}")]
    TypeError {
        path: String,
        expected: String,
        got: String,
    },

    /// NaN or infinite gradient encountered during an optimizer step.
    #[error("non-finite gradient in parameter '{param}' at iteration {iter}")]
    NonFiniteGradient { param: String, iter: usize },

    /// Contrastive sampling found no usable tumor cell in the patch.
    #[error("no tumor cells eligible for contrastive sampling in this patch")]
    NoTumorInPatch,

    /// A feature vector had zero norm where a direction was required.
    #[error("degenerate feature: {context}")]
    DegenerateFeature { context: String },

    /// Phantom generation gave up after repeated rejection sampling.
    #[error("phantom generation failed after {attempts} attempts: {reason}")]
    GenerationFailed { attempts: usize, reason: String },

    /// Underlying I/O failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Attach a path to a raw `std::io::Error`.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
