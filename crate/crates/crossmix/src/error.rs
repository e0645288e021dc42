//! Crate-wide error type and result alias.

use std::fmt;
use std::io;

use crate::Modality;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the kernel, mixture fitting, losses, data handling,
/// training, and evaluation layers.
#[derive(Debug)]
pub enum Error {
    /// A tensor constructor received data that does not match its shape.
    InvalidShape {
        rows: usize,
        cols: usize,
        len: usize,
    },
    /// An operation was asked to combine tensors of incompatible shapes.
    ShapeMismatch {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },
    /// Backward pass was started from a node that is not a scalar.
    NonScalarLoss { shape: [usize; 2] },
    /// L2 normalization of a vector whose norm is numerically zero.
    DegenerateNorm { norm: f64 },
    /// A masked reduction that requires at least one selected entry got none.
    EmptyMask { op: &'static str },
    /// A weighted mean received weights that sum to zero or less.
    ZeroWeightSum { total: f64 },
    /// A gradient contained NaN; the parameter is named for diagnosis.
    NanGradient { param: String },
    /// A configuration field holds an unusable value.
    InvalidConfig {
        field: &'static str,
        reason: String,
    },

    /// Mixture fitting needs at least as many descriptors as components.
    TooFewDescriptors {
        descriptors: usize,
        components: usize,
    },
    /// Vector dimension differs from the mixture dimension.
    DimensionMismatch { expected: usize, got: usize },
    /// Every component density underflowed for one descriptor; raise the
    /// variance floor or rescale the features.
    DensityUnderflow { descriptor: usize },

    /// Contrastive loss needs at least two components in the given modality.
    NeedsMultipleComponents { modality: Modality },
    /// A contrastive batch needs at least two samples.
    BatchTooSmall { size: usize },
    /// A batch embedding failed the unit-norm invariant.
    NotUnitNorm { sample: usize, norm: f64 },

    /// Underlying I/O failure.
    Io(io::Error),
    /// JSON parse failure during import.
    Json(serde_json::Error),
    /// The file does not start with the expected magic bytes.
    BadMagic { found: [u8; 4] },
    /// The file declares a format version this build cannot read.
    UnsupportedVersion { found: u32, expected: u32 },
    /// The file ended before the declared payload was complete.
    Truncated { expected: u64, actual: u64 },
    /// A structural problem at a known byte offset.
    Malformed { offset: u64, reason: String },
    /// A class does not have enough samples for the requested split.
    InsufficientSamples {
        class: u32,
        have: usize,
        need: usize,
    },

    /// A loss term became non-finite during training.
    NonFiniteLoss { batch: usize, term: &'static str },
    /// Fine-tuning was requested with an empty support set; skip it instead.
    FinetuneWithoutSupport,
    /// Checkpoint payload failed validation.
    CheckpointCorrupt { reason: String },

    /// Ranking was asked to search an empty gallery.
    EmptyGallery,
    /// A query has no relevant gallery item, so average precision is undefined.
    NoRelevantItems { query: u64 },

    /// Command-line usage problem (bad flags or flag combination).
    Usage { message: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidShape { rows, cols, len } => {
                write!(f, "shape {rows}x{cols} does not match data length {len}")
            }
            Error::ShapeMismatch { op, left, right } => write!(
                f,
                "{op}: incompatible shapes {}x{} and {}x{}",
                left[0], left[1], right[0], right[1]
            ),
            Error::NonScalarLoss { shape } => write!(
                f,
                "backward requires a scalar loss, got shape {}x{}",
                shape[0], shape[1]
            ),
            Error::DegenerateNorm { norm } => {
                write!(f, "cannot L2-normalize a vector with norm {norm:e}")
            }
            Error::EmptyMask { op } => write!(f, "{op}: mask selects no entries"),
            Error::ZeroWeightSum { total } => {
                write!(f, "weighted mean needs a positive weight total, got {total}")
            }
            Error::NanGradient { param } => write!(f, "gradient for `{param}` contains NaN"),
            Error::InvalidConfig { field, reason } => write!(f, "config `{field}`: {reason}"),
            Error::TooFewDescriptors {
                descriptors,
                components,
            } => write!(
                f,
                "{descriptors} descriptors cannot support {components} mixture components"
            ),
            Error::DimensionMismatch { expected, got } => {
                write!(f, "expected dimension {expected}, got {got}")
            }
            Error::DensityUnderflow { descriptor } => write!(
                f,
                "all component densities underflowed for descriptor {descriptor}; \
                 consider a larger variance floor"
            ),
            Error::NeedsMultipleComponents { modality } => write!(
                f,
                "contrastive loss needs at least 2 {modality} components per sample"
            ),
            Error::BatchTooSmall { size } => {
                write!(f, "contrastive batch needs at least 2 samples, got {size}")
            }
            Error::NotUnitNorm { sample, norm } => write!(
                f,
                "embedding of sample {sample} has norm {norm} (expected 1)"
            ),
            Error::Io(e) => write!(f, "I/O error: {e}"),
            Error::Json(e) => write!(f, "JSON error: {e}"),
            Error::BadMagic { found } => write!(f, "bad magic bytes {found:?}"),
            Error::UnsupportedVersion { found, expected } => {
                write!(f, "unsupported format version {found} (expected {expected})")
            }
            Error::Truncated { expected, actual } => write!(
                f,
                "file truncated: expected {expected} bytes, found {actual}"
            ),
            Error::Malformed { offset, reason } => {
                write!(f, "malformed data at byte {offset}: {reason}")
            }
            Error::InsufficientSamples { class, have, need } => write!(
                f,
                "class {class} has {have} samples but the split needs {need}"
            ),
            Error::NonFiniteLoss { batch, term } => {
                write!(f, "non-finite `{term}` loss in batch {batch}")
            }
            Error::FinetuneWithoutSupport => {
                write!(f, "k = 0 episode has no support samples; skip fine-tuning")
            }
            Error::CheckpointCorrupt { reason } => write!(f, "corrupt checkpoint: {reason}"),
            Error::EmptyGallery => write!(f, "retrieval gallery is empty"),
            Error::NoRelevantItems { query } => write!(
                f,
                "query {query} has no relevant gallery item; average precision is undefined"
            ),
            Error::Usage { message } => write!(f, "usage error: {message}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
