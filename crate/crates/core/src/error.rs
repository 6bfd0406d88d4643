use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    WeightShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("tap `{0}` is not part of this backbone")]
    UnknownTap(String),

    #[error("tap ordering violated: cannot run from `{from}` to `{to}`")]
    TapOrder { from: String, to: String },

    #[error("input resolution {found:?} does not match declared {expected:?}")]
    Resolution {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("enhancer changes feature shape at `{tap}`: {input:?} -> {output:?}")]
    ShapeChangingEnhancer {
        tap: String,
        input: Vec<usize>,
        output: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("not enough data: {0}")]
    InsufficientData(String),

    #[error("corrupt container {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("digest mismatch in {path}: manifest says {expected}, payload hashes to {found}")]
    Digest {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),

    #[error("non-finite {what} at step {step} (batch seed {batch_seed})")]
    NonFinite {
        what: String,
        step: usize,
        batch_seed: u64,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable snake_case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::UnknownArchitecture(_) => "unknown_architecture",
            Error::WeightShape { .. } => "weight_shape",
            Error::MissingTensor(_) => "missing_tensor",
            Error::UnknownTap(_) => "unknown_tap",
            Error::TapOrder { .. } => "tap_order",
            Error::Resolution { .. } => "resolution",
            Error::ShapeChangingEnhancer { .. } => "shape_changing_enhancer",
            Error::Config(_) => "config",
            Error::Dataset(_) => "dataset",
            Error::InsufficientData(_) => "insufficient_data",
            Error::Corrupt { .. } => "corrupt",
            Error::Digest { .. } => "digest",
            Error::Incompatible(_) => "incompatible",
            Error::NonFinite { .. } => "non_finite",
            Error::Invalid(_) => "invalid",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
