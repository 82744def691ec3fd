use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid encoder config: {0}")]
    Config(String),

    #[error("unknown parameter region for path `{0}`")]
    UnknownRegion(String),

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("non-finite value in `{0}`")]
    NonFinite(String),

    #[error("computation graph already consumed by a previous backward pass")]
    GraphConsumed,

    #[error("finite-difference step must be positive, got {0}")]
    DegenerateStep(f64),

    #[error("target of length {target_len} needs at least {required} frames, got {frames}")]
    InfeasibleTarget {
        target_len: usize,
        required: usize,
        frames: usize,
    },

    #[error("label {label} outside [1, {max}]")]
    InvalidLabel { label: usize, max: usize },

    #[error("{0} must be within [0, 1], got {1}")]
    OutOfRange(&'static str, f64),

    #[error("reference text is empty; CER undefined")]
    EmptyReference,

    #[error("reference and hypothesis counts differ: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("invalid language spec: {0}")]
    Language(String),

    #[error("unknown language `{0}`")]
    UnknownLanguage(String),

    #[error("empty text cannot be synthesized into frames")]
    EmptyText,

    #[error("invalid corpus spec: {0}")]
    Corpus(String),

    #[error("no prunable parameters")]
    EmptyPrunableSet,

    #[error("mask domains differ: {0}")]
    MaskDomain(String),

    #[error("IOU undefined: both masks have no surviving entries")]
    EmptyUnion,

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("missing grid cell: {0}")]
    MissingCell(String),

    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error("config error at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used in machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "encoder_config",
            Error::UnknownRegion(_) => "unknown_region",
            Error::MissingParameter(_) => "missing_parameter",
            Error::NonFinite(_) => "non_finite",
            Error::GraphConsumed => "graph_consumed",
            Error::DegenerateStep(_) => "degenerate_step",
            Error::InfeasibleTarget { .. } => "infeasible_target",
            Error::InvalidLabel { .. } => "invalid_label",
            Error::OutOfRange(..) => "out_of_range",
            Error::EmptyReference => "empty_reference",
            Error::LengthMismatch(..) => "length_mismatch",
            Error::Language(_) => "language",
            Error::UnknownLanguage(_) => "unknown_language",
            Error::EmptyText => "empty_text",
            Error::Corpus(_) => "corpus",
            Error::EmptyPrunableSet => "empty_prunable_set",
            Error::MaskDomain(_) => "mask_domain",
            Error::EmptyUnion => "empty_union",
            Error::EmptyCorpus => "empty_corpus",
            Error::MissingCell(_) => "missing_cell",
            Error::BadMagic(_) => "bad_magic",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::Truncated(_) => "truncated",
            Error::Malformed(_) => "malformed",
            Error::Schema { .. } => "config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
