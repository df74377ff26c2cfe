use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("unsupported dtype {0:?}, expected \"f32le\"")]
    UnsupportedDtype(String),

    #[error("payload size mismatch: expected {expected} bytes (count x dim x 4), found {actual}")]
    PayloadSizeMismatch { expected: u64, actual: u64 },

    #[error("duplicate item id {0:?}")]
    DuplicateId(String),

    #[error("label count mismatch: {rows} rows but {labels} labels")]
    LabelCountMismatch { rows: usize, labels: usize },

    #[error("id count mismatch: {rows} rows but {ids} ids")]
    IdCountMismatch { rows: usize, ids: usize },

    #[error("malformed labels at line {line}: {message}")]
    Labels { line: usize, message: String },

    #[error("embedding dimension must be at least 1")]
    ZeroDimension,

    #[error("row {id:?} has zero norm and cannot be normalized")]
    ZeroNormRow { id: String },

    #[error("row {id:?} contains a non-finite value")]
    NonFinite { id: String },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("gallery is empty")]
    EmptyGallery,

    #[error("rank must be at least 1, got {0}")]
    InvalidRank(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("k = {k} is outside 1..={len}")]
    CutoffOutOfRange { k: usize, len: usize },

    #[error("query {query_id:?}: query class absent from gallery")]
    NoRelevantItems { query_id: String },

    #[error("invalid retrieval result for query {query_id:?}: {message}")]
    InvalidResult { query_id: String, message: String },

    #[error("no results to average")]
    EmptyResults,

    #[error("class {class} has no {missing} in domain {domain} for triplet mining")]
    TripletMining {
        class: u32,
        missing: &'static str,
        domain: crate::Domain,
    },

    #[error("label {label} outside 0..{classes}")]
    LabelOutOfRange { label: u32, classes: usize },

    #[error("temperature must be positive")]
    NonPositiveTemperature,

    #[error("missing input: {0}")]
    MissingInput(&'static str),

    #[error("invalid synthetic spec: {0}")]
    InvalidSynthSpec(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
