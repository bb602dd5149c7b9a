use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("system {id}: invalid {field}: {message}")]
    Invalid {
        id: String,
        field: &'static str,
        message: String,
    },

    #[error("duplicate system id {0}")]
    DuplicateId(String),

    #[error("unknown element symbol {0:?}")]
    UnknownElement(String),

    #[error("cell is singular (determinant {0:e})")]
    SingularCell(f64),

    #[error("system {0}: no binding detected between adsorbate and surface")]
    NoBinding(String),

    #[error("malformed description cache: {0}")]
    Cache(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("masking rate {0} outside (0, 1)")]
    MaskRate(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("invalid model configuration: {0}")]
    Config(String),

    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("vocabulary file: {0}")]
    Vocab(String),

    #[error("training: {0}")]
    Training(String),

    #[error("attention was not captured for this forward pass")]
    AttentionNotCaptured,

    #[error("token position {0} is not assigned to any word")]
    UnassignedToken(usize),

    #[error("layer {layer} out of range for a {n_layers}-layer record")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    #[error("{0}")]
    Data(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
