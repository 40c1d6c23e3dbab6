use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),

    #[error("invalid basis: {0}")]
    InvalidBasis(String),

    #[error("dimension mismatch: {0}")]
    DimError(String),

    #[error("invalid engine config: {0}")]
    ConfigError(String),

    #[error("vocabulary error: {0}")]
    VocabError(String),

    #[error("anchor set `{0}` is empty")]
    EmptyAnchors(String),

    #[error("probe class `{0}` is empty")]
    EmptyClass(&'static str),

    #[error("evaluation set is empty")]
    EmptyEval,

    #[error("no peer concepts to measure retention on")]
    NoPeers,

    #[error("detector calibration infeasible for `{concept}`: detection {detection:.3} at threshold {threshold:.4}, false-positive rate {false_positive:.3}")]
    CalibrationInfeasible {
        concept: String,
        threshold: f64,
        detection: f64,
        false_positive: f64,
    },

    #[error("insufficient samples: {0}")]
    SampleError(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("unsupported dtype `{0}`")]
    DtypeUnsupported(String),

    #[error("truncated file: {0}")]
    TruncatedFile(String),

    #[error("checksum mismatch: stored {stored}, computed {computed}")]
    ChecksumMismatch { stored: String, computed: String },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("config parse error: {0}")]
    ParseError(String),

    #[error("invalid value for `{key}`: {reason}")]
    ValidationError { key: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serialization(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidMatrix(_) => "InvalidMatrix",
            Error::DegenerateInput(_) => "DegenerateInput",
            Error::InvalidThreshold(_) => "InvalidThreshold",
            Error::InvalidBasis(_) => "InvalidBasis",
            Error::DimError(_) => "DimError",
            Error::ConfigError(_) => "ConfigError",
            Error::VocabError(_) => "VocabError",
            Error::EmptyAnchors(_) => "EmptyAnchors",
            Error::EmptyClass(_) => "EmptyClass",
            Error::EmptyEval => "EmptyEval",
            Error::NoPeers => "NoPeers",
            Error::CalibrationInfeasible { .. } => "CalibrationInfeasible",
            Error::SampleError(_) => "SampleError",
            Error::MalformedHeader(_) => "MalformedHeader",
            Error::DtypeUnsupported(_) => "DtypeUnsupported",
            Error::TruncatedFile(_) => "TruncatedFile",
            Error::ChecksumMismatch { .. } => "ChecksumMismatch",
            Error::MissingTensor(_) => "MissingTensor",
            Error::ParseError(_) => "ParseError",
            Error::ValidationError { .. } => "ValidationError",
            Error::Io { .. } => "Io",
            Error::Serialization(_) => "Serialization",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
