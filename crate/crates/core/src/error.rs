use std::path::PathBuf;

use thiserror::Error;

use crate::ClassId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("failed to read NIfTI file {path}: {message}")]
    Nifti { path: PathBuf, message: String },

    #[error("array file {path}: {message}")]
    ArrayFile { path: PathBuf, message: String },

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("label volume contains class id {0} which is not in the class catalog")]
    UnknownClass(u16),

    #[error("mask for class {0} is empty")]
    EmptyMask(ClassId),

    #[error("class {0} has no prototype in any support example")]
    NoPrototype(ClassId),

    #[error("class {class} is absent from support scan {patient}")]
    ClassAbsent { class: ClassId, patient: String },

    #[error("support and query scans come from the same patient ({0})")]
    SamePatient(String),

    #[error("non-finite loss at episode {episode}")]
    NonFiniteLoss { episode: u64 },

    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("missing {what}; run `{producer}` first")]
    MissingArtifact { what: String, producer: String },

    #[error("training audit failed: {0}")]
    Audit(String),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn missing(what: impl Into<String>, producer: impl Into<String>) -> Self {
        Error::MissingArtifact {
            what: what.into(),
            producer: producer.into(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
