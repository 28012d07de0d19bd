//! On-disk formats: ontology files, annotation manifests, the `.slt`
//! container, `MUN1` checkpoints, and report writers.

pub mod checkpoint;
pub mod manifest;
pub mod ontology_file;
pub mod reports;
pub mod slt;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}: bad magic, expected {expected}")]
    BadMagic { path: String, expected: &'static str },
    #[error("{path}: truncated file")]
    Truncated { path: String },
    #[error("ontology: {0}")]
    Ontology(#[from] softseg_core::OntologyError),
}

impl FormatError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> FormatError {
        FormatError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn parse(path: &std::path::Path, message: impl Into<String>) -> FormatError {
        FormatError::Parse {
            path: path.display().to_string(),
            message: message.into(),
        }
    }
}
