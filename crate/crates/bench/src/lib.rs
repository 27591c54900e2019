//! Pipeline driver: synthetic data, the staged commands behind the
//! `argus-bench` binary, and grid sweeps.

pub mod commands;
pub mod config;
pub mod files;
pub mod sweep;
pub mod synth;

pub use config::{Overrides, RunConfig};

use argus_core::curation::CurationError;
use argus_core::geometry::GeometryError;
use argus_core::metrics::MetricsError;
use argus_core::vit::ModelError;
use argus_core::volume::VolumeError;
use std::path::{Path, PathBuf};

/// Exit code 1 marks a validation error, 2 an I/O error. Unreadable or
/// corrupt input files count as I/O.
#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("{0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Curation(#[from] CurationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl BenchError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        BenchError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn format(path: impl AsRef<Path>, message: impl ToString) -> Self {
        BenchError::Format {
            path: path.as_ref().to_path_buf(),
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Io { .. } | BenchError::Format { .. } => 2,
            BenchError::Volume(VolumeError::Io(_))
            | BenchError::Geometry(GeometryError::Io(_))
            | BenchError::Metrics(MetricsError::Io(_))
            | BenchError::Model(ModelError::Io(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;
