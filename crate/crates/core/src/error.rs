use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes, used by the command-line front end to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Geometry,
    Io,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{format} parse error at {location}: {message}")]
    Parse {
        format: &'static str,
        location: String,
        message: String,
    },
    #[error("mesh has no usable triangles")]
    EmptyMesh,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no z translation brings the mesh into contact with the sensor window")]
    NoContactPossible,
    #[error("pose is not a contact pose: minimal depth {min_depth} mm, expected {d} mm")]
    NotInContact { min_depth: f64, d: f64 },
    #[error("contact shape has no contact pixels")]
    EmptyContact,
    #[error("grid specification yields an empty grid")]
    EmptyGrid,
    #[error("unsupported file version: {0}")]
    VersionMismatch(String),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("posterior has empty support")]
    EmptySupport,
    #[error("training diverged at epoch {epoch}: mean loss {loss} vs initial {initial}")]
    Divergence { epoch: usize, loss: f64, initial: f64 },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidInput(_) | Error::InvalidConfig(_) | Error::FingerprintMismatch { .. } => {
                ErrorClass::Config
            }
            Error::EmptyMesh
            | Error::NoContactPossible
            | Error::NotInContact { .. }
            | Error::EmptyContact
            | Error::EmptyGrid => ErrorClass::Geometry,
            Error::Parse { .. } | Error::VersionMismatch(_) | Error::Corrupt(_) | Error::Io { .. } => {
                ErrorClass::Io
            }
            Error::EmptySupport | Error::Divergence { .. } | Error::Numerical(_) => {
                ErrorClass::Numerical
            }
        }
    }
}
