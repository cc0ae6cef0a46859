use std::path::PathBuf;

/// Crate-wide error type. Variants map onto the CLI exit-code classes:
/// usage/config problems, data/shape problems, and training divergence.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("manifest references {need} normal samples for training but only {have} exist")]
    InsufficientNormals { need: usize, have: usize },

    #[error("spectrum is not conjugate-symmetric: max |imag| = {max_imag:.3e} exceeds {limit:.3e}")]
    InconsistentSpectrum { max_imag: f64, limit: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Divergence(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
