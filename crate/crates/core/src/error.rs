use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("survey data error: {0}")]
    Survey(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("collinear design: {0}")]
    Collinear(String),

    #[error("constant covariate `{0}` cannot be standardized")]
    ConstantCovariate(String),

    #[error("optimizer failed: {message} (best objective {best_objective:.6e}, gradient norm {gradient_norm:.3e})")]
    Optimization {
        message: String,
        best_objective: f64,
        gradient_norm: f64,
    },

    #[error("simulation failed: {0}")]
    Simulation(String),

    #[error("bootstrap failed: {0}")]
    Bootstrap(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
