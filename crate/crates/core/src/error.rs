use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// `q_i == 0` where `p_i > 0` in a KL divergence.
    #[error("divergence error: {0}")]
    Divergence(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("training error: {0}")]
    Training(String),

    /// Training produced a non-finite loss; carries the offending batch.
    #[error("non-finite loss at epoch {epoch}, batch {batch} ({stage})")]
    NonFiniteLoss {
        stage: String,
        epoch: usize,
        batch: usize,
        sample_rows: Vec<usize>,
    },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("division error: {0}")]
    Division(String),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dependency error: {0}")]
    Dependency(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::Precondition(_) | Error::Parse { .. }
        )
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
