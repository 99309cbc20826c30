use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] poquim_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use poquim_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 1,
            CliError::Data { .. } | CliError::Io { .. } => 2,
            CliError::Core(e) => match e {
                E::Dimension(_) | E::InvalidModel(_) | E::RankDeficient { .. } => 2,
                E::NotPositiveDefinite(_) | E::Singular(_) | E::Indefinite { .. } | E::Jackknife(_) => 3,
                E::InvalidParameters(_)
                | E::BudgetExceeded { .. }
                | E::InvalidHypothesis(_)
                | E::UnsupportedDesign(_)
                | E::Config(_) => 1,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
