use thiserror::Error;

/// Errors raised by model construction, fitting and inference.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid variance components: {0}")]
    InvalidParameters(String),

    #[error("fixed-effect design is rank deficient (rank {rank} < {p} columns)")]
    RankDeficient { rank: usize, p: usize },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("index-class enumeration budget exceeded: {required} candidate tuples > budget {budget}")]
    BudgetExceeded { required: u128, budget: u128 },

    #[error("estimated covariance matrix is indefinite (smallest eigenvalue {min_eigenvalue:e})")]
    Indefinite { min_eigenvalue: f64 },

    #[error("invalid hypothesis: {0}")]
    InvalidHypothesis(String),

    #[error("jackknife: {0}")]
    Jackknife(String),

    #[error("unsupported design: {0}")]
    UnsupportedDesign(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
