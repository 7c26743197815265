use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("{solver} did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("iterate diverged at k={k}: {detail}")]
    Divergence { k: u64, detail: String },

    #[error("enumeration of {size} outcomes exceeds the limit of {limit}")]
    EnumerationTooLarge { size: usize, limit: usize },

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    /// `line` is 1-based; 0 marks a command-line override.
    #[error("config error {}, key `{key}`: {msg}", if *line == 0 { "in override".to_string() } else { format!("at line {line}") })]
    Config { line: usize, key: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
