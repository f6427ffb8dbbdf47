use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Two particle arrays that must share a layout do not.
    #[error("dimension mismatch: expected N={expected_n}, d={expected_d}, found N={found_n}, d={found_d}")]
    DimensionMismatch {
        expected_n: usize,
        expected_d: usize,
        found_n: usize,
        found_d: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported instance: {0}")]
    Unsupported(String),

    /// A standing hypothesis on the problem data is violated. `tag` names it, e.g. `H-ii`.
    #[error("hypothesis {tag} violated: {message}")]
    Hypothesis { tag: String, message: String },

    #[error("state became non-finite at step {step} (t = {time})")]
    Divergence { step: usize, time: f64 },

    #[error("control maximisation did not converge (residual {residual:e} after {iterations} iterations)")]
    Maximization { residual: f64, iterations: usize },

    #[error("perturbation space of dimension {dim} exceeds the dense cap {cap}; use subspace mode")]
    TooLarge { dim: usize, cap: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Error::Io { path: path.display().to_string(), message: e.to_string() }
    }
}
