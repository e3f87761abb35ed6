use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("backward requires a scalar loss, node {node} has shape {rows}x{cols}")]
    NotScalar {
        node: usize,
        rows: usize,
        cols: usize,
    },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("parameter length {got} does not match the family's {expected}")]
    ParamLength { expected: usize, got: usize },

    #[error("invalid action {action} for an environment with {n_actions} actions")]
    InvalidAction { action: usize, n_actions: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("operator is not contractive (spectral radius {radius:.6})")]
    NonContractive { radius: f64 },

    #[error("dataset budget {budget} inconsistent with recipe ({detail})")]
    Budget { budget: usize, detail: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("no convergence after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
