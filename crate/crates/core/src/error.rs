use thiserror::Error;

/// Errors produced by the solver library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid network specification: {0}")]
    InvalidSpec(String),

    #[error("parameter vector has length {actual}, network expects {expected}")]
    ParamLength { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("collocation set is empty")]
    EmptyCollocation,

    #[error("least-squares system is {rows}x{cols}; needs at least as many rows as columns")]
    Underdetermined { rows: usize, cols: usize },

    #[error("least-squares design matrix is identically zero")]
    ZeroDesign,

    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { what: &'static str, iteration: usize },

    #[error("helmholtz problem is near resonance: |sin(kappa)| = {0:e}")]
    NearResonance(f64),
}

pub type Result<T> = std::result::Result<T, Error>;
