use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("quadrature of {requested} nodes exceeds the cap of {cap}")]
    QuadratureTooLarge { requested: f64, cap: usize },

    #[error("degenerate Jacobian in component {component} (diagonal partial {partial:e})")]
    DegenerateJacobian { component: usize, partial: f64 },

    #[error("inversion of component {component} left the range |x| <= 1e8")]
    InversionOutOfRange { component: usize },

    #[error("all importance weights underflowed")]
    DegenerateWeights,

    #[error("linear solve failed: {0}")]
    SolverFailure(String),

    #[error("non-finite value at the starting point")]
    InvalidStart,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("layer {layer}: {source}")]
    Iteration {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("serialization: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
