use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid system: {0}")]
    InvalidSpec(String),

    #[error("component index {index} out of range (n = {n})")]
    ComponentOutOfRange { index: usize, n: usize },

    #[error("position {0} outside [0, 1]")]
    PositionOutOfRange(f64),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("CFL condition violated: Courant number {courant} > 1")]
    Cfl { courant: f64 },

    #[error("non-finite value at step {step}, component {component}, cell {cell}")]
    NonFinite {
        step: usize,
        component: usize,
        cell: usize,
    },

    #[error("characteristic recursion depth {depth} exceeds limit {limit}")]
    DepthExceeded { depth: usize, limit: usize },

    #[error("control series has length {got}, expected {expected}")]
    ControlLength { got: usize, expected: usize },

    #[error("missing control series for the {0} end")]
    MissingControl(&'static str),

    #[error("conjugate gradients did not converge after {iterations} iterations (relative residual {residual:e})")]
    CgNotConverged { iterations: usize, residual: f64 },

    #[error("delta search exhausted after {halvings} halvings")]
    SearchExhausted { halvings: usize },

    #[error("problem too large: {size} unknowns (limit {limit})")]
    TooLarge { size: usize, limit: usize },

    #[error("horizon {horizon} not above minimal control time T_inf={t_inf} (required margin {margin})")]
    BelowThreshold {
        horizon: f64,
        t_inf: f64,
        margin: f64,
    },

    #[error("coupling matrices must be invertible")]
    NotInvertible,
}
