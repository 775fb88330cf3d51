use thiserror::Error;

use crate::fortet::TraceRow;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid too large: {nodes} nodes would need about {bytes} bytes for a kernel matrix (cap {cap} bytes)")]
    GridTooLarge { nodes: usize, bytes: u128, cap: u128 },

    #[error("non-finite value {value} at node {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("G(H, y) vanishes at y-node {node} where omega2 > 0 (column positivity surrogate fails)")]
    VanishingDenominator { node: usize },

    #[error("integral of g(x, y) phi(x) vanishes at y-node {node} where omega2 > 0")]
    VanishingPotentialIntegral { node: usize },

    #[error("feasibility gate failed: {0}")]
    Infeasible(String),

    #[error("no convergence after {iterations} iterations")]
    NotConverged {
        iterations: usize,
        trace: Vec<TraceRow>,
    },

    #[error("numeric fault: {0}")]
    NumericFault(String),

    #[error("interpolation requires a heat kernel: {0}")]
    NotHeatKernel(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
