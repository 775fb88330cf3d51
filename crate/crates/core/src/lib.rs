//! Schrödinger bridges on quadrature grids via the Fortet fixed-point
//! scheme, with a Sinkhorn baseline, Hilbert-metric tools and bridge
//! outputs (coupling, KL objective, entropic interpolation).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bridge;
pub mod config;
pub mod engine;
pub mod error;
pub mod fortet;
pub mod grid;
pub mod hilbert;
pub mod numeric;
pub mod problem;
pub mod serde_util;
pub mod sinkhorn;

pub use bridge::{
    build_coupling, entropic_cost_decomposition, entropic_interpolation, gaussian_oracle, kl_objective, Coupling,
    GaussianBridgeSpec, Interpolation,
};
pub use config::{load_problem, Problem, ProblemConfig};
pub use engine::Backend;
pub use error::{Error, Result};
pub use fortet::{
    extract_potentials, fortet_step, omega_map, run_fortet, verify_system, verify_uniqueness, verify_uniqueness_on, CaseTag, FloorSchedule,
    FortetOptions, FortetSolution, IterationState, PotentialPair, TraceRow,
};
pub use grid::{build_grid, GridFunction, GridSpec, QuadratureGrid, QuadratureRule};
pub use hilbert::{birkhoff_contraction, hilbert_distance, projective_diameter};
pub use problem::{feasibility, DensityField, FeasibilityReport, KernelOperator, MarginalPair};
pub use sinkhorn::{run_sinkhorn, sinkhorn_trace_hilbert, ScalingPair, SinkhornOptions};
