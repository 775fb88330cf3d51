//! Run summaries and problem hashing.

use std::path::Path;

use fortet_core::config::GridSummary;
use fortet_core::fortet::{SystemResiduals, DEFAULT_DEGENERATE_THRESHOLD};
use fortet_core::Problem;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::SolveArgs;

/// Every field is written on every path; fields that do not apply to a run
/// are `null`. Wall time goes to stderr so summaries stay reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub command: String,
    pub config: String,
    pub problem_hash: String,
    pub solver: String,
    /// `converged`, `infeasible`, `not-converged` or `error`.
    pub status: String,
    pub exit_code: u8,
    pub error: Option<String>,
    pub case_tag: Option<String>,
    pub iterations: usize,
    pub case1_rejections: usize,
    pub backend: Option<String>,
    pub residuals: SystemResiduals,
    pub condition_star_verdict: Option<String>,
    pub hard_checks_pass: Option<bool>,
    pub swap_recommended: Option<bool>,
    pub swapped: bool,
    pub options: SolveOptionsRecord,
    pub grid: Option<GridSummary>,
    pub grid2: Option<GridSummary>,
    /// Relative paths are relative to the summary file's directory.
    pub potentials: Option<String>,
    pub trace: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveOptionsRecord {
    pub tol: f64,
    pub max_iter: usize,
    pub case1_eps: f64,
    pub floor: String,
    pub backend: String,
    pub force: bool,
    pub degenerate_threshold: f64,
}

impl RunSummary {
    pub fn new(args: &SolveArgs) -> Self {
        RunSummary {
            command: "solve".into(),
            config: args.config.display().to_string(),
            problem_hash: String::new(),
            solver: args.solver.name().into(),
            status: "error".into(),
            exit_code: 1,
            error: None,
            case_tag: None,
            iterations: 0,
            case1_rejections: 0,
            backend: None,
            residuals: SystemResiduals::unavailable(),
            condition_star_verdict: None,
            hard_checks_pass: None,
            swap_recommended: None,
            swapped: args.swap,
            options: SolveOptionsRecord {
                tol: args.tol,
                max_iter: args.max_iter,
                case1_eps: args.case1_eps,
                floor: args.floor.to_string(),
                backend: args.backend.to_string(),
                force: args.force,
                degenerate_threshold: DEFAULT_DEGENERATE_THRESHOLD,
            },
            grid: None,
            grid2: None,
            potentials: None,
            trace: None,
        }
    }
}

/// SHA-256 over the config (canonical JSON when it parses, raw bytes
/// otherwise) followed by every table file the problem read.
pub fn problem_hash(config: &Path, problem: Option<&Problem>) -> String {
    let mut h = Sha256::new();
    match std::fs::read(config) {
        Ok(bytes) => match serde_json::from_slice::<serde_json::Value>(&bytes) {
            // serde_json maps keep keys sorted, so this is canonical.
            Ok(v) => h.update(v.to_string().as_bytes()),
            Err(_) => h.update(&bytes),
        },
        Err(_) => return "unavailable".into(),
    }
    if let Some(p) = problem {
        for f in &p.files {
            h.update([0u8]);
            match std::fs::read(f) {
                Ok(bytes) => h.update(&bytes),
                Err(_) => h.update(f.display().to_string().as_bytes()),
            }
        }
    }
    hex::encode(h.finalize())
}
