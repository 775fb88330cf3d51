//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use fortet_core::fortet::{SystemResiduals, UniquenessOptions, UniquenessReport};
use fortet_core::hilbert::Diameter;
use fortet_core::problem::StarVerdict;
use fortet_core::sinkhorn::run_sinkhorn_traced;
use fortet_core::{
    birkhoff_contraction, entropic_interpolation, load_problem, run_fortet, verify_system, verify_uniqueness_on, Error,
    FeasibilityReport, FortetOptions, PotentialPair, Problem, SinkhornOptions, TraceRow,
};
use serde::Serialize;

use crate::output::{self, InterpolationRow};
use crate::summary::{problem_hash, RunSummary};
use crate::{CheckArgs, CompareArgs, DiagnoseArgs, InterpolateArgs, SolveArgs, Solver};

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    Io = 1,
    Hypothesis = 2,
    NotConverged = 3,
}

/// Hilbert steps below this are dominated by rounding and are not used as
/// ratio denominators.
pub const STEP_NOISE_FLOOR: f64 = 1e-9;

/// Slack allowed on the Birkhoff bound.
pub const BOUND_SLACK: f64 = 1e-9;

fn status_of(e: &Error) -> Status {
    match e {
        Error::NotConverged { .. } => Status::NotConverged,
        Error::Infeasible(_)
        | Error::VanishingDenominator { .. }
        | Error::VanishingPotentialIntegral { .. }
        | Error::NotHeatKernel(_)
        | Error::NumericFault(_) => Status::Hypothesis,
        _ => Status::Io,
    }
}

fn load(path: &Path) -> Result<Problem> {
    load_problem(path).with_context(|| format!("loading {}", path.display()))
}

fn verdict_name(v: StarVerdict) -> String {
    match v {
        StarVerdict::Finite => "finite".into(),
        StarVerdict::SuspectedDivergent => "suspected-divergent".into(),
    }
}

fn gate_failure(report: &FeasibilityReport) -> String {
    let failed: Vec<&str> = report
        .hypotheses_h
        .iter()
        .filter(|c| !c.passed && c.method != fortet_core::problem::CheckMethod::BestEffort)
        .map(|c| c.item.as_str())
        .collect();
    if !failed.is_empty() {
        return format!("failed hypotheses: {}", failed.join(", "));
    }
    if report.swap_recommended {
        "condition (star) looks divergent; the swapped problem looks finite, rerun with --swap".into()
    } else {
        "condition (star) looks divergent".into()
    }
}

#[derive(Serialize)]
struct CheckOutput<'a> {
    config: String,
    problem_hash: String,
    swapped: bool,
    grid: &'a fortet_core::config::GridSummary,
    grid2: &'a fortet_core::config::GridSummary,
    hard_checks_pass: bool,
    passes: bool,
    report: &'a FeasibilityReport,
}

pub fn check(args: &CheckArgs) -> Result<Status> {
    let mut problem = load(&args.config)?;
    let hash = problem_hash(&args.config, Some(&problem));
    if args.swap {
        problem = problem.swapped();
    }
    let report = problem.feasibility()?;
    let hard = report.hard_checks_pass();
    output::write_json(
        None,
        &CheckOutput {
            config: args.config.display().to_string(),
            problem_hash: hash,
            swapped: args.swap,
            grid: &problem.grid1,
            grid2: &problem.grid2,
            hard_checks_pass: hard,
            passes: report.passes(),
            report: &report,
        },
    )?;
    Ok(if hard { Status::Ok } else { Status::Hypothesis })
}

pub fn solve(args: &SolveArgs) -> Result<Status> {
    let start = Instant::now();
    let mut s = RunSummary::new(args);
    let outcome = solve_into(args, &mut s);
    let status = match &outcome {
        Ok(st) => *st,
        Err(e) => {
            s.error.get_or_insert_with(|| format!("{e:#}"));
            Status::Io
        }
    };
    s.exit_code = status as u8;
    s.status = match status {
        Status::Ok => "converged".into(),
        Status::NotConverged => "not-converged".into(),
        _ if s.status == "infeasible" => s.status.clone(),
        _ => "error".into(),
    };
    output::write_json(args.out.as_deref(), &s)?;
    eprintln!("wall_time_s={:.3}", start.elapsed().as_secs_f64());
    outcome
}

fn potentials_target(args: &SolveArgs) -> Option<(PathBuf, String)> {
    if let Some(p) = &args.potentials {
        return Some((p.clone(), p.display().to_string()));
    }
    let out = args.out.as_ref()?;
    let stem = out.file_stem()?.to_string_lossy();
    let name = format!("{stem}.potentials.csv");
    Some((out.with_file_name(&name), name))
}

fn solve_into(args: &SolveArgs, s: &mut RunSummary) -> Result<Status> {
    let loaded = load(&args.config);
    s.problem_hash = problem_hash(&args.config, loaded.as_ref().ok());
    let original = loaded?;
    let problem = if args.swap { original.swapped() } else { original.clone() };
    s.grid = Some(problem.grid1.clone());
    s.grid2 = Some(problem.grid2.clone());

    let report = problem.feasibility()?;
    s.condition_star_verdict = Some(verdict_name(report.condition_star.verdict));
    s.hard_checks_pass = Some(report.hard_checks_pass());
    s.swap_recommended = Some(report.swap_recommended);
    if !args.force && !report.passes() {
        let msg = gate_failure(&report);
        eprintln!("error: {msg}");
        s.error = Some(msg);
        s.status = "infeasible".into();
        return Ok(Status::Hypothesis);
    }

    let (kernel, marginals) = (&problem.kernel, &problem.marginals);
    let (potentials, trace): (Option<PotentialPair>, Vec<TraceRow>) = match args.solver {
        Solver::Fortet => {
            let opts = FortetOptions {
                tol: args.tol,
                max_iter: args.max_iter,
                case1_eps: args.case1_eps,
                floor: args.floor,
                backend: args.backend,
                force: true,
                ..Default::default()
            };
            match run_fortet(kernel, marginals, &opts) {
                Ok(sol) => {
                    s.case_tag = Some(sol.case_tag.to_string());
                    s.iterations = sol.iterations;
                    s.case1_rejections = sol.case1_rejections;
                    s.backend = Some(sol.backend.to_string());
                    s.residuals = sol.residuals;
                    (sol.potentials, sol.trace)
                }
                Err(e) => return finish_failed(args, s, e),
            }
        }
        Solver::Sinkhorn => {
            let opts = SinkhornOptions {
                tol: args.tol,
                max_iter: args.max_iter,
                backend: args.backend,
            };
            match run_sinkhorn_traced(kernel, marginals, &opts) {
                Ok(run) => {
                    let pot = run.pair.potentials();
                    s.iterations = run.pair.iterations;
                    s.backend = Some(run.pair.backend.to_string());
                    s.residuals = verify_system(&pot, kernel, marginals).unwrap_or_else(|_| SystemResiduals::unavailable());
                    (Some(pot), run.trace)
                }
                Err(e) => return finish_failed(args, s, e),
            }
        }
    };

    if let Some(t) = &args.trace {
        output::write_trace(t, &trace)?;
        s.trace = Some(t.display().to_string());
    }
    if let (Some(pot), Some((path, label))) = (potentials, potentials_target(args)) {
        let pot = if args.swap {
            PotentialPair { log_phi: pot.log_psi, log_psi: pot.log_phi }
        } else {
            pot
        };
        let m = &original.marginals;
        output::write_potentials(
            &path,
            [original.kernel.grid1(), original.kernel.grid2()],
            [m.omega1().values(), m.omega2().values()],
            &pot,
        )?;
        s.potentials = Some(label);
    }
    Ok(Status::Ok)
}

fn finish_failed(args: &SolveArgs, s: &mut RunSummary, e: Error) -> Result<Status> {
    let status = status_of(&e);
    s.error = Some(e.to_string());
    eprintln!("error: {e}");
    if let Error::NotConverged { iterations, trace } = &e {
        s.iterations = *iterations;
        if let Some(t) = &args.trace {
            output::write_trace(t, trace)?;
            s.trace = Some(t.display().to_string());
        }
    }
    if status == Status::Io {
        return Err(e.into());
    }
    Ok(status)
}

pub fn interpolate(args: &InterpolateArgs) -> Result<Status> {
    let ts: Vec<f64> = args
        .t_list
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().with_context(|| format!("--t-list: bad time {t:?}")))
        .collect::<Result<_>>()?;
    if ts.is_empty() {
        bail!("--t-list is empty");
    }
    if let Some(t) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        bail!("--t-list: time {t} outside [0, 1]");
    }
    let problem = load(&args.config)?;
    let kernel = &problem.kernel;
    if kernel.heat_covariance().is_none() {
        eprintln!("error: interpolation requires a Gaussian (heat) kernel");
        return Ok(Status::Hypothesis);
    }
    let stored = output::read_potentials(&args.potentials)?;
    if stored.pair.log_phi.len() != kernel.rows() || stored.pair.log_psi.len() != kernel.cols() {
        bail!(
            "{}: potentials have {}x{} nodes, the problem has {}x{}",
            args.potentials.display(),
            stored.pair.log_phi.len(),
            stored.pair.log_psi.len(),
            kernel.rows(),
            kernel.cols()
        );
    }
    let mut results = Vec::with_capacity(ts.len());
    for &t in &ts {
        match entropic_interpolation(&stored.pair, kernel, t) {
            Ok(r) => results.push(r),
            Err(e) => {
                eprintln!("error: {e}");
                return match status_of(&e) {
                    Status::Io => Err(e.into()),
                    st => Ok(st),
                };
            }
        }
    }
    let grid = kernel.grid1();
    let rows: Vec<InterpolationRow<'_>> = results
        .iter()
        .flat_map(|r| {
            r.rho.values().iter().enumerate().map(move |(i, &rho)| InterpolationRow {
                t: r.t,
                node: i,
                coords: grid.node(i),
                rho,
                mass: r.mass,
                renorm_factor: r.renorm_factor,
            })
        })
        .collect();
    output::write_interpolation(args.out.as_deref(), grid.dim(), &rows)?;
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct DiagnoseOutput {
    config: String,
    problem_hash: String,
    projective_diameter: Diameter,
    #[serde(with = "fortet_core::serde_util::lossy_f64")]
    birkhoff_ratio: f64,
    /// `ok`, or `no-guarantee` when the diameter is infinite.
    guarantee: &'static str,
    #[serde(with = "fortet_core::serde_util::lossy_f64")]
    observed_ratio: f64,
    /// Consecutive step pairs that entered `observed_ratio`.
    observed_pairs: usize,
    bound_satisfied: bool,
    sinkhorn_iterations: usize,
    tol: f64,
    max_iter: usize,
    step_noise_floor: f64,
}

pub fn diagnose(args: &DiagnoseArgs) -> Result<Status> {
    let problem = load(&args.config)?;
    let kernel = &problem.kernel;
    let bound = birkhoff_contraction(kernel.values(), kernel.rows(), kernel.cols())?;
    let opts = SinkhornOptions {
        tol: args.tol,
        max_iter: args.max_iter,
        backend: args.backend,
    };
    let run = match run_sinkhorn_traced(kernel, &problem.marginals, &opts) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return match status_of(&e) {
                Status::Io => Err(e.into()),
                st => Ok(st),
            };
        }
    };
    let (observed, pairs) = observed_ratio(&run.hilbert_steps);
    let out = DiagnoseOutput {
        config: args.config.display().to_string(),
        problem_hash: problem_hash(&args.config, Some(&problem)),
        projective_diameter: bound.diameter,
        birkhoff_ratio: bound.ratio,
        guarantee: if bound.guaranteed { "ok" } else { "no-guarantee" },
        observed_ratio: observed,
        observed_pairs: pairs,
        bound_satisfied: observed <= bound.ratio + BOUND_SLACK,
        sinkhorn_iterations: run.pair.iterations,
        tol: args.tol,
        max_iter: args.max_iter,
        step_noise_floor: STEP_NOISE_FLOOR,
    };
    output::write_json(args.out.as_deref(), &out)?;
    Ok(Status::Ok)
}

/// Largest `d_{k+1} / d_k` over steps whose denominator clears the noise floor.
pub fn observed_ratio(steps: &[f64]) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut pairs = 0;
    for w in steps.windows(2) {
        if w[0] > STEP_NOISE_FLOOR {
            worst = worst.max(w[1] / w[0]);
            pairs += 1;
        }
    }
    (worst, pairs)
}

#[derive(Serialize)]
struct CompareOutput {
    summary_a: String,
    summary_b: String,
    solver_a: String,
    solver_b: String,
    same_problem: bool,
    report: Option<UniquenessReport>,
    consistent: bool,
    threshold: f64,
    tol: f64,
}

fn read_summary(path: &Path) -> Result<RunSummary> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{}: not a run summary", path.display()))
}

fn summary_potentials(path: &Path, s: &RunSummary) -> Result<output::StoredPotentials> {
    let Some(rel) = &s.potentials else {
        bail!("{}: summary lists no potentials file", path.display());
    };
    let beside = path.parent().unwrap_or(Path::new(".")).join(rel);
    let file = if beside.exists() { beside } else { PathBuf::from(rel) };
    output::read_potentials(&file)
}

pub fn compare(args: &CompareArgs) -> Result<Status> {
    let a = read_summary(&args.summary_a)?;
    let b = read_summary(&args.summary_b)?;
    let same_problem = a.problem_hash == b.problem_hash && a.problem_hash != "unavailable";
    let report = if same_problem {
        let pa = summary_potentials(&args.summary_a, &a)?;
        let pb = summary_potentials(&args.summary_b, &b)?;
        if pa.pair.log_phi.len() != pb.pair.log_phi.len() || pa.pair.log_psi.len() != pb.pair.log_psi.len() {
            bail!("potentials files have different node counts");
        }
        let opts = UniquenessOptions {
            threshold: args.threshold,
            tol: args.tol,
        };
        Some(verify_uniqueness_on(&pa.pair, &pb.pair, &pa.omega1, &pa.omega2, &opts))
    } else {
        eprintln!("error: summaries describe different problems");
        None
    };
    let consistent = report.is_some_and(|r| r.consistent);
    output::write_json(
        args.out.as_deref(),
        &CompareOutput {
            summary_a: args.summary_a.display().to_string(),
            summary_b: args.summary_b.display().to_string(),
            solver_a: a.solver,
            solver_b: b.solver,
            same_problem,
            report,
            consistent,
            threshold: args.threshold,
            tol: args.tol,
        },
    )?;
    Ok(if consistent { Status::Ok } else { Status::Hypothesis })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn observed_ratio_skips_noise() {
        let (r, k) = observed_ratio(&[1.0, 0.5, 0.1, 1e-12, 1e-12]);
        assert_eq!(k, 3);
        assert!((r - 0.5).abs() < 1e-15);
        assert_eq!(observed_ratio(&[]), (0.0, 0));
    }
}
