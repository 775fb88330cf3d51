//! `fortet`: batch front end for checking and solving Schrödinger systems
//! described by JSON problem configs.
//!
//! Exit codes: 0 success, 1 I/O or config error, 2 failed hypothesis,
//! 3 no convergence.

mod commands;
mod output;
mod summary;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fortet_core::fortet::{DEFAULT_CASE1_EPS, DEFAULT_MAX_ITER, DEFAULT_TOL};
use fortet_core::{Backend, FloorSchedule};

use crate::commands::Status;

#[derive(Parser)]
#[command(name = "fortet", version, about = "Schrödinger system potentials on quadrature grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a config and print the feasibility report as JSON.
    Check(CheckArgs),
    /// Solve for the potentials and write a run summary.
    Solve(SolveArgs),
    /// Entropic interpolation densities from stored potentials (heat kernels only).
    Interpolate(InterpolateArgs),
    /// Hilbert-metric contraction bound against observed Sinkhorn steps.
    Diagnose(DiagnoseArgs),
    /// Check that two solve summaries hold potentials on one ray.
    Compare(CompareArgs),
}

#[derive(Args)]
pub struct CheckArgs {
    pub config: PathBuf,
    /// Exchange the marginals (and transpose the kernel) first.
    #[arg(long)]
    pub swap: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Solver {
    Fortet,
    Sinkhorn,
}

impl Solver {
    pub fn name(self) -> &'static str {
        match self {
            Solver::Fortet => "fortet",
            Solver::Sinkhorn => "sinkhorn",
        }
    }
}

#[derive(Args)]
pub struct SolveArgs {
    pub config: PathBuf,
    #[arg(long, value_enum, default_value_t = Solver::Fortet)]
    pub solver: Solver,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    pub max_iter: usize,
    /// Case-1 trigger: `max H' <= 1 + eps`.
    #[arg(long, default_value_t = DEFAULT_CASE1_EPS)]
    pub case1_eps: f64,
    /// `harmonic`, `geometric` or `geometric:<ratio>`.
    #[arg(long, default_value_t = FloorSchedule::default())]
    pub floor: FloorSchedule,
    /// `auto`, `direct` or `log`.
    #[arg(long, default_value_t = Backend::Auto)]
    pub backend: Backend,
    /// Run even when the feasibility gate fails.
    #[arg(long)]
    pub force: bool,
    /// Solve the swapped problem; potentials are written back in the
    /// original orientation.
    #[arg(long)]
    pub swap: bool,
    /// Per-iteration trace CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Summary JSON (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Potentials CSV. Defaults to `<out stem>.potentials.csv` next to the summary.
    #[arg(long)]
    pub potentials: Option<PathBuf>,
}

#[derive(Args)]
pub struct InterpolateArgs {
    pub config: PathBuf,
    /// Potentials CSV written by `solve`.
    #[arg(long)]
    pub potentials: PathBuf,
    /// Comma-separated times in [0, 1].
    #[arg(long, allow_hyphen_values = true)]
    pub t_list: String,
    /// Output CSV (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct DiagnoseArgs {
    pub config: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    pub max_iter: usize,
    #[arg(long, default_value_t = Backend::Auto)]
    pub backend: Backend,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CompareArgs {
    pub summary_a: PathBuf,
    pub summary_b: PathBuf,
    /// Nodes with marginal mass at or below this are ignored.
    #[arg(long, default_value_t = 1e-12)]
    pub threshold: f64,
    /// Largest accepted ratio spread.
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // clap uses 2 for usage errors, which is reserved here.
            return ExitCode::from(if e.use_stderr() { Status::Io as u8 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Check(a) => commands::check(a),
        Command::Solve(a) => commands::solve(a),
        Command::Interpolate(a) => commands::interpolate(a),
        Command::Diagnose(a) => commands::diagnose(a),
        Command::Compare(a) => commands::compare(a),
    };
    match result {
        Ok(status) => ExitCode::from(status as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(Status::Io as u8)
        }
    }
}
