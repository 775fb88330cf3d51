//! Fortet's fixed-point scheme for the Schrödinger system.
//!
//! The map is
//!
//! ```text
//! G(H, y)  = sum_z w_z g(z, y) omega1(z) / H(z)
//! Omega(H)(x) = sum_y w_y g(x, y) omega2(y) / G(H, y)
//! ```
//!
//! and the scheme iterates `H_n = max(H''_{n-1}, floor_n)`, `H'_n = Omega(H_n)`,
//! `H''_n = min(1, H'_n)` from `H_1 = 1`. A fixed point `h` gives the
//! potentials `phi = omega1 / h` and `psi = omega2 / (int g phi)`.
//!
//! Stopping rules on a grid:
//! * Case 1: `H'_n <= 1 + case1_eps` everywhere. `K_p = max(H'_n, floor_p)` is
//!   mapped through `Omega` with `p` doubling until it settles; the candidate
//!   is accepted when the result reproduces `H'_n`.
//! * Case 2: the relative sup-change of `H'` falls below `tol` and the set
//!   where `H' > 1` carries quadrature weight below `tol`.
//! * Degenerate: `max H'_n` falls below `degenerate_threshold`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::engine::{Backend, Engine, Repr};
use crate::error::{Error, Result};
use crate::numeric::{ln0, pairwise_sum_by};
use crate::problem::{feasibility, KernelOperator, MarginalPair};
use crate::serde_util::lossy_f64;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 10_000;
pub const DEFAULT_CASE1_EPS: f64 = 1e-12;
pub const DEFAULT_DEGENERATE_THRESHOLD: f64 = 1e-13;
pub const DEFAULT_FLOOR_RATIO: f64 = 0.5;

/// Direct-backend values below this on the support of omega1 trigger a
/// restart in the log domain.
const DIRECT_UNDERFLOW: f64 = 1e-280;

/// Lower bound imposed on `H_n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FloorSchedule {
    /// `1 / n`.
    Harmonic,
    /// `ratio^(n - 1)`.
    Geometric { ratio: f64 },
}

impl Default for FloorSchedule {
    fn default() -> Self {
        FloorSchedule::Geometric {
            ratio: DEFAULT_FLOOR_RATIO,
        }
    }
}

impl FloorSchedule {
    pub fn ln_floor(&self, n: usize) -> f64 {
        match *self {
            FloorSchedule::Harmonic => -(n as f64).ln(),
            FloorSchedule::Geometric { ratio } => (n as f64 - 1.0) * ratio.ln(),
        }
    }

    /// Floor value in the given representation.
    pub fn floor_in(&self, n: usize, repr: Repr) -> f64 {
        match (repr, *self) {
            (Repr::Linear, FloorSchedule::Harmonic) => 1.0 / n as f64,
            (Repr::Linear, FloorSchedule::Geometric { ratio }) => ratio.powf(n as f64 - 1.0),
            (Repr::Log, _) => self.ln_floor(n),
        }
    }

    fn validate(&self) -> Result<()> {
        if let FloorSchedule::Geometric { ratio } = *self {
            if !(ratio > 0.0 && ratio < 1.0) {
                return Err(Error::InvalidInput(format!(
                    "geometric floor ratio must lie in (0, 1), got {ratio}"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for FloorSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FloorSchedule::Harmonic => f.write_str("harmonic"),
            FloorSchedule::Geometric { ratio } => write!(f, "geometric:{ratio}"),
        }
    }
}

impl std::str::FromStr for FloorSchedule {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "harmonic" {
            return Ok(FloorSchedule::Harmonic);
        }
        if s == "geometric" {
            return Ok(FloorSchedule::default());
        }
        if let Some(r) = s.strip_prefix("geometric:") {
            let ratio: f64 = r.parse().map_err(|_| format!("bad ratio {r:?}"))?;
            let sched = FloorSchedule::Geometric { ratio };
            sched.validate().map_err(|e| e.to_string())?;
            return Ok(sched);
        }
        Err(format!(
            "unknown floor schedule {s:?} (expected harmonic, geometric or geometric:<ratio>)"
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FortetOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub case1_eps: f64,
    pub floor: FloorSchedule,
    pub backend: Backend,
    /// Skip the feasibility gate.
    pub force: bool,
    pub degenerate_threshold: f64,
}

impl Default for FortetOptions {
    fn default() -> Self {
        FortetOptions {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            case1_eps: DEFAULT_CASE1_EPS,
            floor: FloorSchedule::default(),
            backend: Backend::Auto,
            force: false,
            degenerate_threshold: DEFAULT_DEGENERATE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// `max |ln H'_n - ln H'_{n-1}|`; NaN at `n = 1`.
    #[serde(with = "lossy_f64")]
    pub sup_change: f64,
    /// `|sum w omega1 H'_n / H_n - mass(omega2)|`.
    #[serde(with = "lossy_f64")]
    pub normalization_residual: f64,
    /// Hilbert distance between `H'_n` and `H'_{n-1}` on the support of omega1.
    #[serde(with = "lossy_f64")]
    pub hilbert_step: f64,
}

/// One step of the scheme. Vectors are in `repr`.
#[derive(Debug, Clone)]
pub struct IterationState {
    pub n: usize,
    pub repr: Repr,
    pub h: Vec<f64>,
    pub h_prime: Vec<f64>,
    pub h_dprime: Vec<f64>,
    pub g_of_h: Vec<f64>,
    /// Nodes where `H'_n > 1 + case1_eps`.
    pub j_mask: Vec<bool>,
    pub diagnostics: StepDiagnostics,
}

impl IterationState {
    fn lin(&self, v: &[f64]) -> Vec<f64> {
        v.iter().map(|&x| self.repr.to_linear(x)).collect()
    }
    fn logs(&self, v: &[f64]) -> Vec<f64> {
        v.iter().map(|&x| self.repr.to_ln(x)).collect()
    }
    pub fn h_linear(&self) -> Vec<f64> {
        self.lin(&self.h)
    }
    pub fn h_prime_linear(&self) -> Vec<f64> {
        self.lin(&self.h_prime)
    }
    pub fn h_dprime_linear(&self) -> Vec<f64> {
        self.lin(&self.h_dprime)
    }
    pub fn g_of_h_linear(&self) -> Vec<f64> {
        self.lin(&self.g_of_h)
    }
    pub fn ln_h(&self) -> Vec<f64> {
        self.logs(&self.h)
    }
    pub fn ln_h_prime(&self) -> Vec<f64> {
        self.logs(&self.h_prime)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub n: usize,
    pub sup_change: f64,
    pub normalization_residual: f64,
    pub hilbert_step: f64,
    pub case1_candidate: bool,
}

/// How the scheme terminated. Serialized as `case1{n0}`, `case2` or `degenerate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum CaseTag {
    Case1 { n0: usize },
    Case2,
    Degenerate,
}

impl fmt::Display for CaseTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CaseTag::Case1 { n0 } => write!(f, "case1{{{n0}}}"),
            CaseTag::Case2 => f.write_str("case2"),
            CaseTag::Degenerate => f.write_str("degenerate"),
        }
    }
}

impl From<CaseTag> for String {
    fn from(c: CaseTag) -> String {
        c.to_string()
    }
}

impl TryFrom<String> for CaseTag {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        match s.as_str() {
            "case2" => Ok(CaseTag::Case2),
            "degenerate" => Ok(CaseTag::Degenerate),
            _ => s
                .strip_prefix("case1{")
                .and_then(|r| r.strip_suffix('}'))
                .and_then(|r| r.parse().ok())
                .map(|n0| CaseTag::Case1 { n0 })
                .ok_or_else(|| format!("unknown case tag {s:?}")),
        }
    }
}

/// Potentials in log form; `-inf` marks exact zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialPair {
    pub log_phi: Vec<f64>,
    pub log_psi: Vec<f64>,
}

impl PotentialPair {
    pub fn phi(&self) -> Vec<f64> {
        self.log_phi.iter().map(|l| l.exp()).collect()
    }

    pub fn psi(&self) -> Vec<f64> {
        self.log_psi.iter().map(|l| l.exp()).collect()
    }

    /// `(c phi, psi / c)`, another solution on the same ray.
    pub fn rescaled(&self, c: f64) -> PotentialPair {
        let lc = c.ln();
        PotentialPair {
            log_phi: self.log_phi.iter().map(|l| l + lc).collect(),
            log_psi: self.log_psi.iter().map(|l| l - lc).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemResiduals {
    /// `max_x |phi(x) int g(x, y) psi(y) dy - omega1(x)|`.
    #[serde(with = "lossy_f64")]
    pub s1_resid: f64,
    /// `max_y |psi(y) int g(x, y) phi(x) dx - omega2(y)|`.
    #[serde(with = "lossy_f64")]
    pub s2_resid: f64,
    /// `|mass of phi g psi - 1|`.
    #[serde(with = "lossy_f64")]
    pub marginal_resid: f64,
}

impl SystemResiduals {
    pub fn unavailable() -> Self {
        SystemResiduals {
            s1_resid: f64::NAN,
            s2_resid: f64::NAN,
            marginal_resid: f64::NAN,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FortetSolution {
    pub case_tag: CaseTag,
    pub iterations: usize,
    /// Backend that produced the result (`Direct` or `Log`).
    pub backend: Backend,
    /// `ln h`. For degenerate runs this is the collapsed `H'`.
    pub log_h: Vec<f64>,
    pub potentials: Option<PotentialPair>,
    pub residuals: SystemResiduals,
    pub trace: Vec<TraceRow>,
    pub case1_rejections: usize,
}

impl FortetSolution {
    pub fn h(&self) -> Vec<f64> {
        self.log_h.iter().map(|l| l.exp()).collect()
    }
}

/// Output of one application of the map, in linear form.
#[derive(Debug, Clone)]
pub struct OmegaOutput {
    pub h_prime: Vec<f64>,
    pub g_of_h: Vec<f64>,
}

/// Scheme driver bound to one problem and one backend.
#[derive(Debug, Clone)]
pub struct FortetScheme {
    engine: Engine,
    opts: FortetOptions,
    /// `w omega1` and `w omega2` in the engine representation.
    a1: Vec<f64>,
    a2: Vec<f64>,
    pos1: Vec<bool>,
    pos2: Vec<bool>,
    o1: Vec<f64>,
    o2: Vec<f64>,
    w1: Vec<f64>,
    w2: Vec<f64>,
    mass2: f64,
}

impl FortetScheme {
    pub fn new(kernel: &KernelOperator, marginals: &MarginalPair, opts: FortetOptions) -> Result<Self> {
        Self::with_backend(kernel, marginals, opts, opts.backend.resolve(kernel))
    }

    fn with_backend(
        kernel: &KernelOperator,
        marginals: &MarginalPair,
        opts: FortetOptions,
        backend: Backend,
    ) -> Result<Self> {
        kernel.check_marginals(marginals)?;
        opts.floor.validate()?;
        let engine = Engine::new(kernel, backend);
        let repr = engine.repr();
        let w1 = kernel.grid1().weights().to_vec();
        let w2 = kernel.grid2().weights();
        let o1 = marginals.omega1().values();
        let o2 = marginals.omega2().values();
        let pos1: Vec<bool> = o1.iter().map(|&v| v > 0.0).collect();
        let pos2: Vec<bool> = o2.iter().map(|&v| v > 0.0).collect();
        let a1 = (0..o1.len())
            .map(|i| if pos1[i] { repr.from_linear(w1[i] * o1[i]) } else { repr.zero() })
            .collect();
        let a2 = (0..o2.len())
            .map(|j| if pos2[j] { repr.from_linear(w2[j] * o2[j]) } else { repr.zero() })
            .collect();
        let mass2 = pairwise_sum_by(o2.len(), &|j| if pos2[j] { w2[j] * o2[j] } else { 0.0 });
        Ok(FortetScheme {
            engine,
            opts,
            a1,
            a2,
            pos1,
            pos2,
            o1: o1.to_vec(),
            o2: o2.to_vec(),
            w1,
            w2: w2.to_vec(),
            mass2,
        })
    }

    pub fn repr(&self) -> Repr {
        self.engine.repr()
    }

    pub fn backend(&self) -> Backend {
        self.engine.backend()
    }

    pub fn options(&self) -> &FortetOptions {
        &self.opts
    }

    fn one(&self) -> f64 {
        self.repr().from_linear(1.0)
    }

    /// `(Omega(H), G(H, .))` with `H` in the engine representation.
    pub fn omega(&self, h: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let repr = self.repr();
        let q: Vec<f64> = (0..h.len())
            .map(|i| if self.pos1[i] { repr.div(self.a1[i], h[i]) } else { repr.zero() })
            .collect();
        let g = self.engine.col_apply(&q);
        let mut r = vec![repr.zero(); g.len()];
        for j in 0..g.len() {
            if self.pos2[j] {
                if g[j] == repr.zero() {
                    return Err(Error::VanishingDenominator { node: j });
                }
                if repr == Repr::Linear && !(g[j] >= DIRECT_UNDERFLOW && g[j].is_finite()) {
                    return Err(Error::NumericFault(format!(
                        "G(H, y) = {} at node {j} is outside the direct-domain range",
                        g[j]
                    )));
                }
                r[j] = repr.div(self.a2[j], g[j]);
            }
        }
        let hp = self.engine.row_apply(&r);
        for (i, &v) in hp.iter().enumerate() {
            let bad = match repr {
                Repr::Linear => !v.is_finite() || (self.pos1[i] && v < DIRECT_UNDERFLOW),
                Repr::Log => v.is_nan() || v == f64::INFINITY,
            };
            if bad {
                return Err(Error::NumericFault(format!(
                    "Omega(H) = {v} at node {i} in the {} domain",
                    self.backend()
                )));
            }
        }
        Ok((hp, g))
    }

    /// Applies the map to a linear `H`, converting as needed.
    pub fn omega_linear(&self, h: &[f64]) -> Result<OmegaOutput> {
        if h.len() != self.pos1.len() {
            return Err(Error::LengthMismatch {
                expected: self.pos1.len(),
                actual: h.len(),
            });
        }
        if let Some(i) = h.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "H must be positive and finite, got {} at node {i}",
                h[i]
            )));
        }
        let repr = self.repr();
        let hr: Vec<f64> = h.iter().map(|&v| repr.from_linear(v)).collect();
        let (hp, g) = self.omega(&hr)?;
        Ok(OmegaOutput {
            h_prime: hp.iter().map(|&v| repr.to_linear(v)).collect(),
            g_of_h: g.iter().map(|&v| repr.to_linear(v)).collect(),
        })
    }

    fn finish_state(&self, n: usize, h: Vec<f64>, prev_hp: Option<&[f64]>) -> Result<IterationState> {
        let repr = self.repr();
        let one = self.one();
        let (hp, g) = self.omega(&h)?;
        let hdd: Vec<f64> = hp.iter().map(|&v| v.min(one)).collect();
        // Same rounding allowance as Case-1 detection.
        let j_bound = repr.from_linear(1.0 + self.opts.case1_eps);
        let j_mask = hp.iter().map(|&v| v > j_bound).collect();
        let norm = pairwise_sum_by(h.len(), &|i| {
            if self.pos1[i] {
                repr.to_linear(repr.div(repr.mul(self.a1[i], hp[i]), h[i]))
            } else {
                0.0
            }
        });
        let (sup_change, hilbert_step) = match prev_hp {
            Some(prev) => (
                sup_log_change(repr, prev, &hp, None),
                log_hilbert(repr, prev, &hp, &self.pos1),
            ),
            None => (f64::NAN, f64::NAN),
        };
        Ok(IterationState {
            n,
            repr,
            h,
            h_prime: hp,
            h_dprime: hdd,
            g_of_h: g,
            j_mask,
            diagnostics: StepDiagnostics {
                sup_change,
                normalization_residual: (norm - self.mass2).abs(),
                hilbert_step,
            },
        })
    }

    /// `n = 1`: `H_1 = 1`.
    pub fn first(&self) -> Result<IterationState> {
        let h = vec![self.one(); self.pos1.len()];
        self.finish_state(1, h, None)
    }

    /// `H_n = max(H''_{n-1}, floor_n)` and the rest of the step.
    pub fn step(&self, prev: &IterationState) -> Result<IterationState> {
        if prev.repr != self.repr() {
            return Err(Error::InvalidInput("state representation does not match the scheme".into()));
        }
        let n = prev.n + 1;
        let f = self.opts.floor.floor_in(n, self.repr());
        let h = prev.h_dprime.iter().map(|&v| v.max(f)).collect();
        self.finish_state(n, h, Some(&prev.h_prime))
    }

    /// Case-1 refinement: returns `Omega(max(H'_{n0}, floor_p))` once it settles.
    fn case1_limit(&self, hp: &[f64], n0: usize) -> Result<Vec<f64>> {
        let repr = self.repr();
        let min_hp = hp
            .iter()
            .zip(&self.pos1)
            .filter(|(_, &p)| p)
            .map(|(&v, _)| v)
            .fold(f64::INFINITY, f64::min);
        let mut p = n0 + 1;
        let mut prev: Option<Vec<f64>> = None;
        for _ in 0..64 {
            let f = self.opts.floor.floor_in(p, repr);
            let k: Vec<f64> = hp.iter().map(|&v| v.max(f)).collect();
            let (kp, _) = self.omega(&k)?;
            let settled = prev
                .as_ref()
                .map(|pk| sup_log_change(repr, pk, &kp, Some(&self.pos1)) < self.opts.tol)
                .unwrap_or(false);
            if settled || f <= min_hp {
                return Ok(kp);
            }
            prev = Some(kp);
            p = p.saturating_mul(2);
        }
        Ok(prev.expect("at least one refinement step"))
    }

    /// Runs the scheme to termination.
    pub fn run(&self) -> Result<FortetSolution> {
        let repr = self.repr();
        let opts = &self.opts;
        let one = self.one();
        let eps_bound = repr.from_linear(1.0 + opts.case1_eps);
        let j_bound = repr.from_linear(1.0 + 10.0 * opts.tol);
        let degenerate = repr.from_linear(opts.degenerate_threshold);
        let accept_tol = (10.0 * opts.tol).max(1e3 * f64::EPSILON);

        let mut trace = Vec::new();
        let mut rejections = 0;
        let mut state = self.first()?;
        loop {
            let max_hp = state.h_prime.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut row = TraceRow {
                n: state.n,
                sup_change: state.diagnostics.sup_change,
                normalization_residual: state.diagnostics.normalization_residual,
                hilbert_step: state.diagnostics.hilbert_step,
                case1_candidate: false,
            };

            if max_hp < degenerate {
                trace.push(row);
                return Ok(FortetSolution {
                    case_tag: CaseTag::Degenerate,
                    iterations: state.n,
                    backend: self.backend(),
                    log_h: state.ln_h_prime(),
                    potentials: None,
                    residuals: SystemResiduals::unavailable(),
                    trace,
                    case1_rejections: rejections,
                });
            }

            let mut accepted: Option<(CaseTag, Vec<f64>)> = None;
            if max_hp <= eps_bound {
                row.case1_candidate = true;
                let kp = self.case1_limit(&state.h_prime, state.n)?;
                if sup_log_change(repr, &state.h_prime, &kp, Some(&self.pos1)) <= accept_tol {
                    accepted = Some((CaseTag::Case1 { n0: state.n }, kp));
                } else {
                    rejections += 1;
                }
            }
            if accepted.is_none() && state.diagnostics.sup_change < opts.tol {
                let j_weight = pairwise_sum_by(state.h_prime.len(), &|i| {
                    if state.h_prime[i] > j_bound {
                        self.w1[i]
                    } else {
                        0.0
                    }
                });
                if j_weight < opts.tol {
                    accepted = Some((CaseTag::Case2, state.h_prime.clone()));
                }
            }
            trace.push(row);

            if let Some((tag, h)) = accepted {
                // Ray-preserving rescale so that 0 < h <= 1.
                let top = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(one);
                let log_h: Vec<f64> = h.iter().map(|&v| repr.to_ln(repr.div(v, top))).collect();
                let potentials = self.extract(&log_h)?;
                let residuals = self.residuals(&potentials);
                return Ok(FortetSolution {
                    case_tag: tag,
                    iterations: state.n,
                    backend: self.backend(),
                    log_h,
                    potentials: Some(potentials),
                    residuals,
                    trace,
                    case1_rejections: rejections,
                });
            }

            if state.n >= opts.max_iter {
                return Err(Error::NotConverged {
                    iterations: state.n,
                    trace,
                });
            }
            state = self.step(&state)?;
        }
    }

    fn extract(&self, log_h: &[f64]) -> Result<PotentialPair> {
        let log_phi: Vec<f64> = (0..log_h.len())
            .map(|i| if self.pos1[i] { self.o1[i].ln() - log_h[i] } else { f64::NEG_INFINITY })
            .collect();
        potentials_from_phi(&self.engine, log_phi, &self.o2, &self.w1)
    }

    /// Residuals of the system for a potential pair on this problem.
    pub fn residuals(&self, pot: &PotentialPair) -> SystemResiduals {
        system_residuals(&self.engine, pot, &self.o1, &self.o2, &self.w1, &self.w2)
    }
}

/// `psi = omega2 / int g phi`.
fn potentials_from_phi(engine: &Engine, log_phi: Vec<f64>, o2: &[f64], w1: &[f64]) -> Result<PotentialPair> {
    let repr = engine.repr();
    let q: Vec<f64> = log_phi
        .iter()
        .zip(w1)
        .map(|(&l, &w)| repr.from_ln(l + w.ln()))
        .collect();
    let integral = engine.col_apply(&q);
    let mut log_psi = vec![f64::NEG_INFINITY; o2.len()];
    for j in 0..o2.len() {
        if o2[j] > 0.0 {
            let li = repr.to_ln(integral[j]);
            if li == f64::NEG_INFINITY {
                return Err(Error::VanishingPotentialIntegral { node: j });
            }
            log_psi[j] = o2[j].ln() - li;
        }
    }
    Ok(PotentialPair { log_phi, log_psi })
}

fn system_residuals(
    engine: &Engine,
    pot: &PotentialPair,
    o1: &[f64],
    o2: &[f64],
    w1: &[f64],
    w2: &[f64],
) -> SystemResiduals {
    let repr = engine.repr();
    let r: Vec<f64> = pot.log_psi.iter().zip(w2).map(|(&l, &w)| repr.from_ln(l + w.ln())).collect();
    let i1 = engine.row_apply(&r);
    let row: Vec<f64> = (0..o1.len()).map(|i| (pot.log_phi[i] + repr.to_ln(i1[i])).exp()).collect();
    let s1 = (0..o1.len()).map(|i| (row[i] - o1[i]).abs()).fold(0.0f64, f64::max);
    let mass = pairwise_sum_by(o1.len(), &|i| w1[i] * row[i]);

    let q: Vec<f64> = pot.log_phi.iter().zip(w1).map(|(&l, &w)| repr.from_ln(l + w.ln())).collect();
    let i2 = engine.col_apply(&q);
    let s2 = (0..o2.len())
        .map(|j| ((pot.log_psi[j] + repr.to_ln(i2[j])).exp() - o2[j]).abs())
        .fold(0.0f64, f64::max);
    SystemResiduals {
        s1_resid: s1,
        s2_resid: s2,
        marginal_resid: (mass - 1.0).abs(),
    }
}

fn sup_log_change(repr: Repr, a: &[f64], b: &[f64], mask: Option<&[bool]>) -> f64 {
    let mut m = 0.0f64;
    for i in 0..a.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let (la, lb) = (repr.to_ln(a[i]), repr.to_ln(b[i]));
        if la == lb {
            continue;
        }
        let d = (la - lb).abs();
        if d.is_nan() {
            return f64::INFINITY;
        }
        m = m.max(d);
    }
    m
}

fn log_hilbert(repr: Repr, a: &[f64], b: &[f64], mask: &[bool]) -> f64 {
    let mut hi = f64::NEG_INFINITY;
    let mut lo = f64::INFINITY;
    for i in 0..a.len() {
        if !mask[i] {
            continue;
        }
        let d = repr.to_ln(b[i]) - repr.to_ln(a[i]);
        if !d.is_finite() {
            return f64::INFINITY;
        }
        hi = hi.max(d);
        lo = lo.min(d);
    }
    if hi < lo {
        0.0
    } else {
        hi - lo
    }
}

/// Solves the system with the scheme. Unless `opts.force` is set, the
/// feasibility checks must pass first. With `Backend::Auto`, a direct run that
/// leaves the representable range restarts in the log domain.
pub fn run_fortet(kernel: &KernelOperator, marginals: &MarginalPair, opts: &FortetOptions) -> Result<FortetSolution> {
    kernel.check_marginals(marginals)?;
    if !opts.force {
        let report = feasibility(kernel, marginals)?;
        if !report.passes() {
            let failed: Vec<&str> = report
                .hypotheses_h
                .iter()
                .filter(|c| !c.passed && c.method != crate::problem::CheckMethod::BestEffort)
                .map(|c| c.item.as_str())
                .collect();
            return Err(Error::Infeasible(format!(
                "failed hypotheses {:?}, condition (star) {:?}{}",
                failed,
                report.condition_star.verdict,
                if report.swap_recommended { "; swapping the marginals is recommended" } else { "" }
            )));
        }
    }
    let backend = opts.backend.resolve(kernel);
    let first = FortetScheme::with_backend(kernel, marginals, *opts, backend)?.run();
    match first {
        Err(Error::NumericFault(_)) | Err(Error::VanishingDenominator { .. })
            if opts.backend == Backend::Auto && backend == Backend::Direct =>
        {
            FortetScheme::with_backend(kernel, marginals, *opts, Backend::Log)?.run()
        }
        r => r,
    }
}

/// One application of the map to a positive, finite `H` (linear values).
pub fn omega_map(h: &[f64], kernel: &KernelOperator, marginals: &MarginalPair) -> Result<OmegaOutput> {
    let opts = FortetOptions::default();
    let scheme = FortetScheme::new(kernel, marginals, opts)?;
    match scheme.omega_linear(h) {
        Err(Error::NumericFault(_)) if scheme.backend() == Backend::Direct => {
            FortetScheme::with_backend(kernel, marginals, opts, Backend::Log)?.omega_linear(h)
        }
        r => r,
    }
}

/// Advances a state by one step. `prev = None` produces the first state.
pub fn fortet_step(
    prev: Option<&IterationState>,
    kernel: &KernelOperator,
    marginals: &MarginalPair,
    opts: &FortetOptions,
) -> Result<IterationState> {
    let mut o = *opts;
    if let Some(p) = prev {
        o.backend = match p.repr {
            Repr::Linear => Backend::Direct,
            Repr::Log => Backend::Log,
        };
    }
    let scheme = FortetScheme::new(kernel, marginals, o)?;
    match prev {
        None => scheme.first(),
        Some(p) => scheme.step(p),
    }
}

fn engine_for_logs(kernel: &KernelOperator, logs: &[&[f64]]) -> Engine {
    let big = logs
        .iter()
        .flat_map(|v| v.iter())
        .filter(|l| l.is_finite())
        .any(|l| l.abs() > 600.0);
    Engine::new(kernel, if big { Backend::Log } else { Backend::Auto })
}

/// `phi = omega1 / h` (zero where omega1 is zero) and `psi = omega2 / int g phi`.
pub fn extract_potentials(log_h: &[f64], kernel: &KernelOperator, marginals: &MarginalPair) -> Result<PotentialPair> {
    kernel.check_marginals(marginals)?;
    let o1 = marginals.omega1().values();
    if log_h.len() != o1.len() {
        return Err(Error::LengthMismatch {
            expected: o1.len(),
            actual: log_h.len(),
        });
    }
    let log_phi: Vec<f64> = (0..o1.len())
        .map(|i| if o1[i] > 0.0 { o1[i].ln() - log_h[i] } else { f64::NEG_INFINITY })
        .collect();
    let engine = engine_for_logs(kernel, &[&log_phi]);
    potentials_from_phi(&engine, log_phi, marginals.omega2().values(), kernel.grid1().weights())
}

/// Sup-norm residuals of both equations of the system.
pub fn verify_system(pot: &PotentialPair, kernel: &KernelOperator, marginals: &MarginalPair) -> Result<SystemResiduals> {
    kernel.check_marginals(marginals)?;
    if pot.log_phi.len() != kernel.rows() || pot.log_psi.len() != kernel.cols() {
        return Err(Error::LengthMismatch {
            expected: kernel.rows() + kernel.cols(),
            actual: pot.log_phi.len() + pot.log_psi.len(),
        });
    }
    let engine = engine_for_logs(kernel, &[&pot.log_phi, &pot.log_psi]);
    Ok(system_residuals(
        &engine,
        pot,
        marginals.omega1().values(),
        marginals.omega2().values(),
        kernel.grid1().weights(),
        kernel.grid2().weights(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniquenessOptions {
    /// Only nodes where the marginal exceeds this are compared.
    pub threshold: f64,
    pub tol: f64,
}

impl Default for UniquenessOptions {
    fn default() -> Self {
        UniquenessOptions {
            threshold: 1e-12,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    /// `(max c - min c) / median c` for `c = phi_a / phi_b` on `omega1 > threshold`.
    #[serde(with = "lossy_f64")]
    pub ratio_spread_phi: f64,
    /// Same for `c = psi_b / psi_a` on `omega2 > threshold`.
    #[serde(with = "lossy_f64")]
    pub ratio_spread_psi: f64,
    #[serde(with = "lossy_f64")]
    pub c_phi: f64,
    #[serde(with = "lossy_f64")]
    pub c_psi: f64,
    /// `median(c_phi) / median(c_psi)`; 1 on a common ray.
    #[serde(with = "lossy_f64")]
    pub constant_product: f64,
    pub compared_phi: usize,
    pub compared_psi: usize,
    pub consistent: bool,
}

fn log_ratio_stats(la: &[f64], lb: &[f64], mask: &[bool]) -> (f64, f64, usize) {
    let mut d: Vec<f64> = (0..la.len()).filter(|&i| mask[i]).map(|i| la[i] - lb[i]).collect();
    if d.is_empty() || d.iter().any(|v| !v.is_finite()) {
        return (f64::NAN, f64::NAN, d.len());
    }
    d.sort_by(|a, b| a.total_cmp(b));
    let k = d.len();
    let med = if k % 2 == 1 { d[k / 2] } else { 0.5 * (d[k / 2 - 1] + d[k / 2]) };
    let spread = (d[k - 1] - med).exp() - (d[0] - med).exp();
    (spread, med, k)
}

/// Checks that two potential pairs lie on one ray `(c phi, psi / c)`.
pub fn verify_uniqueness(
    a: &PotentialPair,
    b: &PotentialPair,
    marginals: &MarginalPair,
    opts: &UniquenessOptions,
) -> UniquenessReport {
    verify_uniqueness_on(a, b, marginals.omega1().values(), marginals.omega2().values(), opts)
}

/// [`verify_uniqueness`] with the marginals given as plain node values.
pub fn verify_uniqueness_on(
    a: &PotentialPair,
    b: &PotentialPair,
    omega1: &[f64],
    omega2: &[f64],
    opts: &UniquenessOptions,
) -> UniquenessReport {
    let m1: Vec<bool> = omega1.iter().map(|&v| v > opts.threshold).collect();
    let m2: Vec<bool> = omega2.iter().map(|&v| v > opts.threshold).collect();
    let (sp, mp, kp) = log_ratio_stats(&a.log_phi, &b.log_phi, &m1);
    let (ss, ms, ks) = log_ratio_stats(&b.log_psi, &a.log_psi, &m2);
    let product = (mp - ms).exp();
    let consistent = sp < opts.tol && ss < opts.tol && (product - 1.0).abs() <= opts.tol;
    UniquenessReport {
        ratio_spread_phi: sp,
        ratio_spread_psi: ss,
        c_phi: mp.exp(),
        c_psi: ms.exp(),
        constant_product: product,
        compared_phi: kp,
        compared_psi: ks,
        consistent,
    }
}

/// `ln` of a linear vector, for callers that hold `h` in linear form.
pub fn ln_vec(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| ln0(x)).collect()
}
