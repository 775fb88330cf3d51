//! Marginals, kernels and the feasibility checks run before solving.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::QuadratureGrid;
use crate::numeric::{ln0, log_sum_exp_by, map_rows, pairwise_sum_by};
use crate::serde_util::lossy_f64;

/// Marginal tolerance used by the unit-mass check.
pub const MASS_TOL: f64 = 1e-8;

/// Tail slopes above this count as "non-decreasing toward the boundary".
pub const FLAT_SLOPE_TOL: f64 = 1e-8;

/// A sampled density. Values must be finite; sign is checked separately so
/// that violations can be reported rather than rejected.
#[derive(Debug, Clone)]
pub struct DensityField {
    grid: Arc<QuadratureGrid>,
    values: Vec<f64>,
}

impl DensityField {
    pub fn new(grid: Arc<QuadratureGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index: i,
                value: values[i],
            });
        }
        Ok(DensityField { grid, values })
    }

    /// Isotropic normal density with standard deviation `sigma` around `mean`.
    pub fn gaussian(grid: Arc<QuadratureGrid>, mean: &[f64], sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidInput(format!("sigma must be positive, got {sigma}")));
        }
        let cov = DMatrix::from_diagonal_element(grid.dim(), grid.dim(), sigma * sigma);
        Self::gaussian_cov(grid, mean, &cov)
    }

    /// Normal density with covariance `cov`.
    pub fn gaussian_cov(grid: Arc<QuadratureGrid>, mean: &[f64], cov: &DMatrix<f64>) -> Result<Self> {
        let d = grid.dim();
        if mean.len() != d {
            return Err(Error::LengthMismatch {
                expected: d,
                actual: mean.len(),
            });
        }
        let g = GaussianForm::new(cov)?;
        let values = (0..grid.len())
            .map(|i| {
                let delta: Vec<f64> = grid.node(i).iter().zip(mean).map(|(x, m)| x - m).collect();
                g.log_density(&delta).exp()
            })
            .collect();
        DensityField::new(grid, values)
    }

    /// Constant density `1 / volume`.
    pub fn uniform(grid: Arc<QuadratureGrid>) -> Result<Self> {
        let v = 1.0 / grid.volume();
        let n = grid.len();
        DensityField::new(grid, vec![v; n])
    }

    /// Linear interpolation of a 1-D table `(x, value)` onto the grid; zero
    /// outside the tabulated range.
    pub fn from_table(grid: Arc<QuadratureGrid>, xs: &[f64], vals: &[f64]) -> Result<Self> {
        if grid.dim() != 1 {
            return Err(Error::InvalidInput("table marginals require a 1-D grid".into()));
        }
        let values = (0..grid.len())
            .map(|i| interp_linear(xs, vals, grid.node(i)[0], 0.0))
            .collect::<Result<Vec<_>>>()?;
        DensityField::new(grid, values)
    }

    pub fn grid(&self) -> &Arc<QuadratureGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mass(&self) -> f64 {
        pairwise_sum_by(self.values.len(), &|i| {
            self.grid.weights()[i] * self.values[i]
        })
    }

    fn scaled(&self, c: f64) -> DensityField {
        DensityField {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }
}

/// Piecewise-linear interpolation through sorted `(xs, ys)`.
pub fn interp_linear(xs: &[f64], ys: &[f64], x: f64, outside: f64) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            expected: xs.len(),
            actual: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::InvalidInput("table needs at least 2 rows".into()));
    }
    if xs.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::InvalidInput("table abscissae must be strictly increasing".into()));
    }
    let n = xs.len();
    if x < xs[0] || x > xs[n - 1] {
        return Ok(outside);
    }
    let k = xs.partition_point(|&t| t <= x).clamp(1, n - 1);
    let (x0, x1) = (xs[k - 1], xs[k]);
    let s = (x - x0) / (x1 - x0);
    Ok(ys[k - 1] + s * (ys[k] - ys[k - 1]))
}

/// The two marginals `omega1` on the first grid and `omega2` on the second.
#[derive(Debug, Clone)]
pub struct MarginalPair {
    omega1: DensityField,
    omega2: DensityField,
    raw_masses: [f64; 2],
}

impl MarginalPair {
    /// Rescales both densities to unit mass.
    pub fn new(omega1: DensityField, omega2: DensityField) -> Result<Self> {
        let m1 = omega1.mass();
        let m2 = omega2.mass();
        for (k, m) in [(1, m1), (2, m2)] {
            if !(m > 0.0) || !m.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "omega{k} has non-positive or non-finite mass {m}"
                )));
            }
        }
        Ok(MarginalPair {
            omega1: omega1.scaled(1.0 / m1),
            omega2: omega2.scaled(1.0 / m2),
            raw_masses: [m1, m2],
        })
    }

    /// Keeps the values as given. Used to construct instances that break the
    /// unit-mass hypothesis on purpose.
    pub fn from_raw(omega1: DensityField, omega2: DensityField) -> Self {
        let raw_masses = [omega1.mass(), omega2.mass()];
        MarginalPair {
            omega1,
            omega2,
            raw_masses,
        }
    }

    /// `omega1` renormalized, `omega2` its exact image under the kernel,
    /// `omega2(y) = sum_z w_z g(z, y) omega1(z)`.
    pub fn pushforward(kernel: &KernelOperator, omega1: DensityField) -> Result<Self> {
        kernel.check_grids(omega1.grid(), kernel.grid2())?;
        let m1 = omega1.mass();
        if !(m1 > 0.0) {
            return Err(Error::InvalidInput("omega1 has non-positive mass".into()));
        }
        let omega1 = omega1.scaled(1.0 / m1);
        let w1 = kernel.grid1().weights();
        let q: Vec<f64> = omega1.values().iter().zip(w1).map(|(o, w)| w * o).collect();
        let n1 = kernel.rows();
        let n2 = kernel.cols();
        let values = map_rows(n2, n1 * n2, |j| {
            pairwise_sum_by(n1, &|i| kernel.value(i, j) * q[i])
        });
        let omega2 = DensityField::new(kernel.grid2().clone(), values)?;
        let m2 = omega2.mass();
        Ok(MarginalPair {
            omega1,
            omega2,
            raw_masses: [m1, m2],
        })
    }

    pub fn omega1(&self) -> &DensityField {
        &self.omega1
    }

    pub fn omega2(&self) -> &DensityField {
        &self.omega2
    }

    /// Masses before any renormalization.
    pub fn raw_masses(&self) -> [f64; 2] {
        self.raw_masses
    }

    pub fn swapped(&self) -> MarginalPair {
        MarginalPair {
            omega1: self.omega2.clone(),
            omega2: self.omega1.clone(),
            raw_masses: [self.raw_masses[1], self.raw_masses[0]],
        }
    }
}

/// Where kernel values came from. Only the Gaussian variants qualify as heat
/// kernels; Gaussian and `Difference` qualify as difference kernels.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KernelProvenance {
    Gaussian { sigma: f64 },
    GaussianMultivariate { covariance: Vec<Vec<f64>> },
    /// `g(x, y) = U(x - y)` with `U` tabulated and linearly interpolated.
    Difference {
        #[serde(skip)]
        t: Vec<f64>,
        #[serde(skip)]
        u: Vec<f64>,
    },
    Table,
}

/// Precomputed pieces of a centered normal density `N(0, C)`.
#[derive(Debug, Clone)]
pub struct GaussianForm {
    precision: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianForm {
    pub fn new(cov: &DMatrix<f64>) -> Result<Self> {
        let eig = validate_spd(cov)?;
        let d = cov.nrows() as f64;
        let log_det: f64 = eig.eigenvalues.iter().map(|l| l.ln()).sum();
        let inv = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l))
            * eig.eigenvectors.transpose();
        Ok(GaussianForm {
            precision: inv,
            log_norm: -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det),
        })
    }

    pub fn log_density(&self, delta: &[f64]) -> f64 {
        let d = delta.len();
        let mut q = 0.0;
        for a in 0..d {
            for b in 0..d {
                q += delta[a] * self.precision[(a, b)] * delta[b];
            }
        }
        self.log_norm - 0.5 * q
    }

    pub fn log_peak(&self) -> f64 {
        self.log_norm
    }
}

/// Checks symmetry and positive definiteness, returning the eigen-decomposition.
pub fn validate_spd(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::NotPositiveDefinite(format!(
            "matrix is {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite("non-finite entry".into()));
    }
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let asym = (m - m.transpose()).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if asym > 1e-12 * scale {
        return Err(Error::NotPositiveDefinite(format!(
            "not symmetric (max asymmetry {asym})"
        )));
    }
    let eig = SymmetricEigen::new(m.clone());
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) {
        return Err(Error::NotPositiveDefinite(format!(
            "smallest eigenvalue {min} is not positive"
        )));
    }
    Ok(eig)
}

/// Discretized kernel `g(x_i, y_j)`, row-major over (first grid, second grid).
#[derive(Debug, Clone)]
pub struct KernelOperator {
    grid1: Arc<QuadratureGrid>,
    grid2: Arc<QuadratureGrid>,
    values: Vec<f64>,
    log_values: Vec<f64>,
    sigma_bound: f64,
    provenance: KernelProvenance,
}

impl KernelOperator {
    /// Isotropic heat kernel `N(y - x; 0, sigma^2 I)`, evaluated in closed form.
    pub fn gaussian(grid1: Arc<QuadratureGrid>, grid2: Arc<QuadratureGrid>, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidInput(format!("sigma must be positive, got {sigma}")));
        }
        let cov = DMatrix::from_diagonal_element(grid1.dim(), grid1.dim(), sigma * sigma);
        let mut k = Self::gaussian_cov(grid1, grid2, &cov)?;
        k.provenance = KernelProvenance::Gaussian { sigma };
        Ok(k)
    }

    /// Gaussian kernel with a full covariance matrix.
    pub fn gaussian_cov(grid1: Arc<QuadratureGrid>, grid2: Arc<QuadratureGrid>, cov: &DMatrix<f64>) -> Result<Self> {
        if grid1.dim() != grid2.dim() || cov.nrows() != grid1.dim() {
            return Err(Error::InvalidInput(format!(
                "dimension mismatch: grids {} and {}, covariance {}x{}",
                grid1.dim(),
                grid2.dim(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        let form = GaussianForm::new(cov)?;
        let d = grid1.dim();
        let n2 = grid2.len();
        let log_values: Vec<f64> = (0..grid1.len() * n2)
            .map(|k| {
                let (i, j) = (k / n2, k % n2);
                let delta: Vec<f64> = (0..d).map(|a| grid2.node(j)[a] - grid1.node(i)[a]).collect();
                form.log_density(&delta)
            })
            .collect();
        let covariance = (0..d).map(|a| (0..d).map(|b| cov[(a, b)]).collect()).collect();
        let bound = form.log_peak().exp() * (1.0 + 1e-9);
        Ok(Self::from_log_parts(
            grid1,
            grid2,
            log_values,
            bound,
            KernelProvenance::GaussianMultivariate { covariance },
        ))
    }

    /// Difference kernel `g(x, y) = U(x - y)` from a table of `U`; zero outside it.
    pub fn difference_table(
        grid1: Arc<QuadratureGrid>,
        grid2: Arc<QuadratureGrid>,
        t: Vec<f64>,
        u: Vec<f64>,
    ) -> Result<Self> {
        if grid1.dim() != 1 || grid2.dim() != 1 {
            return Err(Error::InvalidInput("difference kernels require 1-D grids".into()));
        }
        let n2 = grid2.len();
        let values = (0..grid1.len() * n2)
            .map(|k| interp_linear(&t, &u, grid1.node(k / n2)[0] - grid2.node(k % n2)[0], 0.0))
            .collect::<Result<Vec<_>>>()?;
        let mut op = Self::from_matrix(grid1, grid2, values)?;
        op.provenance = KernelProvenance::Difference { t, u };
        Ok(op)
    }

    /// Dense kernel from row-major values. Negative entries are accepted here
    /// and reported by the hypothesis checks.
    pub fn from_matrix(grid1: Arc<QuadratureGrid>, grid2: Arc<QuadratureGrid>, values: Vec<f64>) -> Result<Self> {
        let n = grid1.len() * grid2.len();
        if values.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index: i,
                value: values[i],
            });
        }
        let max = values.iter().cloned().fold(0.0f64, f64::max);
        let bound = if max > 0.0 { max * (1.0 + 1e-9) } else { 1.0 };
        let log_values = values.iter().map(|&v| ln0(v)).collect();
        Ok(KernelOperator {
            grid1,
            grid2,
            values,
            log_values,
            sigma_bound: bound,
            provenance: KernelProvenance::Table,
        })
    }

    fn from_log_parts(
        grid1: Arc<QuadratureGrid>,
        grid2: Arc<QuadratureGrid>,
        log_values: Vec<f64>,
        sigma_bound: f64,
        provenance: KernelProvenance,
    ) -> Self {
        let values = log_values.iter().map(|l| l.exp()).collect();
        KernelOperator {
            grid1,
            grid2,
            values,
            log_values,
            sigma_bound,
            provenance,
        }
    }

    /// Replaces the bound used by the `g < Sigma` check.
    pub fn with_sigma_bound(mut self, sigma_bound: f64) -> Self {
        self.sigma_bound = sigma_bound;
        self
    }

    /// Scales each row so that `sum_j w_j g(x_i, y_j) = 1`. The result is a
    /// plain table: it is no longer a heat or difference kernel.
    pub fn normalize_rows(&self) -> Result<Self> {
        let n2 = self.cols();
        let w2 = self.grid2.weights();
        let mut log_values = self.log_values.clone();
        for i in 0..self.rows() {
            let row = &self.log_values[i * n2..(i + 1) * n2];
            let lse = log_sum_exp_by(n2, &|j| row[j] + w2[j].ln());
            if lse == f64::NEG_INFINITY {
                return Err(Error::InvalidInput(format!("row {i} is identically zero")));
            }
            for v in &mut log_values[i * n2..(i + 1) * n2] {
                *v -= lse;
            }
        }
        let values: Vec<f64> = log_values.iter().map(|l| l.exp()).collect();
        let max = values.iter().cloned().fold(0.0f64, f64::max);
        Ok(KernelOperator {
            grid1: self.grid1.clone(),
            grid2: self.grid2.clone(),
            values,
            log_values,
            sigma_bound: max * (1.0 + 1e-9),
            provenance: KernelProvenance::Table,
        })
    }

    /// `g^T`, defined on (second grid, first grid).
    pub fn transposed(&self) -> Self {
        let (n1, n2) = (self.rows(), self.cols());
        let tr = |v: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; v.len()];
            for i in 0..n1 {
                for j in 0..n2 {
                    out[j * n1 + i] = v[i * n2 + j];
                }
            }
            out
        };
        let provenance = match &self.provenance {
            KernelProvenance::Difference { t, u } => KernelProvenance::Difference {
                t: t.iter().rev().map(|x| -x).collect(),
                u: u.iter().rev().cloned().collect(),
            },
            p => p.clone(),
        };
        KernelOperator {
            grid1: self.grid2.clone(),
            grid2: self.grid1.clone(),
            values: tr(&self.values),
            log_values: tr(&self.log_values),
            sigma_bound: self.sigma_bound,
            provenance,
        }
    }

    pub fn grid1(&self) -> &Arc<QuadratureGrid> {
        &self.grid1
    }

    pub fn grid2(&self) -> &Arc<QuadratureGrid> {
        &self.grid2
    }

    pub fn rows(&self) -> usize {
        self.grid1.len()
    }

    pub fn cols(&self) -> usize {
        self.grid2.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `ln g`, exact for analytic kernels even where `g` underflows.
    pub fn log_values(&self) -> &[f64] {
        &self.log_values
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid2.len() + j]
    }

    #[inline]
    pub fn log_value(&self, i: usize, j: usize) -> f64 {
        self.log_values[i * self.grid2.len() + j]
    }

    pub fn sigma_bound(&self) -> f64 {
        self.sigma_bound
    }

    pub fn provenance(&self) -> &KernelProvenance {
        &self.provenance
    }

    /// Covariance of the heat kernel, if this is one.
    pub fn heat_covariance(&self) -> Option<DMatrix<f64>> {
        let d = self.grid1.dim();
        match &self.provenance {
            KernelProvenance::Gaussian { sigma } => Some(DMatrix::from_diagonal_element(d, d, sigma * sigma)),
            KernelProvenance::GaussianMultivariate { covariance } => {
                Some(DMatrix::from_fn(d, d, |a, b| covariance[a][b]))
            }
            _ => None,
        }
    }

    /// Smallest over largest log-entry, as `ln(min / max)`; `-inf` when some entry is zero.
    pub fn log_dynamic_range(&self) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &l in &self.log_values {
            lo = lo.min(l);
            hi = hi.max(l);
        }
        lo - hi
    }

    pub(crate) fn check_grids(&self, g1: &QuadratureGrid, g2: &QuadratureGrid) -> Result<()> {
        if !self.grid1.same_as(g1) || !self.grid2.same_as(g2) {
            return Err(Error::InvalidInput(
                "kernel and marginals are defined on different grids".into(),
            ));
        }
        Ok(())
    }

    /// Fails unless the marginals live on the kernel's grids.
    pub fn check_marginals(&self, m: &MarginalPair) -> Result<()> {
        self.check_grids(m.omega1().grid(), m.omega2().grid())
    }
}

// ---------------------------------------------------------------------------
// Feasibility checks

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckMethod {
    Exact,
    Surrogate,
    BestEffort,
}

#[derive(Debug, Clone, Serialize)]
pub struct HypothesisCheck {
    pub item: String,
    pub method: CheckMethod,
    pub passed: bool,
    pub detail: String,
    /// First offending indices (kernel entries are flattened row-major).
    pub offending: Vec<usize>,
    pub offending_count: usize,
}

const MAX_LISTED: usize = 32;

fn check(item: &str, method: CheckMethod, bad: Vec<usize>, ok_detail: String, bad_detail: String) -> HypothesisCheck {
    let passed = bad.is_empty();
    HypothesisCheck {
        item: item.to_string(),
        method,
        passed,
        detail: if passed { ok_detail } else { bad_detail },
        offending_count: bad.len(),
        offending: bad.into_iter().take(MAX_LISTED).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StarVerdict {
    Finite,
    SuspectedDivergent,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionStar {
    #[serde(with = "lossy_f64")]
    pub estimate: f64,
    pub verdict: StarVerdict,
    /// Least-squares slope of the log-integrand against distance from the
    /// grid centre, over the outer 20% of nodes.
    #[serde(with = "lossy_f64")]
    pub tail_exponent: f64,
    /// Second-grid nodes where the denominator vanishes while `omega2 > 0`.
    pub zero_denominator_nodes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Theorem2Status {
    Pass,
    Fail,
    NotApplicable,
}

#[derive(Debug, Clone, Serialize)]
pub struct Theorem2Check {
    pub status: Theorem2Status,
    /// 1 or 2 when a monotone-tail pattern matched.
    pub condition: Option<u8>,
    pub t1: Option<f64>,
    pub t2: Option<f64>,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BernsteinCheck {
    pub forward: bool,
    pub swapped: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FeasibilityReport {
    pub hypotheses_h: Vec<HypothesisCheck>,
    pub condition_star: ConditionStar,
    pub swap_recommended: bool,
    /// Condition (star) evaluated with the marginals exchanged and the kernel transposed.
    pub swapped_condition_star: Option<ConditionStar>,
    pub theorem2_difference_kernel: Theorem2Check,
    /// Closed-form sign conditions, present when kernel and marginals are all Gaussian.
    pub bernstein: Option<BernsteinCheck>,
}

impl FeasibilityReport {
    /// True when every exact and surrogate hypothesis check passed.
    pub fn hard_checks_pass(&self) -> bool {
        self.hypotheses_h
            .iter()
            .filter(|c| c.method != CheckMethod::BestEffort)
            .all(|c| c.passed)
    }

    /// Hard checks pass and condition (star) looks finite.
    pub fn passes(&self) -> bool {
        self.hard_checks_pass() && self.condition_star.verdict == StarVerdict::Finite
    }
}

/// Runs every check: hypotheses, condition (star) in both orientations and
/// the difference-kernel scan.
pub fn feasibility(kernel: &KernelOperator, marginals: &MarginalPair) -> Result<FeasibilityReport> {
    let hypotheses_h = check_assumptions_h(kernel, marginals)?;
    let star = condition_star(kernel, marginals)?;
    let (swap_recommended, swapped) = if star.verdict == StarVerdict::SuspectedDivergent {
        let s = condition_star(&kernel.transposed(), &marginals.swapped())?;
        (s.verdict == StarVerdict::Finite, Some(s))
    } else {
        (false, None)
    };
    Ok(FeasibilityReport {
        hypotheses_h,
        condition_star: star,
        swap_recommended,
        swapped_condition_star: swapped,
        theorem2_difference_kernel: theorem2_applicability(kernel),
        bernstein: None,
    })
}

/// Pairs of neighbouring nodes along each axis of a grid.
fn neighbour_pairs(grid: &QuadratureGrid) -> Vec<(usize, usize)> {
    let p = grid.points_per_axis();
    let d = grid.dim();
    let mut out = Vec::new();
    for i in 0..grid.len() {
        let mut stride = 1;
        let mut rest = i;
        for _ in 0..d {
            let c = rest % p;
            rest /= p;
            if c + 1 < p {
                out.push((i, i + stride));
            }
            stride *= p;
        }
    }
    out
}

/// Hypotheses H.i to H.viii on the grid. Continuity items are smoke checks.
pub fn check_assumptions_h(kernel: &KernelOperator, marginals: &MarginalPair) -> Result<Vec<HypothesisCheck>> {
    kernel.check_marginals(marginals)?;
    let g = kernel.values();
    let (n1, n2) = (kernel.rows(), kernel.cols());
    let o1 = marginals.omega1().values();
    let o2 = marginals.omega2().values();
    let sigma = kernel.sigma_bound();
    let mut out = Vec::with_capacity(8);

    let neg: Vec<usize> = (0..g.len()).filter(|&k| g[k] < 0.0).collect();
    out.push(check(
        "H.i",
        CheckMethod::Exact,
        neg,
        "g >= 0 at every node pair".into(),
        "negative kernel entries (flattened row-major indices)".into(),
    ));

    let mut bad: Vec<usize> = (0..n1).filter(|&i| o1[i] < 0.0).collect();
    bad.extend((0..n2).filter(|&j| o2[j] < 0.0).map(|j| n1 + j));
    out.push(check(
        "H.ii",
        CheckMethod::Exact,
        bad,
        "omega1, omega2 >= 0 at every node".into(),
        format!("negative marginal values (indices >= {n1} refer to omega2 node index - {n1})"),
    ));

    let m1 = marginals.omega1().mass();
    let m2 = marginals.omega2().mass();
    let mut bad = Vec::new();
    if (m1 - 1.0).abs() > MASS_TOL {
        bad.push(1);
    }
    if (m2 - 1.0).abs() > MASS_TOL {
        bad.push(2);
    }
    out.push(check(
        "H.iii",
        CheckMethod::Exact,
        bad,
        format!("masses {m1} and {m2} within {MASS_TOL} of 1"),
        format!("masses {m1} and {m2} (offending lists marginal 1 or 2)"),
    ));

    let scale = sigma.max(f64::MIN_POSITIVE);
    let mut jump = 0.0f64;
    let mut bad = Vec::new();
    if kernel.grid1().rule().is_some() || kernel.grid1().dim() == 1 {
        for (a, b) in neighbour_pairs(kernel.grid1()) {
            for j in 0..n2 {
                let d = (g[a * n2 + j] - g[b * n2 + j]).abs() / scale;
                jump = jump.max(d);
                if d >= 0.5 {
                    bad.push(a * n2 + j);
                }
            }
        }
    }
    if kernel.grid2().rule().is_some() || kernel.grid2().dim() == 1 {
        for (a, b) in neighbour_pairs(kernel.grid2()) {
            for i in 0..n1 {
                let d = (g[i * n2 + a] - g[i * n2 + b]).abs() / scale;
                jump = jump.max(d);
                if d >= 0.5 {
                    bad.push(i * n2 + a);
                }
            }
        }
    }
    bad.sort_unstable();
    bad.dedup();
    out.push(check(
        "H.iv",
        CheckMethod::BestEffort,
        bad,
        format!("largest neighbour jump {jump:.3e} of Sigma"),
        format!("neighbour jumps reach {jump:.3e} of Sigma; grid may be too coarse or g discontinuous"),
    ));

    let over: Vec<usize> = (0..g.len()).filter(|&k| !(g[k] < sigma)).collect();
    out.push(check(
        "H.v",
        CheckMethod::Exact,
        over,
        format!("g < Sigma = {sigma}"),
        format!("entries not below Sigma = {sigma}"),
    ));

    let zero_rows: Vec<usize> = (0..n1).filter(|&i| g[i * n2..(i + 1) * n2].iter().all(|&v| v <= 0.0)).collect();
    out.push(check(
        "H.vi",
        CheckMethod::Surrogate,
        zero_rows,
        "every row has a positive entry".into(),
        "rows with no positive entry".into(),
    ));

    let zero_cols: Vec<usize> = (0..n2).filter(|&j| (0..n1).all(|i| g[i * n2 + j] <= 0.0)).collect();
    out.push(check(
        "H.vii",
        CheckMethod::Surrogate,
        zero_cols,
        "every column has a positive entry".into(),
        "columns with no positive entry".into(),
    ));

    let mut bad = Vec::new();
    let mut worst = 0.0f64;
    for (k, field, offset) in [(0, marginals.omega1(), 0), (1, marginals.omega2(), n1)] {
        let _ = k;
        let v = field.values();
        let peak = v.iter().cloned().fold(0.0f64, |a, x| a.max(x.abs())).max(f64::MIN_POSITIVE);
        if field.grid().rule().is_some() || field.grid().dim() == 1 {
            for (a, b) in neighbour_pairs(field.grid()) {
                let d = (v[a] - v[b]).abs() / peak;
                worst = worst.max(d);
                if d >= 0.5 {
                    bad.push(offset + a);
                }
            }
        }
    }
    out.push(check(
        "H.viii",
        CheckMethod::BestEffort,
        bad,
        format!("largest neighbour jump {worst:.3e} of the peak value"),
        format!("marginal neighbour jumps reach {worst:.3e} of the peak value"),
    ));

    Ok(out)
}

/// Evaluates `sum_y w_y omega2(y) / D(y)` with `D(y) = sum_z w_z g(z, y) omega1(z)`
/// in log space, plus a tail-slope heuristic.
pub fn condition_star(kernel: &KernelOperator, marginals: &MarginalPair) -> Result<ConditionStar> {
    kernel.check_marginals(marginals)?;
    let (n1, n2) = (kernel.rows(), kernel.cols());
    let w1 = kernel.grid1().weights();
    let w2 = kernel.grid2().weights();
    let lq: Vec<f64> = marginals
        .omega1()
        .values()
        .iter()
        .zip(w1)
        .map(|(&o, &w)| ln0(o.max(0.0)) + w.ln())
        .collect();
    let lg = kernel.log_values();
    let log_d = map_rows(n2, n1 * n2, |j| log_sum_exp_by(n1, &|i| lg[i * n2 + j] + lq[i]));
    let o2 = marginals.omega2().values();

    let mut zero = Vec::new();
    let mut log_terms = vec![f64::NEG_INFINITY; n2];
    let mut log_integrand = vec![f64::NAN; n2];
    for j in 0..n2 {
        if o2[j] > 0.0 {
            if log_d[j] == f64::NEG_INFINITY {
                zero.push(j);
            } else {
                log_integrand[j] = o2[j].ln() - log_d[j];
                log_terms[j] = log_integrand[j] + w2[j].ln();
            }
        }
    }
    let estimate = if zero.is_empty() {
        log_sum_exp_by(n2, &|j| log_terms[j]).exp()
    } else {
        f64::INFINITY
    };

    let grid = kernel.grid2();
    let d = grid.dim();
    let mut centre = vec![0.0; d];
    for (a, c) in centre.iter_mut().enumerate() {
        let (lo, hi) = (0..grid.len()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
            (lo.min(grid.node(i)[a]), hi.max(grid.node(i)[a]))
        });
        *c = 0.5 * (lo + hi);
    }
    let r: Vec<f64> = (0..n2)
        .map(|j| {
            grid.node(j)
                .iter()
                .zip(&centre)
                .map(|(x, c)| (x - c) * (x - c))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let r_max = r.iter().cloned().fold(0.0f64, f64::max);
    let pts: Vec<(f64, f64)> = (0..n2)
        .filter(|&j| r[j] >= 0.8 * r_max && log_integrand[j].is_finite())
        .map(|j| (r[j], log_integrand[j]))
        .collect();
    let tail_exponent = ls_slope(&pts);

    let divergent = !zero.is_empty() || !estimate.is_finite() || tail_exponent > FLAT_SLOPE_TOL;
    Ok(ConditionStar {
        estimate,
        verdict: if divergent {
            StarVerdict::SuspectedDivergent
        } else {
            StarVerdict::Finite
        },
        tail_exponent,
        zero_denominator_nodes: zero,
    })
}

/// Least-squares slope; NaN with fewer than two distinct abscissae.
fn ls_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= 0.0 {
        return f64::NAN;
    }
    sxy / sxx
}

/// `sigma^2 + sigma1^2 - sigma2^2 > 0`, strictly (a relative margin of 1e-12
/// absorbs rounding in the squares).
pub fn bernstein_gaussian_condition(sigma: f64, sigma1: f64, sigma2: f64) -> Result<bool> {
    for (name, v) in [("sigma", sigma), ("sigma1", sigma1), ("sigma2", sigma2)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
        }
    }
    let s = sigma * sigma;
    let s1 = sigma1 * sigma1;
    let s2 = sigma2 * sigma2;
    Ok(s + s1 - s2 > 1e-12 * (s + s1 + s2))
}

/// All eigenvalues of `S2^-1 - (S + S1)^-1` positive. Inputs are covariances.
pub fn bernstein_multivariate_condition(s: &DMatrix<f64>, s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> Result<bool> {
    validate_spd(s)?;
    validate_spd(s1)?;
    let e2 = validate_spd(s2)?;
    if s.shape() != s1.shape() || s.shape() != s2.shape() {
        return Err(Error::InvalidInput("matrices must have the same shape".into()));
    }
    let inv = |e: &SymmetricEigen<f64, nalgebra::Dyn>| {
        &e.eigenvectors * DMatrix::from_diagonal(&e.eigenvalues.map(|l| 1.0 / l)) * e.eigenvectors.transpose()
    };
    let sum = s + s1;
    let es = validate_spd(&sum)?;
    let a = inv(&e2);
    let b = inv(&es);
    let mut m = &a - &b;
    m = (&m + m.transpose()) * 0.5;
    let scale = a.iter().chain(b.iter()).fold(0.0f64, |acc, v| acc.max(v.abs()));
    let eig = SymmetricEigen::new(m);
    Ok(eig.eigenvalues.iter().all(|&l| l > 1e-12 * scale))
}

/// Minimum share of the scanned `t`-range each monotone tail must cover.
pub const THEOREM2_TAIL_SHARE: f64 = 0.25;

/// Scans a difference kernel for the monotone-tail patterns.
pub fn theorem2_applicability(kernel: &KernelOperator) -> Theorem2Check {
    let na = |detail: &str| Theorem2Check {
        status: Theorem2Status::NotApplicable,
        condition: None,
        t1: None,
        t2: None,
        detail: detail.to_string(),
    };
    if kernel.grid1().dim() != 1 || kernel.grid2().dim() != 1 {
        return na("requires a 1-D problem");
    }
    let (t, u): (Vec<f64>, Vec<f64>) = match kernel.provenance() {
        KernelProvenance::Gaussian { sigma } => {
            let lo = kernel.grid1().node(0)[0] - kernel.grid2().node(kernel.cols() - 1)[0];
            let hi = kernel.grid1().node(kernel.rows() - 1)[0] - kernel.grid2().node(0)[0];
            let m = 4001;
            let t: Vec<f64> = (0..m).map(|k| lo + (hi - lo) * k as f64 / (m - 1) as f64).collect();
            let c = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma).sqrt();
            let u = t.iter().map(|x| c * (-x * x / (2.0 * sigma * sigma)).exp()).collect();
            (t, u)
        }
        KernelProvenance::Difference { t, u } => (t.clone(), u.clone()),
        _ => return na("kernel is not tagged as a difference kernel"),
    };
    scan_monotone_tails(&t, &u)
}

/// Finds `T1 <= T2` such that `U` is monotone in opposite senses on
/// `(-inf, T1]` and `[T2, inf)`, each tail covering at least
/// [`THEOREM2_TAIL_SHARE`] of the sampled range.
pub fn scan_monotone_tails(t: &[f64], u: &[f64]) -> Theorem2Check {
    let m = t.len();
    if m < 3 || u.len() != m {
        return Theorem2Check {
            status: Theorem2Status::NotApplicable,
            condition: None,
            t1: None,
            t2: None,
            detail: "too few samples".into(),
        };
    }
    let slack = 1e-12 * u.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let range = t[m - 1] - t[0];
    let try_pattern = |increasing_first: bool| -> Option<(f64, f64)> {
        let up = |a: f64, b: f64| b >= a - slack;
        let down = |a: f64, b: f64| b <= a + slack;
        type Cmp<'a> = &'a dyn Fn(f64, f64) -> bool;
        let (head, tail): (Cmp, Cmp) =
            if increasing_first { (&up, &down) } else { (&down, &up) };
        let mut p = 0;
        while p + 1 < m && head(u[p], u[p + 1]) {
            p += 1;
        }
        let mut s = m - 1;
        while s > 0 && tail(u[s - 1], u[s]) {
            s -= 1;
        }
        let (t1, t2) = if s <= p {
            let mid = 0.5 * (t[0] + t[m - 1]);
            let c = mid.clamp(t[s], t[p]);
            (c, c)
        } else {
            (t[p], t[s])
        };
        let left = (t1 - t[0]) / range;
        let right = (t[m - 1] - t2) / range;
        (left >= THEOREM2_TAIL_SHARE && right >= THEOREM2_TAIL_SHARE).then_some((t1, t2))
    };
    for (cond, inc) in [(1u8, true), (2u8, false)] {
        if let Some((t1, t2)) = try_pattern(inc) {
            return Theorem2Check {
                status: Theorem2Status::Pass,
                condition: Some(cond),
                t1: Some(t1),
                t2: Some(t2),
                detail: format!("monotone tails below {t1} and above {t2}"),
            };
        }
    }
    Theorem2Check {
        status: Theorem2Status::Fail,
        condition: None,
        t1: None,
        t2: None,
        detail: format!(
            "no monotone-tail pattern covering {:.0}% of the range on each side",
            THEOREM2_TAIL_SHARE * 100.0
        ),
    }
}
