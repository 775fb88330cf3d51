//! Coupling, relative-entropy objective, entropic interpolation and the
//! closed-form Gaussian solution used as an oracle.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fortet::{verify_system, PotentialPair, SystemResiduals};
use crate::grid::QuadratureGrid;
use crate::numeric::{ln0, log_sum_exp_by, map_rows, pairwise_sum_by};
use crate::problem::{bernstein_gaussian_condition, DensityField, GaussianForm, KernelOperator, MarginalPair};
use crate::serde_util::lossy_f64;

/// Largest tolerated deviation of the interpolated mass from 1.
pub const MAX_MASS_DRIFT: f64 = 1e-4;

/// Residual bound for [`GaussianBridgeSpec::validate`].
pub const ORACLE_RESIDUAL: f64 = 1e-8;

/// Joint density `pi(x_i, y_j)` on the product grid (weights not folded in).
#[derive(Debug, Clone)]
pub struct Coupling {
    grid1: Arc<QuadratureGrid>,
    grid2: Arc<QuadratureGrid>,
    pi: Vec<f64>,
    pub row_marginal_resid: f64,
    pub col_marginal_resid: f64,
    pub mass: f64,
}

impl Coupling {
    /// Wraps a row-major density and measures its marginal residuals.
    pub fn new(
        grid1: Arc<QuadratureGrid>,
        grid2: Arc<QuadratureGrid>,
        pi: Vec<f64>,
        marginals: &MarginalPair,
    ) -> Result<Self> {
        let (n1, n2) = (grid1.len(), grid2.len());
        if pi.len() != n1 * n2 {
            return Err(Error::LengthMismatch {
                expected: n1 * n2,
                actual: pi.len(),
            });
        }
        if let Some(k) = pi.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: k, value: pi[k] });
        }
        let w1 = grid1.weights();
        let w2 = grid2.weights();
        let rows = map_rows(n1, n1 * n2, |i| pairwise_sum_by(n2, &|j| w2[j] * pi[i * n2 + j]));
        let cols = map_rows(n2, n1 * n2, |j| pairwise_sum_by(n1, &|i| w1[i] * pi[i * n2 + j]));
        let o1 = marginals.omega1().values();
        let o2 = marginals.omega2().values();
        let row_marginal_resid = (0..n1).map(|i| (rows[i] - o1[i]).abs()).fold(0.0, f64::max);
        let col_marginal_resid = (0..n2).map(|j| (cols[j] - o2[j]).abs()).fold(0.0, f64::max);
        let mass = pairwise_sum_by(n1, &|i| w1[i] * rows[i]);
        Ok(Coupling {
            grid1,
            grid2,
            pi,
            row_marginal_resid,
            col_marginal_resid,
            mass,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.pi
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.pi[i * self.grid2.len() + j]
    }

    pub fn rows(&self) -> usize {
        self.grid1.len()
    }

    pub fn cols(&self) -> usize {
        self.grid2.len()
    }
}

/// `pi(x, y) = phi(x) g(x, y) psi(y)`.
pub fn build_coupling(pot: &PotentialPair, kernel: &KernelOperator, marginals: &MarginalPair) -> Result<Coupling> {
    kernel.check_marginals(marginals)?;
    let n2 = kernel.cols();
    let lg = kernel.log_values();
    let pi: Vec<f64> = (0..lg.len())
        .map(|k| (pot.log_phi[k / n2] + lg[k] + pot.log_psi[k % n2]).exp())
        .collect();
    Coupling::new(kernel.grid1().clone(), kernel.grid2().clone(), pi, marginals)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlValue {
    #[serde(with = "lossy_f64")]
    pub value: f64,
    /// `pi > 0` somewhere the prior vanishes.
    pub infinite: bool,
}

/// Relative entropy of `pi` with respect to `omega1(x) g(x, y)`, with
/// `0 log 0 = 0`.
pub fn kl_objective(pi: &Coupling, kernel: &KernelOperator, marginals: &MarginalPair) -> Result<KlValue> {
    kernel.check_marginals(marginals)?;
    let n2 = kernel.cols();
    let w1 = kernel.grid1().weights();
    let w2 = kernel.grid2().weights();
    let o1 = marginals.omega1().values();
    let lg = kernel.log_values();
    let p = pi.values();
    let mut infinite = false;
    let terms: Vec<f64> = (0..p.len())
        .map(|k| {
            let (i, j) = (k / n2, k % n2);
            if p[k] <= 0.0 {
                return 0.0;
            }
            let lprior = ln0(o1[i].max(0.0)) + lg[k];
            if lprior == f64::NEG_INFINITY {
                infinite = true;
                return 0.0;
            }
            w1[i] * w2[j] * p[k] * (p[k].ln() - lprior)
        })
        .collect();
    if infinite {
        return Ok(KlValue {
            value: f64::INFINITY,
            infinite: true,
        });
    }
    Ok(KlValue {
        value: pairwise_sum_by(terms.len(), &|k| terms[k]),
        infinite: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostDecomposition {
    /// `sum w_i w_j |x_i - y_j|^2 / 2 pi_ij`.
    pub transport_term: f64,
    /// `sum w_i w_j pi_ij ln pi_ij`.
    pub entropy_term: f64,
    pub epsilon: f64,
    /// `transport_term + epsilon * entropy_term`.
    pub regularized: f64,
}

pub fn entropic_cost_decomposition(pi: &Coupling, epsilon: f64) -> CostDecomposition {
    let (g1, g2) = (&pi.grid1, &pi.grid2);
    let n2 = g2.len();
    let p = pi.values();
    let ww = |k: usize| g1.weights()[k / n2] * g2.weights()[k % n2];
    let transport = pairwise_sum_by(p.len(), &|k| ww(k) * 0.5 * g1.dist2(k / n2, g2, k % n2) * p[k]);
    let entropy = pairwise_sum_by(p.len(), &|k| if p[k] > 0.0 { ww(k) * p[k] * p[k].ln() } else { 0.0 });
    CostDecomposition {
        transport_term: transport,
        entropy_term: entropy,
        epsilon,
        regularized: transport + epsilon * entropy,
    }
}

#[derive(Debug, Clone)]
pub struct Interpolation {
    pub t: f64,
    /// Unit-mass density.
    pub rho: DensityField,
    /// Mass before renormalization.
    pub mass: f64,
    /// `1 / mass`, the factor applied.
    pub renorm_factor: f64,
}

/// Marginal at time `t` of the bridge built from `pot`, by propagating `psi`
/// backward and `phi` forward with the heat kernel over the matching time
/// spans. Both grids must coincide.
pub fn entropic_interpolation(pot: &PotentialPair, kernel: &KernelOperator, t: f64) -> Result<Interpolation> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidInput(format!("t must lie in [0, 1], got {t}")));
    }
    let cov = kernel
        .heat_covariance()
        .ok_or_else(|| Error::NotHeatKernel("kernel is not a Gaussian transition density".into()))?;
    let grid = kernel.grid1();
    if !grid.same_as(kernel.grid2()) {
        return Err(Error::NotHeatKernel("interpolation needs identical grids on both sides".into()));
    }
    let n = grid.len();
    let lw: Vec<f64> = grid.weights().iter().map(|w| w.ln()).collect();

    let propagate = |logs: &[f64], tau: f64| -> Result<Vec<f64>> {
        if tau == 0.0 {
            return Ok(logs.to_vec());
        }
        let form = GaussianForm::new(&(&cov * tau))?;
        let d = grid.dim();
        Ok(map_rows(n, n * n, |x| {
            log_sum_exp_by(n, &|y| {
                if logs[y] == f64::NEG_INFINITY {
                    return f64::NEG_INFINITY;
                }
                let delta: Vec<f64> = (0..d).map(|a| grid.node(y)[a] - grid.node(x)[a]).collect();
                form.log_density(&delta) + lw[y] + logs[y]
            })
        }))
    };
    let fwd = propagate(&pot.log_psi, 1.0 - t)?;
    let bwd = propagate(&pot.log_phi, t)?;
    let rho: Vec<f64> = (0..n).map(|i| (fwd[i] + bwd[i]).exp()).collect();
    let mass = pairwise_sum_by(n, &|i| grid.weights()[i] * rho[i]);
    if !((mass - 1.0).abs() <= MAX_MASS_DRIFT) {
        return Err(Error::NumericFault(format!(
            "interpolated mass {mass} at t = {t} drifts more than {MAX_MASS_DRIFT} from 1"
        )));
    }
    let f = 1.0 / mass;
    Ok(Interpolation {
        t,
        rho: DensityField::new(grid.clone(), rho.iter().map(|r| r * f).collect())?,
        mass,
        renorm_factor: f,
    })
}

/// Closed-form potentials for centered Gaussian marginals and heat kernel in 1-D:
/// `phi(x) = c_phi exp(-a x^2 / 2)`, `psi(y) = c_psi exp(-b y^2 / 2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianBridgeSpec {
    pub sigma: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub a_phi: f64,
    pub b_psi: f64,
    pub c_phi: f64,
    pub c_psi: f64,
    /// `sigma^2 + sigma1^2 > sigma2^2`.
    pub bernstein_forward: bool,
    /// The forward condition fails but the exchanged one holds.
    pub swap_recommended: bool,
}

/// Solves the two exponent equations
/// `a + b / (1 + sigma^2 b) = 1 / sigma1^2` and `b + a / (1 + sigma^2 a) = 1 / sigma2^2`.
///
/// With `A = 1 + sigma^2 a`, `B = 1 + sigma^2 b`, `s = sigma^2 / sigma1^2` and
/// `r = sigma2^2 / sigma1^2` these reduce to `r B^2 - s B - 1 = 0`, `A = s + 1 / B`.
pub fn gaussian_oracle(sigma: f64, sigma1: f64, sigma2: f64) -> Result<GaussianBridgeSpec> {
    let forward = bernstein_gaussian_condition(sigma, sigma1, sigma2)?;
    let backward = bernstein_gaussian_condition(sigma, sigma2, sigma1)?;
    if !forward && !backward {
        return Err(Error::Infeasible(
            "sign condition fails in both orientations".into(),
        ));
    }
    let s2 = sigma * sigma;
    let s = s2 / (sigma1 * sigma1);
    let r = (sigma2 * sigma2) / (sigma1 * sigma1);
    let big_b = (s + (s * s + 4.0 * r).sqrt()) / (2.0 * r);
    let big_a = s + 1.0 / big_b;
    if !(big_a > 0.0 && big_b > 0.0) {
        return Err(Error::Infeasible(format!(
            "no admissible exponents: 1 + sigma^2 a = {big_a}, 1 + sigma^2 b = {big_b}"
        )));
    }
    Ok(GaussianBridgeSpec {
        sigma,
        sigma1,
        sigma2,
        a_phi: (big_a - 1.0) / s2,
        b_psi: (big_b - 1.0) / s2,
        c_phi: big_b.sqrt() / (2.0 * PI * sigma1 * sigma1).sqrt(),
        c_psi: 1.0,
        bernstein_forward: forward,
        swap_recommended: !forward && backward,
    })
}

impl GaussianBridgeSpec {
    pub fn log_phi(&self, x: f64) -> f64 {
        self.c_phi.ln() - 0.5 * self.a_phi * x * x
    }

    pub fn log_psi(&self, y: f64) -> f64 {
        self.c_psi.ln() - 0.5 * self.b_psi * y * y
    }

    /// The oracle pair sampled on 1-D grids.
    pub fn potentials_on(&self, grid1: &QuadratureGrid, grid2: &QuadratureGrid) -> PotentialPair {
        PotentialPair {
            log_phi: (0..grid1.len()).map(|i| self.log_phi(grid1.node(i)[0])).collect(),
            log_psi: (0..grid2.len()).map(|j| self.log_psi(grid2.node(j)[0])).collect(),
        }
    }

    /// Variance of the bridge marginal at time `t`.
    pub fn interpolation_variance(&self, t: f64) -> f64 {
        let s2 = self.sigma * self.sigma;
        let prec = self.a_phi / (1.0 + self.a_phi * s2 * t) + self.b_psi / (1.0 + self.b_psi * s2 * (1.0 - t));
        1.0 / prec
    }

    /// Inserts the closed-form pair into the discrete system on the given
    /// problem and fails unless both residuals are at most `1e-8`.
    pub fn validate(&self, kernel: &KernelOperator, marginals: &MarginalPair) -> Result<SystemResiduals> {
        let pot = self.potentials_on(kernel.grid1(), kernel.grid2());
        let r = verify_system(&pot, kernel, marginals)?;
        if !(r.s1_resid <= ORACLE_RESIDUAL && r.s2_resid <= ORACLE_RESIDUAL) {
            return Err(Error::NumericFault(format!(
                "closed-form pair leaves residuals {:e}, {:e} on this grid",
                r.s1_resid, r.s2_resid
            )));
        }
        Ok(r)
    }

    /// Oracle for the problem with the marginals exchanged.
    pub fn swapped(&self) -> Result<GaussianBridgeSpec> {
        gaussian_oracle(self.sigma, self.sigma2, self.sigma1)
    }
}
