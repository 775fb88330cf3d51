//! Sinkhorn / iterative proportional fitting on the weighted kernel.
//!
//! `u <- omega1 / (G_w v)`, `v <- omega2 / (G_w^T u)` where `G_w` folds the
//! quadrature weights into the kernel. At the fixed point `u` and `v` are
//! the potentials `phi` and `psi` of the system. On exit the pair is scaled
//! so that `max u = 1`.

use serde::{Deserialize, Serialize};

use crate::engine::{Backend, Engine, Repr};
use crate::error::{Error, Result};
use crate::fortet::{PotentialPair, TraceRow};
use crate::problem::{KernelOperator, MarginalPair};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub backend: Backend,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        SinkhornOptions {
            tol: 1e-10,
            max_iter: 10_000,
            backend: Backend::Auto,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScalingPair {
    pub log_u: Vec<f64>,
    pub log_v: Vec<f64>,
    pub iterations: usize,
    /// Sup-log-change of the last sweep.
    pub final_change: f64,
    pub backend: Backend,
}

impl ScalingPair {
    pub fn u(&self) -> Vec<f64> {
        self.log_u.iter().map(|l| l.exp()).collect()
    }

    pub fn v(&self) -> Vec<f64> {
        self.log_v.iter().map(|l| l.exp()).collect()
    }

    /// `(u, v)` read as `(phi, psi)`.
    pub fn potentials(&self) -> PotentialPair {
        PotentialPair {
            log_phi: self.log_u.clone(),
            log_psi: self.log_v.clone(),
        }
    }
}

/// Full run record: the scaling pair, per-sweep Hilbert steps of `u`, and
/// trace rows in the solver's CSV layout.
#[derive(Debug, Clone)]
pub struct SinkhornRun {
    pub pair: ScalingPair,
    /// `d_H(u_k, u_{k+1})` on the support of omega1, starting at `k = 1`.
    pub hilbert_steps: Vec<f64>,
    pub trace: Vec<TraceRow>,
}

pub fn run_sinkhorn(kernel: &KernelOperator, marginals: &MarginalPair, opts: &SinkhornOptions) -> Result<ScalingPair> {
    Ok(run_sinkhorn_traced(kernel, marginals, opts)?.pair)
}

/// Per-sweep Hilbert distances between successive `u` iterates.
pub fn sinkhorn_trace_hilbert(kernel: &KernelOperator, marginals: &MarginalPair, opts: &SinkhornOptions) -> Result<Vec<f64>> {
    Ok(run_sinkhorn_traced(kernel, marginals, opts)?.hilbert_steps)
}

pub fn run_sinkhorn_traced(kernel: &KernelOperator, marginals: &MarginalPair, opts: &SinkhornOptions) -> Result<SinkhornRun> {
    kernel.check_marginals(marginals)?;
    let backend = opts.backend.resolve(kernel);
    match sweep(kernel, marginals, opts, backend) {
        Err(Error::NumericFault(_)) if opts.backend == Backend::Auto && backend == Backend::Direct => {
            sweep(kernel, marginals, opts, Backend::Log)
        }
        r => r,
    }
}

fn sweep(kernel: &KernelOperator, marginals: &MarginalPair, opts: &SinkhornOptions, backend: Backend) -> Result<SinkhornRun> {
    let engine = Engine::new(kernel, backend);
    let repr = engine.repr();
    let o1 = marginals.omega1().values();
    let o2 = marginals.omega2().values();
    let w1: Vec<f64> = kernel.grid1().weights().iter().map(|&w| repr.from_linear(w)).collect();
    let w2: Vec<f64> = kernel.grid2().weights().iter().map(|&w| repr.from_linear(w)).collect();
    let r1: Vec<f64> = o1.iter().map(|&v| repr.from_linear(v.max(0.0))).collect();
    let r2: Vec<f64> = o2.iter().map(|&v| repr.from_linear(v.max(0.0))).collect();

    let mut v = vec![repr.from_linear(1.0); o2.len()];
    let mut u = vec![repr.zero(); o1.len()];
    let mut prev_u: Option<Vec<f64>> = None;
    let mut hilbert_steps = Vec::new();
    let mut trace = Vec::new();

    let scale = |target: &[f64], prod: &[f64], side: &str| -> Result<Vec<f64>> {
        let mut out = vec![repr.zero(); target.len()];
        for k in 0..target.len() {
            if target[k] == repr.zero() {
                continue;
            }
            let p = prod[k];
            let ok = match repr {
                Repr::Linear => p > 1e-300 && p.is_finite(),
                Repr::Log => p > f64::NEG_INFINITY && p.is_finite(),
            };
            if !ok {
                if p == repr.zero() && repr == Repr::Log {
                    return Err(Error::InvalidInput(format!(
                        "kernel product vanishes at {side} node {k} where the marginal is positive"
                    )));
                }
                return Err(Error::NumericFault(format!("kernel product {p} at {side} node {k}")));
            }
            out[k] = repr.div(target[k], p);
        }
        Ok(out)
    };

    for it in 1..=opts.max_iter {
        let rv: Vec<f64> = v.iter().zip(&w2).map(|(&a, &b)| repr.mul(a, b)).collect();
        let new_u = scale(&r1, &engine.row_apply(&rv), "first-grid")?;
        let qu: Vec<f64> = new_u.iter().zip(&w1).map(|(&a, &b)| repr.mul(a, b)).collect();
        let new_v = scale(&r2, &engine.col_apply(&qu), "second-grid")?;

        let du = sup_log_change(repr, &u, &new_u);
        let dv = sup_log_change(repr, &v, &new_v);
        let change = if it == 1 { f64::INFINITY } else { du.max(dv) };
        let hstep = match &prev_u {
            Some(_) => hilbert_log(repr, &u, &new_u, &r1),
            None => f64::NAN,
        };
        if prev_u.is_some() {
            hilbert_steps.push(hstep);
        }

        // Row-marginal error of the current coupling.
        let rv: Vec<f64> = new_v.iter().zip(&w2).map(|(&a, &b)| repr.mul(a, b)).collect();
        let rows = engine.row_apply(&rv);
        let resid = (0..o1.len())
            .map(|i| (repr.to_linear(repr.mul(new_u[i], rows[i])) - o1[i].max(0.0)).abs())
            .fold(0.0f64, f64::max);
        trace.push(TraceRow {
            n: it,
            sup_change: change,
            normalization_residual: resid,
            hilbert_step: hstep,
            case1_candidate: false,
        });

        prev_u = Some(std::mem::replace(&mut u, new_u));
        v = new_v;
        if change < opts.tol {
            let lu: Vec<f64> = u.iter().map(|&x| repr.to_ln(x)).collect();
            let lv: Vec<f64> = v.iter().map(|&x| repr.to_ln(x)).collect();
            let top = lu.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            return Ok(SinkhornRun {
                pair: ScalingPair {
                    log_u: lu.iter().map(|l| l - top).collect(),
                    log_v: lv.iter().map(|l| l + top).collect(),
                    iterations: it,
                    final_change: change,
                    backend: engine.backend(),
                },
                hilbert_steps,
                trace,
            });
        }
    }
    Err(Error::NotConverged {
        iterations: opts.max_iter,
        trace,
    })
}

fn sup_log_change(repr: Repr, a: &[f64], b: &[f64]) -> f64 {
    let mut m = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (lx, ly) = (repr.to_ln(x), repr.to_ln(y));
        if lx == ly {
            continue;
        }
        let d = (lx - ly).abs();
        m = m.max(if d.is_nan() { f64::INFINITY } else { d });
    }
    m
}

fn hilbert_log(repr: Repr, a: &[f64], b: &[f64], support: &[f64]) -> f64 {
    let mut hi = f64::NEG_INFINITY;
    let mut lo = f64::INFINITY;
    for i in 0..a.len() {
        if support[i] == repr.zero() {
            continue;
        }
        let d = repr.to_ln(b[i]) - repr.to_ln(a[i]);
        hi = hi.max(d);
        lo = lo.min(d);
    }
    if hi < lo {
        0.0
    } else {
        hi - lo
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::QuadratureGrid;
    use crate::problem::DensityField;

    #[test]
    fn two_by_two_symmetric_scaling() {
        let g = QuadratureGrid::from_nodes(vec![0.0, 1.0], vec![1.0, 1.0]).unwrap();
        let k = KernelOperator::from_matrix(g.clone(), g.clone(), vec![1.0, 0.5, 0.5, 1.0]).unwrap();
        let m = MarginalPair::new(
            DensityField::new(g.clone(), vec![0.5, 0.5]).unwrap(),
            DensityField::new(g, vec![0.5, 0.5]).unwrap(),
        )
        .unwrap();
        let s = run_sinkhorn(&k, &m, &SinkhornOptions { tol: 1e-15, ..Default::default() }).unwrap();
        let u = s.u();
        let v = s.v();
        assert_eq!(u[0], u[1]);
        assert_eq!(v[0], v[1]);
        assert_eq!(u[0], 1.0);
        // u v (1 + 0.5) = 0.5
        assert!((u[0] * v[0] * 1.5 - 0.5).abs() < 1e-14);
    }
}
