//! Kernel-vector products in either linear or log representation.
//!
//! Vectors handed to an [`Engine`] are in its [`Repr`]: plain values for the
//! direct backend, natural logarithms (with `-inf` for exact zeros) for the
//! log backend.

use serde::{Deserialize, Serialize};

use crate::numeric::{ln0, log_sum_exp_by, map_rows, pairwise_sum_by};
use crate::problem::KernelOperator;

/// The direct backend is chosen by `Auto` only when every kernel entry is
/// at least this fraction of the largest one.
pub const DIRECT_DYNAMIC_RANGE: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    #[default]
    Auto,
    Direct,
    Log,
}

impl std::fmt::Display for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Backend::Auto => "auto",
            Backend::Direct => "direct",
            Backend::Log => "log",
        })
    }
}

impl std::str::FromStr for Backend {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "auto" => Ok(Backend::Auto),
            "direct" => Ok(Backend::Direct),
            "log" => Ok(Backend::Log),
            _ => Err(format!("unknown backend {s:?} (expected auto, direct or log)")),
        }
    }
}

impl Backend {
    /// Resolves `Auto` from the kernel's dynamic range.
    pub fn resolve(self, kernel: &KernelOperator) -> Backend {
        match self {
            Backend::Auto => {
                if kernel.log_dynamic_range() < DIRECT_DYNAMIC_RANGE.ln() {
                    Backend::Log
                } else {
                    Backend::Direct
                }
            }
            b => b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Repr {
    Linear,
    Log,
}

impl Repr {
    #[inline]
    pub fn from_ln(self, l: f64) -> f64 {
        match self {
            Repr::Linear => l.exp(),
            Repr::Log => l,
        }
    }

    #[inline]
    pub fn to_ln(self, v: f64) -> f64 {
        match self {
            Repr::Linear => ln0(v),
            Repr::Log => v,
        }
    }

    #[inline]
    pub fn from_linear(self, v: f64) -> f64 {
        match self {
            Repr::Linear => v,
            Repr::Log => ln0(v),
        }
    }

    #[inline]
    pub fn to_linear(self, v: f64) -> f64 {
        match self {
            Repr::Linear => v,
            Repr::Log => v.exp(),
        }
    }

    /// The representation of zero.
    #[inline]
    pub fn zero(self) -> f64 {
        match self {
            Repr::Linear => 0.0,
            Repr::Log => f64::NEG_INFINITY,
        }
    }

    /// Product of two represented values.
    #[inline]
    pub fn mul(self, a: f64, b: f64) -> f64 {
        match self {
            Repr::Linear => a * b,
            Repr::Log => a + b,
        }
    }

    /// Quotient of two represented values.
    #[inline]
    pub fn div(self, a: f64, b: f64) -> f64 {
        match self {
            Repr::Linear => a / b,
            Repr::Log => a - b,
        }
    }
}

/// Row-major kernel plus its transpose, stored once per solve.
#[derive(Debug, Clone)]
pub struct Engine {
    backend: Backend,
    rows: usize,
    cols: usize,
    g: Vec<f64>,
    gt: Vec<f64>,
}

impl Engine {
    pub fn new(kernel: &KernelOperator, backend: Backend) -> Self {
        let backend = backend.resolve(kernel);
        let (rows, cols) = (kernel.rows(), kernel.cols());
        let g: Vec<f64> = match backend {
            Backend::Log => kernel.log_values().to_vec(),
            _ => kernel.values().to_vec(),
        };
        let mut gt = vec![0.0; g.len()];
        for i in 0..rows {
            for j in 0..cols {
                gt[j * rows + i] = g[i * cols + j];
            }
        }
        Engine {
            backend,
            rows,
            cols,
            g,
            gt,
        }
    }

    /// `Direct` or `Log`, never `Auto`.
    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn repr(&self) -> Repr {
        match self.backend {
            Backend::Log => Repr::Log,
            _ => Repr::Linear,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// `out_j = sum_i g(i, j) q_i` for every column `j`.
    pub fn col_apply(&self, q: &[f64]) -> Vec<f64> {
        debug_assert_eq!(q.len(), self.rows);
        apply(&self.gt, self.cols, self.rows, q, self.backend)
    }

    /// `out_i = sum_j g(i, j) r_j` for every row `i`.
    pub fn row_apply(&self, r: &[f64]) -> Vec<f64> {
        debug_assert_eq!(r.len(), self.cols);
        apply(&self.g, self.rows, self.cols, r, self.backend)
    }
}

fn apply(m: &[f64], out_len: usize, inner: usize, v: &[f64], backend: Backend) -> Vec<f64> {
    let work = out_len * inner;
    match backend {
        Backend::Log => map_rows(out_len, work, |k| {
            let row = &m[k * inner..(k + 1) * inner];
            log_sum_exp_by(inner, &|i| row[i] + v[i])
        }),
        _ => map_rows(out_len, work, |k| {
            let row = &m[k * inner..(k + 1) * inner];
            pairwise_sum_by(inner, &|i| row[i] * v[i])
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, GridSpec, QuadratureRule};

    #[test]
    fn log_and_direct_agree() {
        let g = build_grid(&GridSpec {
            dim: 1,
            radius: 2.0,
            points_per_axis: 9,
            rule: QuadratureRule::Trapezoid,
        })
        .unwrap();
        let k = KernelOperator::gaussian(g.clone(), g, 0.8).unwrap();
        let d = Engine::new(&k, Backend::Direct);
        let l = Engine::new(&k, Backend::Log);
        let v: Vec<f64> = (0..9).map(|i| 0.1 + i as f64).collect();
        let lv: Vec<f64> = v.iter().map(|x| x.ln()).collect();
        for (a, b) in d.col_apply(&v).iter().zip(l.col_apply(&lv)) {
            assert!((a.ln() - b).abs() < 1e-13);
        }
        for (a, b) in d.row_apply(&v).iter().zip(l.row_apply(&lv)) {
            assert!((a.ln() - b).abs() < 1e-13);
        }
    }

    #[test]
    fn auto_picks_log_for_underflowing_kernels() {
        let g = build_grid(&GridSpec {
            dim: 1,
            radius: 8.0,
            points_per_axis: 41,
            rule: QuadratureRule::Trapezoid,
        })
        .unwrap();
        let narrow = KernelOperator::gaussian(g.clone(), g.clone(), 0.1).unwrap();
        assert_eq!(Backend::Auto.resolve(&narrow), Backend::Log);
        let wide = KernelOperator::gaussian(g.clone(), g, 0.5).unwrap();
        assert_eq!(Backend::Auto.resolve(&wide), Backend::Direct);
    }
}
