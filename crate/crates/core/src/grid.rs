//! Quadrature grids over truncated boxes and weighted integration.
//!
//! A grid is a tensor product of 1-D rules on `[-radius, radius]^dim`, or an
//! explicit 1-D node/weight list. Nodes of a tensor grid are stored row-major:
//! the last axis varies fastest.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::pairwise_sum_by;

/// Default memory cap for an `n x n` kernel matrix built on a grid.
pub const DEFAULT_MEMORY_CAP: u128 = 2 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum QuadratureRule {
    #[default]
    Trapezoid,
    GaussLegendre,
}

impl std::fmt::Display for QuadratureRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QuadratureRule::Trapezoid => f.write_str("trapezoid"),
            QuadratureRule::GaussLegendre => f.write_str("gauss-legendre"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    pub radius: f64,
    pub points_per_axis: usize,
    #[serde(default)]
    pub rule: QuadratureRule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    dim: usize,
    radius: f64,
    rule: Option<QuadratureRule>,
    axis: Vec<f64>,
    /// Flattened node coordinates, `dim` values per node.
    nodes: Vec<f64>,
    weights: Vec<f64>,
    volume: f64,
}

/// Builds a grid with the default memory cap.
pub fn build_grid(spec: &GridSpec) -> Result<Arc<QuadratureGrid>> {
    build_grid_with_cap(spec, DEFAULT_MEMORY_CAP)
}

/// Builds a grid, rejecting it when a dense kernel on it would need more than
/// `cap_bytes`.
pub fn build_grid_with_cap(spec: &GridSpec, cap_bytes: u128) -> Result<Arc<QuadratureGrid>> {
    if spec.dim == 0 {
        return Err(Error::InvalidGrid("dim must be positive".into()));
    }
    if !(spec.radius > 0.0) || !spec.radius.is_finite() {
        return Err(Error::InvalidGrid(format!(
            "radius must be positive and finite, got {}",
            spec.radius
        )));
    }
    if spec.points_per_axis < 2 {
        return Err(Error::InvalidGrid(format!(
            "points_per_axis must be at least 2, got {}",
            spec.points_per_axis
        )));
    }
    let nodes_total = (spec.points_per_axis as u128)
        .checked_pow(spec.dim as u32)
        .unwrap_or(u128::MAX);
    let bytes = nodes_total.saturating_mul(nodes_total).saturating_mul(8);
    if bytes > cap_bytes {
        return Err(Error::GridTooLarge {
            nodes: usize::try_from(nodes_total).unwrap_or(usize::MAX),
            bytes,
            cap: cap_bytes,
        });
    }

    let (axis, axis_w) = match spec.rule {
        QuadratureRule::Trapezoid => trapezoid(spec.radius, spec.points_per_axis),
        QuadratureRule::GaussLegendre => {
            let (x, w) = gauss_legendre(spec.points_per_axis);
            (
                x.iter().map(|t| t * spec.radius).collect(),
                w.iter().map(|t| t * spec.radius).collect(),
            )
        }
    };

    let (nodes, weights) = tensor(&axis, &axis_w, spec.dim);
    Ok(Arc::new(QuadratureGrid {
        dim: spec.dim,
        radius: spec.radius,
        rule: Some(spec.rule),
        axis,
        nodes,
        weights,
        volume: (2.0 * spec.radius).powi(spec.dim as i32),
    }))
}

fn trapezoid(radius: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let h = 2.0 * radius / (n - 1) as f64;
    let x: Vec<f64> = (0..n)
        .map(|i| {
            // Mirror the upper half so the grid is exactly symmetric.
            let j = i.min(n - 1 - i);
            let v = -radius + j as f64 * h;
            if i == j {
                v
            } else {
                -v
            }
        })
        .collect();
    let mut w = vec![h; n];
    w[0] = h / 2.0;
    w[n - 1] = h / 2.0;
    (x, w)
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`, ascending.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, z);
        if d.is_finite() {
            dp = d;
        }
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

/// Legendre polynomial P_n and its derivative at `z` by the three-term recurrence.
fn legendre(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p, d)
}

fn tensor(axis: &[f64], w: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let p = axis.len();
    let total = p.pow(dim as u32);
    let mut nodes = Vec::with_capacity(total * dim);
    let mut weights = Vec::with_capacity(total);
    let mut idx = vec![0usize; dim];
    for _ in 0..total {
        let mut wt = 1.0;
        for &k in &idx {
            nodes.push(axis[k]);
            wt *= w[k];
        }
        weights.push(wt);
        for d in (0..dim).rev() {
            idx[d] += 1;
            if idx[d] < p {
                break;
            }
            idx[d] = 0;
        }
    }
    (nodes, weights)
}

impl QuadratureGrid {
    /// Explicit 1-D grid from strictly increasing nodes and positive weights.
    pub fn from_nodes(nodes: Vec<f64>, weights: Vec<f64>) -> Result<Arc<Self>> {
        if nodes.len() < 2 {
            return Err(Error::InvalidGrid("need at least 2 nodes".into()));
        }
        if nodes.len() != weights.len() {
            return Err(Error::LengthMismatch {
                expected: nodes.len(),
                actual: weights.len(),
            });
        }
        for (i, (&x, &w)) in nodes.iter().zip(&weights).enumerate() {
            if !x.is_finite() {
                return Err(Error::NonFinite { index: i, value: x });
            }
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::InvalidGrid(format!(
                    "weight {w} at node {i} is not positive"
                )));
            }
        }
        if let Some(i) = nodes.windows(2).position(|p| p[1] <= p[0]) {
            return Err(Error::InvalidGrid(format!(
                "nodes not strictly increasing at index {}",
                i + 1
            )));
        }
        let lo = nodes[0];
        let hi = nodes[nodes.len() - 1];
        let volume = pairwise_sum_by(weights.len(), &|i| weights[i]);
        Ok(Arc::new(QuadratureGrid {
            dim: 1,
            radius: (hi - lo) / 2.0,
            rule: None,
            axis: nodes.clone(),
            nodes,
            weights,
            volume,
        }))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// `None` for explicit grids.
    pub fn rule(&self) -> Option<QuadratureRule> {
        self.rule
    }

    pub fn points_per_axis(&self) -> usize {
        self.axis.len()
    }

    /// 1-D node coordinates of one axis (identical on every axis).
    pub fn axis(&self) -> &[f64] {
        &self.axis
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }

    /// Flattened coordinates, `dim` per node.
    pub fn coords(&self) -> &[f64] {
        &self.nodes
    }

    /// Covered volume: `(2 r)^d` for box grids, the weight sum for explicit ones.
    pub fn volume(&self) -> f64 {
        self.volume
    }

    /// Squared Euclidean distance between node `i` of `self` and node `j` of `other`.
    pub fn dist2(&self, i: usize, other: &QuadratureGrid, j: usize) -> f64 {
        self.node(i)
            .iter()
            .zip(other.node(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// `sum_i w_i f_i` in pairwise order. Rejects non-finite values.
    pub fn integrate_values(&self, values: &[f64]) -> Result<f64> {
        if values.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index: i,
                value: values[i],
            });
        }
        Ok(pairwise_sum_by(values.len(), &|i| self.weights[i] * values[i]))
    }

    pub fn integrate(&self, f: &GridFunction) -> Result<f64> {
        self.integrate_values(&f.values)
    }

    /// Samples `f` at every node.
    pub fn sample<F: Fn(&[f64]) -> f64>(self: &Arc<Self>, f: F) -> Result<GridFunction> {
        let values = (0..self.len()).map(|i| f(self.node(i))).collect();
        GridFunction::new(self.clone(), values)
    }

    /// Same node set and weights.
    pub fn same_as(&self, other: &QuadratureGrid) -> bool {
        self.dim == other.dim && self.nodes == other.nodes && self.weights == other.weights
    }
}

/// Finite values sampled on a grid.
#[derive(Debug, Clone)]
pub struct GridFunction {
    grid: Arc<QuadratureGrid>,
    values: Vec<f64>,
}

impl GridFunction {
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
        Ok(GridFunction { grid, values })
    }

    pub fn constant(grid: Arc<QuadratureGrid>, c: f64) -> Result<Self> {
        let n = grid.len();
        GridFunction::new(grid, vec![c; n])
    }

    pub fn grid(&self) -> &Arc<QuadratureGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn integrate(&self) -> f64 {
        // Values are finite by construction.
        pairwise_sum_by(self.values.len(), &|i| {
            self.grid.weights[i] * self.values[i]
        })
    }
}

/// `integrate` as a free function.
pub fn integrate(f: &GridFunction) -> f64 {
    f.integrate()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec(dim: usize, radius: f64, n: usize, rule: QuadratureRule) -> GridSpec {
        GridSpec {
            dim,
            radius,
            points_per_axis: n,
            rule,
        }
    }

    #[test]
    fn uniform_spacing() {
        let g = build_grid(&spec(1, 8.0, 401, QuadratureRule::Trapezoid)).unwrap();
        assert_eq!(g.len(), 401);
        for p in g.axis().windows(2) {
            assert!((p[1] - p[0] - 0.04).abs() < 1e-12);
        }
        assert_eq!(g.axis()[200], 0.0);
        assert_eq!(g.axis()[0], -8.0);
        assert_eq!(g.axis()[400], 8.0);
    }

    #[test]
    fn two_point_trapezoid() {
        let g = build_grid(&spec(1, 1.0, 2, QuadratureRule::Trapezoid)).unwrap();
        assert_eq!(g.weights(), &[1.0, 1.0]);
    }

    #[test]
    fn tensor_weights_sum_to_box_volume() {
        let g = build_grid(&spec(2, 4.0, 51, QuadratureRule::Trapezoid)).unwrap();
        assert_eq!(g.len(), 2601);
        let one = GridFunction::constant(g.clone(), 1.0).unwrap();
        assert_relative_eq!(one.integrate(), 64.0, epsilon = 1e-10);
        // Row-major: the last axis varies fastest.
        assert_eq!(g.node(1), &[-4.0, g.axis()[1]]);
    }

    #[test]
    fn gauss_legendre_weights_sum_to_volume() {
        for n in [2, 3, 7, 20, 64, 201] {
            let g = build_grid(&spec(1, 3.0, n, QuadratureRule::GaussLegendre)).unwrap();
            let s: f64 = g.weights().iter().sum();
            assert_relative_eq!(s, 6.0, max_relative = 1e-12);
            assert!(g.axis().windows(2).all(|p| p[1] > p[0]));
        }
    }

    #[test]
    fn memory_cap_rejects_with_estimate() {
        let err = build_grid_with_cap(&spec(3, 1.0, 100, QuadratureRule::Trapezoid), 1 << 30)
            .unwrap_err();
        match err {
            Error::GridTooLarge { nodes, bytes, .. } => {
                assert_eq!(nodes, 1_000_000);
                assert_eq!(bytes, 8_000_000_000_000);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(build_grid(&spec(1, 0.0, 10, QuadratureRule::Trapezoid)).is_err());
        assert!(build_grid(&spec(1, 1.0, 1, QuadratureRule::Trapezoid)).is_err());
        assert!(build_grid(&spec(0, 1.0, 10, QuadratureRule::Trapezoid)).is_err());
        assert!(QuadratureGrid::from_nodes(vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
        assert!(QuadratureGrid::from_nodes(vec![0.0, 1.0], vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn integrate_rejects_non_finite_with_index() {
        let g = build_grid(&spec(1, 1.0, 5, QuadratureRule::Trapezoid)).unwrap();
        let err = g
            .integrate_values(&[0.0, 1.0, f64::NAN, 0.0, 0.0])
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 2, .. }));
        assert!(GridFunction::new(g, vec![0.0, 1.0, 2.0, f64::INFINITY, 0.0]).is_err());
    }
}
