#![allow(dead_code)]

use std::sync::Arc;

use fortet_core::{build_grid, DensityField, GridSpec, KernelOperator, MarginalPair, QuadratureGrid, QuadratureRule};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn line(radius: f64, points: usize) -> Arc<QuadratureGrid> {
    build_grid(&GridSpec {
        dim: 1,
        radius,
        points_per_axis: points,
        rule: QuadratureRule::Trapezoid,
    })
    .unwrap()
}

/// Centered Gaussian kernel and marginals on one shared line grid.
pub fn gaussian(sigma: f64, sigma1: f64, sigma2: f64, radius: f64, points: usize) -> (Arc<QuadratureGrid>, KernelOperator, MarginalPair) {
    let g = line(radius, points);
    let k = KernelOperator::gaussian(g.clone(), g.clone(), sigma).unwrap();
    let m = MarginalPair::new(
        DensityField::gaussian(g.clone(), &[0.0], sigma1).unwrap(),
        DensityField::gaussian(g.clone(), &[0.0], sigma2).unwrap(),
    )
    .unwrap();
    (g, k, m)
}

pub fn benchmark() -> (Arc<QuadratureGrid>, KernelOperator, MarginalPair) {
    gaussian(0.5, 1.0, 0.8, 8.0, 401)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Explicit 1-D grid with irregular positive weights.
pub fn random_grid(rng: &mut ChaCha8Rng, n: usize) -> Arc<QuadratureGrid> {
    let nodes: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    QuadratureGrid::from_nodes(nodes, weights).unwrap()
}

/// Strictly positive kernel and marginals of the given sizes.
pub fn random_instance(rng: &mut ChaCha8Rng, n1: usize, n2: usize) -> (KernelOperator, MarginalPair) {
    let g1 = random_grid(rng, n1);
    let g2 = random_grid(rng, n2);
    let values: Vec<f64> = (0..n1 * n2).map(|_| rng.random_range(0.05..1.0)).collect();
    let k = KernelOperator::from_matrix(g1.clone(), g2.clone(), values).unwrap();
    let o1: Vec<f64> = (0..n1).map(|_| rng.random_range(0.1..1.0)).collect();
    let o2: Vec<f64> = (0..n2).map(|_| rng.random_range(0.1..1.0)).collect();
    let m = MarginalPair::new(DensityField::new(g1, o1).unwrap(), DensityField::new(g2, o2).unwrap()).unwrap();
    (k, m)
}

pub fn two_by_two() -> (KernelOperator, MarginalPair) {
    let g = QuadratureGrid::from_nodes(vec![0.0, 1.0], vec![1.0, 1.0]).unwrap();
    let k = KernelOperator::from_matrix(g.clone(), g.clone(), vec![1.0, 0.5, 0.5, 1.0]).unwrap();
    let m = MarginalPair::new(
        DensityField::new(g.clone(), vec![0.5, 0.5]).unwrap(),
        DensityField::new(g, vec![0.5, 0.5]).unwrap(),
    )
    .unwrap();
    (k, m)
}

/// Largest `|exp(d_i - c) - 1|` over the masked log differences, with `c`
/// the midpoint of their range (the best single scalar).
pub fn ray_deviation(a: &[f64], b: &[f64], mask: impl Fn(usize) -> bool) -> f64 {
    let d: Vec<f64> = (0..a.len()).filter(|&i| mask(i)).map(|i| a[i] - b[i]).collect();
    let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let c = 0.5 * (hi + lo);
    d.iter().map(|x| (x - c).exp_m1().abs()).fold(0.0, f64::max)
}
