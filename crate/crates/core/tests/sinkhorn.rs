mod common;

use fortet_core::fortet::UniquenessOptions;
use fortet_core::sinkhorn::run_sinkhorn_traced;
use fortet_core::{
    birkhoff_contraction, build_coupling, run_fortet, run_sinkhorn, sinkhorn_trace_hilbert, verify_uniqueness,
    DensityField, Error, FortetOptions, KernelOperator, MarginalPair, QuadratureGrid, SinkhornOptions,
};
use rand::Rng;

fn tight() -> SinkhornOptions {
    SinkhornOptions {
        tol: 1e-14,
        ..Default::default()
    }
}

#[test]
fn pushforward_gives_constant_v() {
    let g = QuadratureGrid::from_nodes((0..12).map(|i| i as f64).collect(), vec![1.0; 12]).unwrap();
    let k = KernelOperator::gaussian(g.clone(), g.clone(), 2.0).unwrap().normalize_rows().unwrap();
    let m = MarginalPair::pushforward(&k, DensityField::gaussian(g, &[5.0], 2.5).unwrap()).unwrap();
    let s = run_sinkhorn(&k, &m, &tight()).unwrap();
    let v = s.v();
    assert!(v.iter().all(|x| (x / v[0] - 1.0).abs() < 1e-10));
    let u = s.u();
    assert_eq!(u.iter().cloned().fold(0.0, f64::max), 1.0);
}

#[test]
fn two_by_two_coupling_rows() {
    let (k, m) = common::two_by_two();
    let s = run_sinkhorn(&k, &m, &tight()).unwrap();
    let pi = build_coupling(&s.potentials(), &k, &m).unwrap();
    assert!(pi.row_marginal_resid <= 1e-14);
    assert!(pi.col_marginal_resid <= 1e-14);
}

#[test]
fn benchmark_agrees_with_fortet() {
    let (_, k, m) = common::benchmark();
    let s = run_sinkhorn(&k, &m, &SinkhornOptions::default()).unwrap();
    let f = run_fortet(&k, &m, &FortetOptions::default()).unwrap();
    let r = verify_uniqueness(&f.potentials.unwrap(), &s.potentials(), &m, &UniquenessOptions::default());
    assert!(r.ratio_spread_phi < 1e-8 && r.ratio_spread_psi < 1e-8, "{r:?}");
}

#[test]
fn rank_one_kernel_settles_immediately() {
    let g = QuadratureGrid::from_nodes(vec![0.0, 1.0, 2.0], vec![1.0; 3]).unwrap();
    let k = KernelOperator::from_matrix(g.clone(), g.clone(), vec![1.0; 9]).unwrap();
    let m = MarginalPair::new(
        DensityField::new(g.clone(), vec![0.2, 0.3, 0.5]).unwrap(),
        DensityField::new(g, vec![0.6, 0.3, 0.1]).unwrap(),
    )
    .unwrap();
    let steps = sinkhorn_trace_hilbert(&k, &m, &SinkhornOptions::default()).unwrap();
    assert!(!steps.is_empty());
    assert!(steps.iter().all(|&d| d <= 4.0 * f64::EPSILON), "{steps:?}");
}

#[test]
fn steps_contract_at_least_at_birkhoff_rate() {
    for seed in 0..10 {
        let mut rng = common::rng(100 + seed);
        let (k, m) = common::random_instance(&mut rng, 10, 10);
        let bound = birkhoff_contraction(k.values(), 10, 10).unwrap().ratio;
        let steps = sinkhorn_trace_hilbert(&k, &m, &tight()).unwrap();
        for w in steps.windows(2) {
            // Below this the distances are rounding noise.
            if w[0] < 1e-9 {
                break;
            }
            assert!(w[1] / w[0] <= bound + 1e-9, "seed {seed}: {} > {bound}", w[1] / w[0]);
        }
    }
}

#[test]
fn benchmark_decays_geometrically() {
    let (_, k, m) = common::benchmark();
    let steps = sinkhorn_trace_hilbert(&k, &m, &SinkhornOptions::default()).unwrap();
    let pts: Vec<(f64, f64)> = steps
        .iter()
        .enumerate()
        .filter(|(_, &d)| d > 1e-9)
        .map(|(k, d)| (k as f64, d.ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    assert!(slope.exp() < 1.0);
}

#[test]
fn couplings_reproduce_marginals() {
    let mut rng = common::rng(5);
    for _ in 0..5 {
        let (n1, n2) = (rng.random_range(3..15), rng.random_range(3..15));
        let (k, m) = common::random_instance(&mut rng, n1, n2);
        let opts = SinkhornOptions { tol: 1e-12, ..Default::default() };
        let s = run_sinkhorn(&k, &m, &opts).unwrap();
        let pi = build_coupling(&s.potentials(), &k, &m).unwrap();
        assert!(pi.row_marginal_resid <= 10.0 * opts.tol && pi.col_marginal_resid <= 10.0 * opts.tol);
    }
}

#[test]
fn trace_rows_are_complete() {
    let (k, m) = common::two_by_two();
    let run = run_sinkhorn_traced(&k, &m, &SinkhornOptions::default()).unwrap();
    assert_eq!(run.trace.len(), run.pair.iterations);
    assert!(run.trace[0].sup_change.is_infinite());
    assert!(run.trace.iter().all(|r| !r.case1_candidate));
}

#[test]
fn zero_product_is_a_hard_error() {
    let g = QuadratureGrid::from_nodes(vec![0.0, 1.0], vec![1.0, 1.0]).unwrap();
    let k = KernelOperator::from_matrix(g.clone(), g.clone(), vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    let u = DensityField::uniform(g).unwrap();
    let m = MarginalPair::new(u.clone(), u).unwrap();
    assert!(run_sinkhorn(&k, &m, &SinkhornOptions::default()).is_err());
}

#[test]
fn iteration_cap() {
    let (_, k, m) = common::benchmark();
    let r = run_sinkhorn(&k, &m, &SinkhornOptions { max_iter: 2, ..Default::default() });
    assert!(matches!(r, Err(Error::NotConverged { iterations: 2, .. })));
}
