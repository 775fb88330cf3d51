mod common;

use fortet_core::problem::{
    bernstein_gaussian_condition, bernstein_multivariate_condition, check_assumptions_h, condition_star,
    scan_monotone_tails, theorem2_applicability, CheckMethod, StarVerdict, Theorem2Status,
};
use fortet_core::{feasibility, DensityField, KernelOperator, MarginalPair, QuadratureGrid};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn item<'a>(checks: &'a [fortet_core::problem::HypothesisCheck], name: &str) -> &'a fortet_core::problem::HypothesisCheck {
    checks.iter().find(|c| c.item == name).unwrap()
}

#[test]
fn benchmark_passes_every_hypothesis() {
    let (_, k, m) = common::benchmark();
    let checks = check_assumptions_h(&k, &m).unwrap();
    assert_eq!(checks.len(), 8);
    for c in &checks {
        assert!(c.passed, "{} failed: {}", c.item, c.detail);
    }
    assert_eq!(item(&checks, "H.iv").method, CheckMethod::BestEffort);
    assert_eq!(item(&checks, "H.vi").method, CheckMethod::Surrogate);
    assert_eq!(item(&checks, "H.v").method, CheckMethod::Exact);
}

#[test]
fn zero_column_fails_column_surrogate() {
    let g = QuadratureGrid::from_nodes(vec![0.0, 1.0, 2.0], vec![1.0; 3]).unwrap();
    let k = KernelOperator::from_matrix(g.clone(), g.clone(), vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
    let u = DensityField::uniform(g.clone()).unwrap();
    let m = MarginalPair::new(u.clone(), u).unwrap();
    let checks = check_assumptions_h(&k, &m).unwrap();
    let c = item(&checks, "H.vii");
    assert!(!c.passed);
    assert_eq!(c.offending, vec![1]);
    assert!(item(&checks, "H.vi").passed);
}

#[test]
fn negative_marginal_entry_is_reported() {
    let g = QuadratureGrid::from_nodes(vec![0.0, 1.0, 2.0], vec![1.0; 3]).unwrap();
    let k = KernelOperator::from_matrix(g.clone(), g.clone(), vec![1.0; 9]).unwrap();
    let m = MarginalPair::new(
        DensityField::new(g.clone(), vec![0.5, -1e-3, 0.5]).unwrap(),
        DensityField::uniform(g).unwrap(),
    )
    .unwrap();
    let checks = check_assumptions_h(&k, &m).unwrap();
    let c = item(&checks, "H.ii");
    assert!(!c.passed);
    assert_eq!(c.offending, vec![1]);
    assert!(!feasibility(&k, &m).unwrap().hard_checks_pass());
}

#[test]
fn benchmark_condition_is_finite() {
    let (_, k, m) = common::benchmark();
    let r = feasibility(&k, &m).unwrap();
    assert_eq!(r.condition_star.verdict, StarVerdict::Finite);
    assert!(r.condition_star.estimate.is_finite() && r.condition_star.estimate > 0.0);
    assert!(!r.swap_recommended);
    assert!(r.passes());
}

#[test]
fn narrow_kernel_recommends_swap() {
    let (_, k, m) = common::gaussian(0.1, 0.5, 1.0, 8.0, 401);
    let r = feasibility(&k, &m).unwrap();
    assert_eq!(r.condition_star.verdict, StarVerdict::SuspectedDivergent);
    assert!(r.swap_recommended);
    assert_eq!(r.swapped_condition_star.as_ref().unwrap().verdict, StarVerdict::Finite);
    assert!(!r.passes());
}

#[test]
fn uniform_constant_problem_has_unit_estimate() {
    let g = common::line(1.0, 41);
    let k = KernelOperator::from_matrix(g.clone(), g.clone(), vec![1.0; 41 * 41]).unwrap();
    let u = DensityField::uniform(g).unwrap();
    let m = MarginalPair::new(u.clone(), u).unwrap();
    let c = condition_star(&k, &m).unwrap();
    assert!((c.estimate - 1.0).abs() <= 1e-9);
    assert_eq!(c.verdict, StarVerdict::Finite);
}

#[test]
fn vanishing_denominator_lists_nodes() {
    let g = QuadratureGrid::from_nodes(vec![0.0, 1.0], vec![1.0, 1.0]).unwrap();
    let k = KernelOperator::from_matrix(g.clone(), g.clone(), vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    let u = DensityField::uniform(g).unwrap();
    let m = MarginalPair::new(u.clone(), u).unwrap();
    let c = condition_star(&k, &m).unwrap();
    assert_eq!(c.verdict, StarVerdict::SuspectedDivergent);
    assert_eq!(c.zero_denominator_nodes, vec![1]);
}

#[test]
fn estimate_ignores_weight_scale() {
    let nodes: Vec<f64> = (0..30).map(|i| i as f64 * 0.2 - 3.0).collect();
    let base = |scale: f64| {
        let g = QuadratureGrid::from_nodes(nodes.clone(), vec![0.2 * scale; 30]).unwrap();
        let k = KernelOperator::gaussian(g.clone(), g.clone(), 0.7).unwrap();
        let m = MarginalPair::new(
            DensityField::gaussian(g.clone(), &[0.0], 1.0).unwrap(),
            DensityField::gaussian(g, &[0.0], 0.9).unwrap(),
        )
        .unwrap();
        condition_star(&k, &m).unwrap().estimate
    };
    let (a, b) = (base(1.0), base(3.0));
    assert!((a - b).abs() <= 1e-12 * a);
}

#[test]
fn renormalization_gives_unit_mass() {
    let g = common::line(4.0, 81);
    let m = MarginalPair::new(
        DensityField::new(g.clone(), (0..81).map(|i| 1.0 + i as f64).collect()).unwrap(),
        DensityField::gaussian(g, &[0.5], 0.7).unwrap(),
    )
    .unwrap();
    assert!((m.omega1().mass() - 1.0).abs() <= 1e-8);
    assert!((m.omega2().mass() - 1.0).abs() <= 1e-8);
}

#[test]
fn bernstein_scalar_examples() {
    assert!(bernstein_gaussian_condition(0.5, 1.0, 0.8).unwrap());
    assert!(!bernstein_gaussian_condition(0.1, 0.5, 1.0).unwrap());
    assert!(bernstein_gaussian_condition(0.1, 1.0, 0.5).unwrap());
    // sigma2^2 = sigma^2 + sigma1^2 with exactly representable squares.
    assert!(!bernstein_gaussian_condition(0.75, 1.0, 1.25).unwrap());
    assert!(bernstein_gaussian_condition(-1.0, 1.0, 1.0).is_err());
}

#[test]
fn bernstein_identity_matrices() {
    let i = DMatrix::<f64>::identity(2, 2);
    assert!(bernstein_multivariate_condition(&i, &i, &i).unwrap());
    let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
    assert!(bernstein_multivariate_condition(&bad, &i, &i).is_err());
    let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
    assert!(bernstein_multivariate_condition(&i, &indefinite, &i).is_err());
}

#[test]
fn heat_kernel_has_monotone_tails() {
    let (_, k, _) = common::benchmark();
    let t = theorem2_applicability(&k);
    assert_eq!(t.status, Theorem2Status::Pass);
    assert_eq!(t.condition, Some(1));
    assert!(t.t1.unwrap().abs() < 1e-9 && t.t2.unwrap().abs() < 1e-9);
}

#[test]
fn oscillating_table_fails_tail_scan() {
    let t: Vec<f64> = (0..2001).map(|k| -10.0 + k as f64 * 0.01).collect();
    let u: Vec<f64> = t.iter().map(|x| x.sin().powi(2) + 0.1).collect();
    assert_eq!(scan_monotone_tails(&t, &u).status, Theorem2Status::Fail);
    let g = common::line(5.0, 51);
    let k = KernelOperator::difference_table(g.clone(), g, t, u).unwrap();
    assert_eq!(theorem2_applicability(&k).status, Theorem2Status::Fail);
}

#[test]
fn cauchy_table_passes_tail_scan() {
    let t: Vec<f64> = (0..2001).map(|k| -10.0 + k as f64 * 0.01).collect();
    let u: Vec<f64> = t.iter().map(|x| 1.0 / (1.0 + x * x)).collect();
    let r = scan_monotone_tails(&t, &u);
    assert_eq!(r.status, Theorem2Status::Pass);
    assert_eq!(r.condition, Some(1));
}

#[test]
fn matrix_kernel_is_not_a_difference_kernel() {
    let (k, _) = common::two_by_two();
    assert_eq!(theorem2_applicability(&k).status, Theorem2Status::NotApplicable);
}

#[test]
fn transposed_difference_kernel_matches_matrix_transpose() {
    let t: Vec<f64> = (0..201).map(|k| -4.0 + k as f64 * 0.04).collect();
    let u: Vec<f64> = t.iter().map(|x| (-(x - 0.3) * (x - 0.3)).exp() + 0.01).collect();
    let g1 = common::line(1.0, 7);
    let g2 = common::line(1.5, 5);
    let k = KernelOperator::difference_table(g1, g2, t, u).unwrap();
    let kt = k.transposed();
    for i in 0..7 {
        for j in 0..5 {
            assert!((k.value(i, j) - kt.value(j, i)).abs() < 1e-15);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn scalar_and_one_by_one_forms_agree(s in 0.05f64..3.0, s1 in 0.05f64..3.0, s2 in 0.05f64..3.0) {
        let m = |v: f64| DMatrix::from_element(1, 1, v * v);
        prop_assert_eq!(
            bernstein_gaussian_condition(s, s1, s2).unwrap(),
            bernstein_multivariate_condition(&m(s), &m(s1), &m(s2)).unwrap()
        );
    }
}
