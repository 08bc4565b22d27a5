mod common;

use nalgebra::DMatrix;
use npag_core::linalg::is_symmetric_psd;
use npag_core::models::{discretize_lti, pk_one_compartment, pk_process_variance, ParameterSpace, PkSettings};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A 2×2 matrix whose eigenvalues have negative real parts.
fn random_stable(rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
    let shift = m.complex_eigenvalues().iter().map(|e| e.re).fold(f64::NEG_INFINITY, f64::max);
    m - DMatrix::identity(2, 2) * (shift + rng.random_range(0.1..1.0))
}

fn random_psd(rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
    &g * g.transpose()
}

#[test]
fn w_d_matches_simpson_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let a = random_stable(&mut rng);
        let w = random_psd(&mut rng);
        let b = DMatrix::from_fn(2, 1, |_, _| rng.random_range(-1.0..1.0));
        let dt = 0.1;
        let d = discretize_lti(&a, &b, &w, dt).unwrap();
        let w_ref = common::simpson(|s| (&a * s).exp() * &w * (a.transpose() * s).exp(), 0.0, dt, 10_000);
        let b_ref = common::simpson(|s| (&a * s).exp() * &b, 0.0, dt, 10_000);
        assert!((&d.w_d - &w_ref).amax() < 1e-8, "{} vs {}", d.w_d, w_ref);
        assert!((&d.b_d - &b_ref).amax() < 1e-8);
        assert!((&d.a_d - (&a * dt).exp()).amax() < 1e-14);
    }
}

#[test]
fn scalar_example_closed_form() {
    let d = discretize_lti(&DMatrix::from_element(1, 1, -0.5), &DMatrix::zeros(1, 0), &DMatrix::from_element(1, 1, 1.0), 0.2)
        .unwrap();
    assert!((d.a_d[(0, 0)] - (-0.1f64).exp()).abs() < 1e-15);
    assert!((d.w_d[(0, 0)] - (1.0 - (-0.2f64).exp())).abs() < 1e-14);
}

#[test]
fn pk_closed_form_over_k_range() {
    for j in 0..=160 {
        let k = 0.4 + 0.01 * j as f64;
        let d = discretize_lti(&DMatrix::from_element(1, 1, -k), &DMatrix::zeros(1, 0), &DMatrix::from_element(1, 1, 7.0), 0.2)
            .unwrap();
        let closed = 7.0 / (2.0 * k) * (1.0 - (-2.0 * k * 0.2).exp());
        assert!((d.w_d[(0, 0)] - closed).abs() < 1e-12, "K={k}");
        assert!((pk_process_variance(k, 7.0, 0.2) - closed).abs() < 1e-13);
    }
}

#[test]
fn pk_subject_layout() {
    let m = pk_one_compartment(1.0, 1.0, 20.0, &common::SAMPLE_TIMES, &PkSettings::default()).unwrap();
    assert_eq!(m.x0[0], 20.0);
    assert_eq!(m.steps.len(), 5);
    for step in &m.steps {
        assert!((step.a[(0, 0)] - (-0.2f64).exp()).abs() < 1e-15);
        assert_eq!(step.w[(0, 0)], 0.0);
    }
}

#[test]
fn box_is_closed() {
    let space = ParameterSpace::from_bounds(&[("K", 0.4, 2.0), ("Vol", 0.4, 2.0)]).unwrap();
    assert!(space.check(&[0.4, 2.0]).is_ok());
    assert!(space.check(&[0.39, 1.0]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn semigroup_composition(seed in any::<u64>(), dt1 in 0.01f64..1.0, dt2 in 0.01f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_stable(&mut rng);
        let w = random_psd(&mut rng);
        let b = DMatrix::zeros(2, 0);
        let d1 = discretize_lti(&a, &b, &w, dt1).unwrap();
        let d2 = discretize_lti(&a, &b, &w, dt2).unwrap();
        let d12 = discretize_lti(&a, &b, &w, dt1 + dt2).unwrap();
        prop_assert!((&d12.a_d - &d2.a_d * &d1.a_d).amax() < 1e-10);
        let composed = &d2.a_d * &d1.w_d * d2.a_d.transpose() + &d2.w_d;
        prop_assert!((&d12.w_d - composed).amax() < 1e-10);
        prop_assert!(is_symmetric_psd(&d12.w_d, 1e-10));
    }

    #[test]
    fn pk_process_variance_is_psd_and_bounded(k in 0.4f64..2.0, w_c in 0.0f64..10.0, dt in 1e-3f64..2.0) {
        let q = pk_process_variance(k, w_c, dt);
        prop_assert!(q >= 0.0);
        prop_assert!(q <= w_c * dt + 1e-15);
    }
}
