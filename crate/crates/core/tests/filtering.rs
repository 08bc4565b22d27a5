mod common;

use nalgebra::DVector;
use npag_core::filtering::{kalman_update, predictive_moments, subject_log_likelihood, FilterState, Subject};
use npag_core::linalg::is_symmetric_psd;
use npag_core::models::{
    pk_one_compartment, AffineMatrix, LinearModelSpec, ModelSpec, ParameterSpace, PkSettings, PopulationModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn zero_noise_equals_regression_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..100 {
        let s = common::random_pk_subject(&mut rng, &format!("s{i}"));
        let (k, vol) = (rng.random_range(0.4..2.0), rng.random_range(0.4..2.0));
        let m = pk_one_compartment(k, vol, 20.0, &s.times, &PkSettings::default()).unwrap();
        let ys: Vec<f64> = s.observations.iter().map(|o| o[0].unwrap()).collect();
        let expected = common::regression_log_likelihood(k, vol, 20.0, 0.25, &s.times, &ys);
        assert!((subject_log_likelihood(&m, &s).unwrap() - expected).abs() < 1e-10);
    }
}

#[test]
fn pk_model_matches_joint_gaussian() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (i, w_c) in [1.0, 1.0, 7.0, 7.0].iter().cycle().take(20).enumerate() {
        let s = common::random_pk_subject(&mut rng, &format!("s{i}"));
        let settings = PkSettings { w_c: *w_c, sigma0: rng.random_range(0.0..0.5), ..PkSettings::default() };
        let (k, vol) = (rng.random_range(0.4..2.0), rng.random_range(0.4..2.0));
        let m = pk_one_compartment(k, vol, 20.0, &s.times, &settings).unwrap();
        let ys: Vec<DVector<f64>> = s.observations.iter().map(|o| DVector::from_element(1, o[0].unwrap())).collect();
        let oracle = common::joint_gaussian_log_likelihood(&m, &ys);
        assert!((subject_log_likelihood(&m, &s).unwrap() - oracle).abs() < 1e-9);
    }
}

fn two_state_model() -> PopulationModel {
    let space = ParameterSpace::from_bounds(&[("k1", 0.1, 2.0), ("k2", 0.1, 2.0)]).unwrap();
    let mut theta = std::collections::BTreeMap::new();
    theta.insert("k1".to_string(), vec![vec![-1.0, 0.0], vec![1.0, 0.0]]);
    theta.insert("k2".to_string(), vec![vec![0.0, 0.0], vec![0.0, -1.0]]);
    let spec = LinearModelSpec {
        a: AffineMatrix { base: vec![vec![0.0, 0.0], vec![0.0, 0.0]], theta },
        b: None,
        c: AffineMatrix::constant(vec![vec![1.0, 0.0], vec![0.0, 1.0]]),
        w: AffineMatrix::constant(vec![vec![0.3, 0.1], vec![0.1, 0.2]]),
        v: AffineMatrix::constant(vec![vec![0.1, 0.0], vec![0.0, 0.2]]),
        x0: AffineMatrix::constant(vec![vec![5.0], vec![0.0]]),
        sigma0: Some(AffineMatrix::constant(vec![vec![0.2, 0.0], vec![0.0, 0.1]])),
    };
    PopulationModel::new(ModelSpec::Linear(spec), space).unwrap()
}

#[test]
fn two_dimensional_system_matches_joint_gaussian() {
    let model = two_state_model();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let times = vec![0.3, 0.7, 1.2, 2.0];
        let obs: Vec<Vec<Option<f64>>> =
            times.iter().map(|_| vec![Some(rng.random_range(0.0..5.0)), Some(rng.random_range(0.0..3.0))]).collect();
        let s = Subject::new("v", times, obs.clone(), Vec::new()).unwrap();
        let theta = [rng.random_range(0.1..2.0), rng.random_range(0.1..2.0)];
        let m = model.instantiate(&theta, &s).unwrap();
        let ys: Vec<DVector<f64>> = obs.iter().map(|o| DVector::from_iterator(2, o.iter().map(|v| v.unwrap()))).collect();
        let oracle = common::joint_gaussian_log_likelihood(&m, &ys);
        assert!((subject_log_likelihood(&m, &s).unwrap() - oracle).abs() < 1e-9);
    }
}

#[test]
fn single_observation_density_integrates_to_one() {
    let settings = PkSettings { w_c: 1.0, sigma0: 0.3, ..PkSettings::default() };
    let m = pk_one_compartment(1.0, 1.0, 20.0, &[0.5], &settings).unwrap();
    let (lo, hi, n) = (0.0, 25.0, 20_000);
    let h = (hi - lo) / n as f64;
    let area: f64 = (0..=n)
        .map(|j| {
            let y = lo + h * j as f64;
            let s = Subject::scalar("q", vec![0.5], &[y]).unwrap();
            let f = subject_log_likelihood(&m, &s).unwrap().exp();
            let weight = if j == 0 || j == n { 0.5 } else { 1.0 };
            weight * f
        })
        .sum::<f64>()
        * h;
    assert!((area - 1.0).abs() < 1e-4, "{area}");
}

#[test]
fn posterior_variance_shrinks_without_process_noise() {
    let settings = PkSettings { sigma0: 4.0, ..PkSettings::default() };
    let times = [0.2, 0.4, 0.6, 0.8, 1.0];
    let m = pk_one_compartment(0.8, 1.0, 20.0, &times, &settings).unwrap();
    let mut state = FilterState::initial(&m);
    let mut prev = f64::INFINITY;
    for (step, t) in m.steps.iter().zip(times) {
        let pred = predictive_moments(&state, &step.a, &step.b, &step.u, &step.w, &step.c, &step.v).unwrap();
        let y = DVector::from_element(1, 20.0 * (-0.8 * t).exp());
        state = kalman_update(&state, &pred, &step.c, &y).unwrap();
        assert!(is_symmetric_psd(&state.cov, 1e-9));
        // W = 0 and |A| < 1, so prediction never inflates the variance
        assert!(state.cov[(0, 0)] <= prev + 1e-15);
        prev = state.cov[(0, 0)];
    }
}

#[test]
fn missing_component_drops_its_row() {
    let model = two_state_model();
    let times = vec![0.3, 0.7, 1.2];
    let full: Vec<Vec<Option<f64>>> = vec![vec![Some(4.0), Some(0.5)], vec![Some(3.1), Some(1.0)], vec![Some(2.2), Some(1.1)]];
    let mut partial = full.clone();
    partial[1][0] = None;
    let s = Subject::new("p", times.clone(), partial, Vec::new()).unwrap();
    let mut m = model.instantiate(&[0.8, 0.5], &s).unwrap();
    // oracle: the same system with the unobserved row removed from C and V
    m.steps[1].c = m.steps[1].c.rows(1, 1).into_owned();
    m.steps[1].v = m.steps[1].v.view((1, 1), (1, 1)).into_owned();
    let ys = vec![
        DVector::from_vec(vec![4.0, 0.5]),
        DVector::from_element(1, 1.0),
        DVector::from_vec(vec![2.2, 1.1]),
    ];
    let oracle = common::joint_gaussian_log_likelihood(&m, &ys);
    let m_full = model.instantiate(&[0.8, 0.5], &s).unwrap();
    assert!((subject_log_likelihood(&m_full, &s).unwrap() - oracle).abs() < 1e-10);
}
