//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector};
use npag_core::filtering::Subject;
use npag_core::models::{DiscreteLinearModel, ModelSpec, ParameterSpace, PkSettings, PopulationModel};
use npag_core::psi::PsiMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const SAMPLE_TIMES: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

pub fn fitting_box() -> ParameterSpace {
    ParameterSpace::from_bounds(&[("K", 0.4, 2.0), ("Vol", 0.4, 2.0)]).unwrap()
}

pub fn pk_model(w_c: f64) -> PopulationModel {
    PopulationModel::new(ModelSpec::PkOneCompartment(PkSettings { w_c, ..PkSettings::default() }), fitting_box()).unwrap()
}

/// `Σ_k log N(y_k; (dose/Vol)·e^{−K t_k}, v)`.
pub fn regression_log_likelihood(k: f64, vol: f64, dose: f64, v: f64, times: &[f64], ys: &[f64]) -> f64 {
    times
        .iter()
        .zip(ys)
        .map(|(t, y)| {
            let mean = dose / vol * (-k * t).exp();
            -0.5 * ((2.0 * PI * v).ln() + (y - mean).powi(2) / v)
        })
        .sum()
}

pub fn gaussian_log_density(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = Cholesky::new(cov.clone()).expect("oracle covariance is positive definite");
    let l = chol.l();
    let z = l.solve_lower_triangular(&(y - mean)).unwrap();
    let log_det: f64 = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * (y.len() as f64 * (2.0 * PI).ln() + log_det + z.norm_squared())
}

/// Marginal log-density of all observations from the dense joint law of
/// states and observations, without any recursion over the filter.
pub fn joint_gaussian_log_likelihood(model: &DiscreteLinearModel, ys: &[DVector<f64>]) -> f64 {
    let n = model.state_dim();
    let m = model.steps.len();
    // every state deviation is L_k · ξ with ξ = (x0 deviation, w_1, ..., w_m)
    let nz = n * (m + 1);
    let mut noise_cov = DMatrix::zeros(nz, nz);
    noise_cov.view_mut((0, 0), (n, n)).copy_from(&model.sigma0);
    for (k, step) in model.steps.iter().enumerate() {
        noise_cov.view_mut((n * (k + 1), n * (k + 1)), (n, n)).copy_from(&step.w);
    }
    let mut prev_l = DMatrix::zeros(n, nz);
    prev_l.view_mut((0, 0), (n, n)).fill_with_identity();
    let mut prev_mean = model.x0.clone();
    let mut state_maps = Vec::with_capacity(m);
    let mut state_means = Vec::with_capacity(m);
    for (k, step) in model.steps.iter().enumerate() {
        let mut l = &step.a * &prev_l;
        for i in 0..n {
            l[(i, n * (k + 1) + i)] += 1.0;
        }
        let mut mean = &step.a * &prev_mean;
        if !step.u.is_empty() {
            mean += &step.b * &step.u;
        }
        state_maps.push(l.clone());
        state_means.push(mean.clone());
        prev_l = l;
        prev_mean = mean;
    }

    let p: Vec<usize> = model.steps.iter().map(|s| s.c.nrows()).collect();
    let total: usize = p.iter().sum();
    // joint of (X, Y): rows of the map from ξ and v to the stacked vector
    let nx = n * m;
    let mut map = DMatrix::zeros(nx + total, nz + total);
    let mut mean = DVector::zeros(nx + total);
    let mut v_cov = DMatrix::zeros(total, total);
    let mut offset = 0;
    for k in 0..m {
        map.view_mut((n * k, 0), (n, nz)).copy_from(&state_maps[k]);
        mean.rows_mut(n * k, n).copy_from(&state_means[k]);
        let c = &model.steps[k].c;
        map.view_mut((nx + offset, 0), (p[k], nz)).copy_from(&(c * &state_maps[k]));
        for i in 0..p[k] {
            map[(nx + offset + i, nz + offset + i)] = 1.0;
        }
        mean.rows_mut(nx + offset, p[k]).copy_from(&(c * &state_means[k]));
        v_cov.view_mut((offset, offset), (p[k], p[k])).copy_from(&model.steps[k].v);
        offset += p[k];
    }
    let mut source_cov = DMatrix::zeros(nz + total, nz + total);
    source_cov.view_mut((0, 0), (nz, nz)).copy_from(&noise_cov);
    source_cov.view_mut((nz, nz), (total, total)).copy_from(&v_cov);
    let joint = &map * source_cov * map.transpose();
    let y_cov = joint.view((nx, nx), (total, total)).into_owned();
    let y_mean = mean.rows(nx, total).into_owned();
    let y = DVector::from_iterator(total, ys.iter().flat_map(|v| v.iter().copied()));
    gaussian_log_density(&y, &y_mean, &y_cov)
}

/// Composite Simpson rule for a matrix-valued integrand on `[a, b]`.
pub fn simpson<F: Fn(f64) -> DMatrix<f64>>(f: F, a: f64, b: f64, intervals: usize) -> DMatrix<f64> {
    assert!(intervals.is_multiple_of(2));
    let h = (b - a) / intervals as f64;
    let mut acc = f(a) + f(b);
    for j in 1..intervals {
        let weight = if j % 2 == 1 { 4.0 } else { 2.0 };
        acc += f(a + h * j as f64) * weight;
    }
    acc * (h / 3.0)
}

/// Fixed-point EM iterations `w_k ← w_k · (1/N) Σ_i ψ_ik / (Ψw)_i` from uniform.
pub fn em_weights(psi: &PsiMatrix, iterations: usize) -> Vec<f64> {
    let n = psi.num_subjects() as f64;
    let k = psi.num_points();
    let mut w = DVector::from_element(k, 1.0 / k as f64);
    for _ in 0..iterations {
        let inv = (&psi.values * &w).map(|m| 1.0 / m);
        let scores = psi.values.tr_mul(&inv);
        w = w.component_mul(&scores) / n;
        let total = w.sum();
        w /= total;
    }
    w.iter().copied().collect()
}

/// Best `ℓ` over the simplex lattice with spacing `1/steps`, by enumeration.
pub fn simplex_grid_search(psi: &PsiMatrix, steps: usize) -> f64 {
    let k = psi.num_points();
    let n = psi.num_subjects();
    let cols: Vec<Vec<f64>> = (0..k).map(|j| psi.values.column(j).iter().copied().collect()).collect();
    // partial[j] holds Σ_{l<j} count_l · ψ_il for the counts chosen so far
    let mut partial = vec![vec![0.0; n]; k];
    let mut best = 0.0f64;
    enumerate(&cols, 0, steps, steps as f64, &mut partial, &mut best);
    best.ln() + psi.row_log_scale.iter().sum::<f64>()
}

fn enumerate(cols: &[Vec<f64>], j: usize, remaining: usize, total: f64, partial: &mut [Vec<f64>], best: &mut f64) {
    let k = cols.len();
    if j == k - 1 {
        let r = remaining as f64;
        // product of mixture values; ≤ 6 factors in [0.1, 1] cannot underflow
        let prod = partial[j].iter().zip(&cols[j]).fold(1.0, |acc, (p, c)| acc * (p + r * c) / total);
        *best = best.max(prod);
        return;
    }
    for count in 0..=remaining {
        let c = count as f64;
        let (head, tail) = partial.split_at_mut(j + 1);
        for ((next, cur), col) in tail[0].iter_mut().zip(&head[j]).zip(&cols[j]) {
            *next = cur + c * col;
        }
        enumerate(cols, j + 1, remaining - count, total, partial, best);
    }
}

pub fn random_psi(rng: &mut ChaCha8Rng, n: usize, k: usize, lo: f64) -> PsiMatrix {
    let raw: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| rng.random_range(lo..1.0f64).ln()).collect()).collect();
    let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
    let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    let grid = (0..k).map(|j| vec![j as f64]).collect();
    PsiMatrix::from_log_columns(grid, &raw, &refs).unwrap()
}

/// A subject observed at the standard sampling times with measurements drawn around a
/// random curve.
pub fn random_pk_subject(rng: &mut ChaCha8Rng, id: &str) -> Subject {
    let k = rng.random_range(0.4..2.0);
    let vol = rng.random_range(0.4..2.0);
    let ys: Vec<f64> = SAMPLE_TIMES
        .iter()
        .map(|t| 20.0 / vol * (-k * t).exp() + rng.random_range(-1.5..1.5))
        .collect();
    Subject::scalar(id, SAMPLE_TIMES.to_vec(), &ys).unwrap()
}

pub fn random_theta(rng: &mut ChaCha8Rng) -> Vec<f64> {
    vec![rng.random_range(0.4..=2.0), rng.random_range(0.4..=2.0)]
}
