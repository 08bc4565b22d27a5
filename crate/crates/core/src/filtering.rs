//! Exact subject likelihoods for linear Gaussian systems.
//!
//! `log p(Y | θ)` telescopes into one-step predictive densities
//! `log p(y_{k+1} | y_1..y_k, θ)`, each Gaussian with moments supplied by the
//! Kalman filter. Everything is accumulated in the log domain.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{NpagError, Result};
use crate::linalg::{all_finite_mat, all_finite_vec, symmetrize};
use crate::models::DiscreteLinearModel;

/// A bolus or input-level change at `time`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dose {
    pub time: f64,
    pub amount: f64,
}

/// One individual's observation record. Missing components are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub times: Vec<f64>,
    pub observations: Vec<Vec<Option<f64>>>,
    pub doses: Vec<Dose>,
}

impl Subject {
    pub fn new(id: impl Into<String>, times: Vec<f64>, observations: Vec<Vec<Option<f64>>>, doses: Vec<Dose>) -> Result<Self> {
        let id = id.into();
        let fail = |reason: String| NpagError::Subject { id: id.clone(), reason };
        if times.is_empty() {
            return Err(fail("needs at least one observation".into()));
        }
        if times.len() != observations.len() {
            return Err(fail(format!("{} times but {} observations", times.len(), observations.len())));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(fail("non-finite observation time".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(fail("observation times must be strictly increasing".into()));
        }
        if observations.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(fail("non-finite observation value".into()));
        }
        if doses.iter().any(|d| !d.time.is_finite() || !d.amount.is_finite()) {
            return Err(fail("non-finite dose record".into()));
        }
        Ok(Self { id, times, observations, doses })
    }

    /// Scalar observations, none missing, no dose records.
    pub fn scalar(id: impl Into<String>, times: Vec<f64>, values: &[f64]) -> Result<Self> {
        let obs = values.iter().map(|v| vec![Some(*v)]).collect();
        Self::new(id, times, obs, Vec::new())
    }

    pub fn num_observations(&self) -> usize {
        self.times.len()
    }
}

/// Filter mean, covariance and accumulated log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub log_likelihood: f64,
}

impl FilterState {
    pub fn initial(model: &DiscreteLinearModel) -> Self {
        Self { mean: model.x0.clone(), cov: model.sigma0.clone(), log_likelihood: 0.0 }
    }
}

/// One-step predictive moments of the state and the next observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub y_hat: DVector<f64>,
    pub s: DMatrix<f64>,
    pub x_pred: DVector<f64>,
    pub sigma_pred: DMatrix<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn predictive_moments(
    state: &FilterState,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    u: &DVector<f64>,
    w: &DMatrix<f64>,
    c: &DMatrix<f64>,
    v: &DMatrix<f64>,
) -> Result<Prediction> {
    let n = state.mean.len();
    if a.shape() != (n, n) || w.shape() != (n, n) || c.ncols() != n || b.shape() != (n, u.len()) {
        return Err(NpagError::Dimension("filter matrices do not match the state dimension".into()));
    }
    if v.shape() != (c.nrows(), c.nrows()) {
        return Err(NpagError::Dimension("measurement covariance does not match the observation matrix".into()));
    }
    if !(all_finite_vec(&state.mean) && all_finite_mat(&state.cov)) {
        return Err(NpagError::NonFinite("filter state"));
    }
    if !(all_finite_mat(a) && all_finite_mat(b) && all_finite_vec(u) && all_finite_mat(w) && all_finite_mat(c) && all_finite_mat(v)) {
        return Err(NpagError::NonFinite("filter matrices"));
    }

    let mut x_pred = a * &state.mean;
    if !u.is_empty() {
        x_pred += b * u;
    }
    let mut sigma_pred = w + a * &state.cov * a.transpose();
    symmetrize(&mut sigma_pred);
    let y_hat = c * &x_pred;
    let mut s = c * &sigma_pred * c.transpose() + v;
    symmetrize(&mut s);
    Ok(Prediction { y_hat, s, x_pred, sigma_pred })
}

/// Cholesky of `s`, retried once with `1e-10·trace(s)/p` added to the diagonal.
fn factor_innovation(s: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if let Some(chol) = Cholesky::new(s.clone()) {
        return Some(chol);
    }
    let p = s.nrows();
    let jitter = 1e-10 * s.trace() / p as f64;
    if !(jitter > 0.0) {
        return None;
    }
    let mut jittered = s.clone();
    for i in 0..p {
        jittered[(i, i)] += jitter;
    }
    Cholesky::new(jittered)
}

/// Measurement update. A singular innovation covariance yields a state whose
/// log-likelihood is −∞ rather than an error.
pub fn kalman_update(state: &FilterState, prediction: &Prediction, c: &DMatrix<f64>, y: &DVector<f64>) -> Result<FilterState> {
    let p = y.len();
    if prediction.y_hat.len() != p || c.nrows() != p {
        return Err(NpagError::Dimension("observation vector does not match the observation matrix".into()));
    }
    if !all_finite_vec(y) {
        return Err(NpagError::NonFinite("observation"));
    }
    let Some(chol) = factor_innovation(&prediction.s) else {
        return Ok(FilterState {
            mean: prediction.x_pred.clone(),
            cov: prediction.sigma_pred.clone(),
            log_likelihood: f64::NEG_INFINITY,
        });
    };

    let innovation = y - &prediction.y_hat;
    let l = chol.l();
    let whitened = l
        .solve_lower_triangular(&innovation)
        .expect("cholesky factor has a positive diagonal");
    let log_det: f64 = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let log_density = -0.5 * (p as f64 * (2.0 * PI).ln() + log_det + whitened.norm_squared());

    // F = Σ_pred Cᵀ S⁻¹, computed as (S⁻¹ C Σ_pred)ᵀ
    let gain = chol.solve(&(c * &prediction.sigma_pred)).transpose();
    let mean = &prediction.x_pred + &gain * innovation;
    let n = mean.len();
    let mut cov = (DMatrix::identity(n, n) - &gain * c) * &prediction.sigma_pred;
    symmetrize(&mut cov);

    Ok(FilterState { mean, cov, log_likelihood: state.log_likelihood + log_density })
}

/// `Σ_k log p(y_k | y_1..y_{k-1}, θ)` for one subject; may be −∞.
pub fn subject_log_likelihood(model: &DiscreteLinearModel, subject: &Subject) -> Result<f64> {
    if model.steps.len() != subject.num_observations() {
        return Err(NpagError::Dimension(format!(
            "model has {} steps but subject `{}` has {} observations",
            model.steps.len(),
            subject.id,
            subject.num_observations()
        )));
    }
    let mut state = FilterState::initial(model);
    for (step, obs) in model.steps.iter().zip(&subject.observations) {
        if obs.len() != step.c.nrows() {
            return Err(NpagError::Dimension(format!(
                "subject `{}` observation has {} components, model observes {}",
                subject.id,
                obs.len(),
                step.c.nrows()
            )));
        }
        let present: Vec<usize> = obs.iter().enumerate().filter_map(|(i, v)| v.map(|_| i)).collect();
        if present.len() == obs.len() {
            let y = DVector::from_iterator(obs.len(), obs.iter().map(|v| v.unwrap()));
            let pred = predictive_moments(&state, &step.a, &step.b, &step.u, &step.w, &step.c, &step.v)?;
            state = kalman_update(&state, &pred, &step.c, &y)?;
        } else {
            // drop the rows of C and V (and columns of V) for missing components
            let c = step.c.select_rows(present.iter());
            let v = step.v.select_rows(present.iter()).select_columns(present.iter());
            let pred = predictive_moments(&state, &step.a, &step.b, &step.u, &step.w, &c, &v)?;
            if present.is_empty() {
                state = FilterState { mean: pred.x_pred, cov: pred.sigma_pred, log_likelihood: state.log_likelihood };
            } else {
                let y = DVector::from_iterator(present.len(), present.iter().map(|&i| obs[i].unwrap()));
                state = kalman_update(&state, &pred, &c, &y)?;
            }
        }
        if state.log_likelihood == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
    }
    Ok(state.log_likelihood)
}
