//! Primal-dual interior point solver for the mixture weights on a fixed grid.
//!
//! Maximizing `ℓ(w) = Σ_i log (Ψw)_i` over the simplex is solved through the
//! scale-free form
//!
//! ```text
//! minimize  1ᵀλ − Σ_i log (Ψλ)_i   subject to λ ≥ 0
//! ```
//!
//! whose minimizer has `1ᵀλ = N`, so `w = λ / N`. With dual variables
//! `u_i = 1/(Ψλ)_i` and slacks `y = 1 − Ψᵀu`, each Newton step on the perturbed
//! conditions `λ∘y = σμ`, `u∘Ψλ = 1` reduces to one N×N positive definite
//! system `(Ψ diag(λ/y) Ψᵀ + diag(Ψλ/u)) Δu = 1/u − Ψ(σμ/y − (λ/y)∘r)` with
//! `r = 1 − Ψᵀu − y` the dual residual.
//!
//! Termination is certified independently of the iteration: with
//! `g_k = (1/N)·Σ_i ψ_ik/(Ψw)_i − 1` the solver stops once `max_k g_k ≤ tol`
//! and the complementarity residual `max_k w_k·|g_k|` is at most `tol`. When
//! the Newton steps stall near the conditioning floor, EM sweeps
//! `w_k ← w_k·(1 + g_k)` finish from the best iterate.
//! By concavity `ℓ* − ℓ(w) ≤ N · max_k g_k`, which is reported as the gap.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{NpagError, Result};
use crate::linalg::all_finite_vec;
use crate::psi::PsiMatrix;

/// Iterations without progress, once μ is below the tolerance, before
/// switching to EM polishing.
const STALL_ITERATIONS: usize = 8;
const POLISH_ROUNDS: usize = 20;
const EM_SWEEPS: usize = 20;
const EXCHANGE_STEPS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpmOptions {
    pub tol: f64,
    pub max_iterations: usize,
    /// Centering factor applied to μ on every Newton step.
    pub sigma: f64,
    /// Fraction-to-boundary factor.
    pub step_fraction: f64,
}

impl Default for IpmOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iterations: 200, sigma: 0.1, step_fraction: 0.995 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSolution {
    pub weights: Vec<f64>,
    /// Unscaled `ℓ(w)`, row scales included.
    pub log_likelihood: f64,
    /// Certified bound `N · kkt_residual` on `ℓ* − ℓ(w)`.
    pub duality_gap: f64,
    /// `max_k g_k`, i.e. `max_k D(φ_k, F) / N` on the grid.
    pub kkt_residual: f64,
    /// Complementarity residual `max_k w_k·|g_k|`.
    pub support_residual: f64,
    pub iterations: usize,
    /// Barrier parameter μ after each iteration.
    pub mu_history: Vec<f64>,
}

/// Per-point optimality quantities `g_k = (1/N)·Σ_i ψ_ik/(Ψw)_i − 1`.
pub fn gradient_ratios(psi: &PsiMatrix, weights: &[f64]) -> Vec<f64> {
    let n = psi.num_subjects();
    let w = DVector::from_column_slice(weights);
    let mix = &psi.values * &w;
    let inv = mix.map(|m| 1.0 / m);
    let scores = psi.values.tr_mul(&inv);
    scores.iter().map(|s| s / n as f64 - 1.0).collect()
}

/// `(max_k g_k, max_k w_k·|g_k|)`
pub fn kkt_residuals(psi: &PsiMatrix, weights: &[f64]) -> (f64, f64) {
    let g = gradient_ratios(psi, weights);
    let kkt = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(0.0);
    let support = g.iter().zip(weights).map(|(g, w)| (w * g).abs()).fold(0.0, f64::max);
    (kkt, support)
}

pub fn solve_weights(psi: &PsiMatrix, tol: f64) -> Result<WeightSolution> {
    solve_weights_with(psi, &IpmOptions { tol, ..IpmOptions::default() })
}

fn max_step(x: &DVector<f64>, dx: &DVector<f64>) -> f64 {
    x.iter()
        .zip(dx.iter())
        .filter(|(_, d)| **d < 0.0)
        .map(|(v, d)| -v / d)
        .fold(f64::INFINITY, f64::min)
}

fn factor_with_jitter(mut h: DMatrix<f64>) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    if h.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let scale = h.diagonal().max().max(f64::MIN_POSITIVE);
    let mut added = 0.0;
    let mut jitter = 1e-14 * scale;
    loop {
        if let Some(chol) = Cholesky::new(h.clone()) {
            return Some(chol);
        }
        if jitter > 1e-4 * scale {
            return None;
        }
        for i in 0..h.nrows() {
            h[(i, i)] += jitter - added;
        }
        added = jitter;
        jitter *= 100.0;
    }
}

pub fn solve_weights_with(psi: &PsiMatrix, opts: &IpmOptions) -> Result<WeightSolution> {
    if !(opts.tol > 0.0) {
        return Err(NpagError::Solver(format!("a positive tolerance, got {}", opts.tol)));
    }
    if !(opts.sigma > 0.0 && opts.sigma < 1.0) || !(opts.step_fraction > 0.0 && opts.step_fraction < 1.0) {
        return Err(NpagError::Solver("sigma and step_fraction in (0, 1)".into()));
    }
    let n = psi.num_subjects();
    let k = psi.num_points();
    if n == 0 || k == 0 {
        return Err(NpagError::Solver("a nonempty Ψ".into()));
    }
    if psi.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(NpagError::Solver("finite non-negative Ψ entries".into()));
    }
    if let Some(i) = (0..n).find(|&i| psi.values.row(i).iter().all(|v| *v == 0.0)) {
        return Err(NpagError::Solver(format!("no all-zero rows, row {i} is zero (degenerate subject)")));
    }

    let a = &psi.values;
    let ones_k = DVector::from_element(k, 1.0);

    let mut lam = ones_k.clone();
    let mut plam = a * &lam;
    let mut u = plam.map(|v| 1.0 / v);
    let shrink = 2.0 * a.tr_mul(&u).max();
    lam *= shrink;
    plam *= shrink;
    u /= shrink;
    let mut y = &ones_k - a.tr_mul(&u);

    let passes = |s: &WeightSolution| s.kkt_residual <= opts.tol && s.support_residual <= opts.tol;
    let score = |s: &WeightSolution| s.kkt_residual.max(s.support_residual);
    let finish = |weights: Vec<f64>, iterations: usize, mu_history: &[f64]| -> WeightSolution {
        let (kkt, support) = kkt_residuals(psi, &weights);
        WeightSolution {
            log_likelihood: psi.log_likelihood(&weights),
            duality_gap: n as f64 * kkt,
            kkt_residual: kkt,
            support_residual: support,
            weights,
            iterations,
            mu_history: mu_history.to_vec(),
        }
    };

    let mut mu_history = Vec::new();
    let mut best: Option<WeightSolution> = None;
    // raw iterate with the smallest max g_k, and when it was seen
    let mut best_raw: Option<(WeightSolution, usize)> = None;
    let mut broke_early = false;
    for iteration in 0..opts.max_iterations {
        if !all_finite_vec(&lam) || !all_finite_vec(&u) || !all_finite_vec(&y) {
            broke_early = true;
            break;
        }
        let total = lam.sum();
        let raw: Vec<f64> = lam.iter().map(|l| l / total).collect();
        let raw = finish(raw, iteration, &mu_history);
        if best_raw.as_ref().is_none_or(|(b, _)| raw.kkt_residual < b.kkt_residual) {
            best_raw = Some((raw.clone(), iteration));
        }
        if best.as_ref().is_none_or(|b| score(&raw) < score(b)) {
            best = Some(raw);
        }
        let best_solution = best.as_ref().expect("set above");
        if passes(best_solution) {
            return Ok(best_solution.clone());
        }
        let mu = lam.dot(&y) / k as f64;
        let stalled_since = best_raw.as_ref().map_or(0, |(_, it)| *it);
        if mu < opts.tol && iteration - stalled_since >= STALL_ITERATIONS {
            broke_early = true;
            break;
        }

        let target = opts.sigma * mu;
        let inner = lam.component_div(&y);
        let mut scaled = a.clone();
        for (mut col, d) in scaled.column_iter_mut().zip(inner.iter()) {
            col *= d.sqrt();
        }
        let mut h = &scaled * scaled.transpose();
        for i in 0..n {
            h[(i, i)] += plam[i] / u[i];
        }
        let Some(chol) = factor_with_jitter(h) else {
            broke_early = true;
            break;
        };
        // dual residual, nonzero only through rounding in the slack updates
        let r_dual = &ones_k - a.tr_mul(&u) - &y;
        let rhs = u.map(|v| 1.0 / v) - a * (y.map(|v| target / v) - inner.component_mul(&r_dual));
        let du = chol.solve(&rhs);
        let dy = &r_dual - a.tr_mul(&du);
        let dlam = y.map(|v| target / v) - &lam - inner.component_mul(&dy);

        let alpha_primal = (opts.step_fraction * max_step(&lam, &dlam)).min(1.0);
        let alpha_dual = (opts.step_fraction * max_step(&u, &du).min(max_step(&y, &dy))).min(1.0);
        lam += alpha_primal * dlam;
        u += alpha_dual * du;
        y += alpha_dual * dy;
        plam = a * &lam;
        mu_history.push(lam.dot(&y) / k as f64);
    }

    // Newton directions lose accuracy once μ approaches the conditioning
    // floor of the system; finish from the best iterate with EM sweeps.
    let iterations = mu_history.len();
    let mut best = best.unwrap_or_else(|| finish(vec![1.0 / k as f64; k], 0, &mu_history));
    if !broke_early {
        best.iterations = iterations;
        return Err(NpagError::IterationLimit { best: Box::new(best) });
    }
    let mut weights = match best_raw {
        Some((b, _)) => b.weights,
        None => best.weights.clone(),
    };
    for _ in 0..POLISH_ROUNDS {
        for _ in 0..EM_SWEEPS {
            let g = gradient_ratios(psi, &weights);
            for (w, g) in weights.iter_mut().zip(&g) {
                *w *= 1.0 + g;
            }
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
        }
        for _ in 0..EXCHANGE_STEPS {
            if !vertex_exchange(psi, &mut weights, opts.tol) {
                break;
            }
        }
        let polished = finish(weights.clone(), iterations, &mu_history);
        if score(&polished) < score(&best) && polished.log_likelihood >= best.log_likelihood - opts.tol {
            best = polished;
        }
        if passes(&best) {
            return Ok(best);
        }
    }
    best.iterations = iterations;
    Err(NpagError::IterationLimit { best: Box::new(best) })
}

/// Moves mass from the supported point with the smallest `g_k` to the point
/// with the largest, with a Newton step on the amount moved. Returns false
/// once the pair's gap is within the tolerance.
fn vertex_exchange(psi: &PsiMatrix, weights: &mut [f64], tol: f64) -> bool {
    let g = gradient_ratios(psi, weights);
    let Some(best) = (0..g.len()).max_by(|&a, &b| g[a].total_cmp(&g[b])) else {
        return false;
    };
    let Some(worst) = (0..g.len())
        .filter(|&k| weights[k] > 0.0 && k != best)
        .min_by(|&a, &b| g[a].total_cmp(&g[b]))
    else {
        return false;
    };
    let gap = g[best] - g[worst];
    if gap <= tol && g[best] <= tol && (weights[worst] * g[worst]).abs() <= tol {
        return false;
    }
    let a = &psi.values;
    let w = nalgebra::DVector::from_column_slice(weights);
    let mix = a * &w;
    let (mut d1, mut d2) = (0.0, 0.0);
    for i in 0..a.nrows() {
        let r = (a[(i, best)] - a[(i, worst)]) / mix[i];
        d1 += r;
        d2 += r * r;
    }
    if !(d1 > 0.0 && d2 > 0.0) {
        return false;
    }
    let delta = (d1 / d2).min(weights[worst]);
    weights[worst] -= delta;
    weights[best] += delta;
    true
}
