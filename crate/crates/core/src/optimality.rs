//! Directional-derivative certificate for a fitted mixing distribution.
//!
//! `D(θ, F) = Σ_i p(Y_i|θ) / p(Y_i|F) − N` is non-positive everywhere and zero
//! on the support exactly when `F` maximizes the likelihood.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NpagError, Result};
use crate::filtering::Subject;
use crate::linalg::log_sum_exp;
use crate::models::{ParameterSpace, PopulationModel};
use crate::npag::DiscreteDistribution;
use crate::psi::log_likelihood_column;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalityReport {
    pub d_max: f64,
    pub argmax_theta: Vec<f64>,
    /// Lattice points plus support points checked.
    pub check_grid_size: usize,
    pub resolution: usize,
    pub support_d_values: Vec<f64>,
    /// `Σ_k w_k D(φ_k, F)`, identically zero for any F.
    pub weighted_support_d: f64,
    pub tolerance: f64,
    /// Pass threshold `tolerance · N`.
    pub threshold: f64,
    pub pass: bool,
}

/// Lattice points per axis used when none is configured.
pub fn default_resolution(dim: usize) -> usize {
    match dim {
        0..=2 => 100,
        3..=4 => 20,
        _ => 10,
    }
}

/// Closed lattice with `resolution` points per axis, endpoints included,
/// first axis varying slowest.
pub fn lattice(space: &ParameterSpace, resolution: usize) -> Vec<Vec<f64>> {
    let res = resolution.max(2);
    let d = space.dim();
    let total = res.pow(d as u32);
    (0..total)
        .map(|mut idx| {
            let mut point = vec![0.0; d];
            for k in (0..d).rev() {
                let j = idx % res;
                idx /= res;
                let axis = &space.axes()[k];
                point[k] = if j == res - 1 {
                    axis.upper
                } else {
                    axis.lower + (axis.upper - axis.lower) * j as f64 / (res - 1) as f64
                };
            }
            point
        })
        .collect()
}

/// `log p(Y_i | F)` per subject.
pub fn mixture_log_likelihoods(dist: &DiscreteDistribution, model: &PopulationModel, subjects: &[Subject]) -> Result<Vec<f64>> {
    let columns: Vec<Vec<f64>> = dist
        .support
        .par_iter()
        .map(|theta| log_likelihood_column(model, subjects, theta))
        .collect::<Result<_>>()?;
    let log_w: Vec<f64> = dist.weights.iter().map(|w| w.ln()).collect();
    subjects
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let terms: Vec<f64> = columns.iter().zip(&log_w).map(|(c, lw)| lw + c[i]).collect();
            let v = log_sum_exp(terms.iter().copied());
            if v == f64::NEG_INFINITY {
                Err(NpagError::ZeroMixtureLikelihood { id: s.id.clone() })
            } else {
                Ok(v)
            }
        })
        .collect()
}

fn d_from_logs(log_p_theta: &[f64], log_mix: &[f64]) -> f64 {
    let sum: f64 = log_p_theta.iter().zip(log_mix).map(|(lp, lm)| (lp - lm).exp()).sum();
    sum - log_mix.len() as f64
}

pub fn directional_derivative(
    theta: &[f64],
    dist: &DiscreteDistribution,
    model: &PopulationModel,
    subjects: &[Subject],
) -> Result<f64> {
    let log_mix = mixture_log_likelihoods(dist, model, subjects)?;
    let column = log_likelihood_column(model, subjects, theta)?;
    Ok(d_from_logs(&column, &log_mix))
}

/// `D(θ, F)` at every point, sharing the mixture likelihoods.
pub fn evaluate_d(
    points: &[Vec<f64>],
    dist: &DiscreteDistribution,
    model: &PopulationModel,
    subjects: &[Subject],
) -> Result<Vec<f64>> {
    let log_mix = mixture_log_likelihoods(dist, model, subjects)?;
    points
        .par_iter()
        .map(|theta| log_likelihood_column(model, subjects, theta).map(|c| d_from_logs(&c, &log_mix)))
        .collect()
}

pub fn verify_optimality(
    dist: &DiscreteDistribution,
    model: &PopulationModel,
    subjects: &[Subject],
    resolution: usize,
    tolerance: f64,
) -> Result<OptimalityReport> {
    verify_optimality_with_surface(dist, model, subjects, resolution, tolerance).map(|(report, _)| report)
}

/// Lattice points with their D values.
pub type Surface = Vec<(Vec<f64>, f64)>;

/// As [`verify_optimality`], also returning the lattice and its D values.
pub fn verify_optimality_with_surface(
    dist: &DiscreteDistribution,
    model: &PopulationModel,
    subjects: &[Subject],
    resolution: usize,
    tolerance: f64,
) -> Result<(OptimalityReport, Surface)> {
    if subjects.is_empty() {
        return Err(NpagError::Config("optimality check needs at least one subject".into()));
    }
    if resolution < 2 {
        return Err(NpagError::Config(format!("lattice resolution must be at least 2, got {resolution}")));
    }
    for theta in &dist.support {
        model.space().check(theta)?;
    }
    let grid = lattice(model.space(), resolution);
    let mut points = grid.clone();
    points.extend(dist.support.iter().cloned());
    let values = evaluate_d(&points, dist, model, subjects)?;

    let (argmax, d_max) = values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
    let support_d_values = values[grid.len()..].to_vec();
    let weighted_support_d = support_d_values.iter().zip(&dist.weights).map(|(d, w)| w * d).sum();
    let threshold = tolerance * subjects.len() as f64;
    let report = OptimalityReport {
        d_max,
        argmax_theta: points[argmax].clone(),
        check_grid_size: points.len(),
        resolution,
        support_d_values,
        weighted_support_d,
        tolerance,
        threshold,
        pass: d_max <= threshold,
    };
    let surface = grid.into_iter().zip(values).collect();
    Ok((report, surface))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_includes_corners() {
        let space = ParameterSpace::from_bounds(&[("a", 0.0, 1.0), ("b", -1.0, 1.0)]).unwrap();
        let g = lattice(&space, 3);
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], vec![0.0, -1.0]);
        assert_eq!(g[8], vec![1.0, 1.0]);
        assert_eq!(g[1], vec![0.0, 0.0]);
    }

    #[test]
    fn d_identity_from_logs() {
        let lp = [-1.0f64, -2.0];
        assert!(d_from_logs(&lp, &lp).abs() < 1e-15);
        assert!((d_from_logs(&[f64::NEG_INFINITY; 2], &lp) + 2.0).abs() < 1e-15);
    }

    #[test]
    fn default_resolutions() {
        assert_eq!(default_resolution(1), 100);
        assert_eq!(default_resolution(2), 100);
        assert_eq!(default_resolution(3), 20);
        assert_eq!(default_resolution(6), 10);
    }
}
