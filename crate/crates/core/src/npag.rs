//! Nonparametric adaptive grid (NPAG) driver.
//!
//! Each cycle builds Ψ on the current grid, solves for the optimal weights,
//! prunes low-probability points and expands a cross of `2·d` candidates around
//! every survivor at distance `ε·(b_k − a_k)` per axis. ε halves whenever a
//! cycle improves the log-likelihood by less than `loglik_tol`; the run stops
//! once ε has dropped below `eps_min` and the improvement is still below
//! `loglik_tol`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{NpagError, Result};
use crate::filtering::Subject;
use crate::ipm::{solve_weights, WeightSolution};
use crate::models::{ParameterSpace, PopulationModel};
use crate::optimality::{default_resolution, verify_optimality, OptimalityReport};
use crate::psi::{PsiCache, PsiMatrix};

/// Support points with weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution {
    pub support: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(support: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if support.is_empty() || support.len() != weights.len() {
            return Err(NpagError::Dimension(format!(
                "distribution needs matching nonempty support ({}) and weights ({})",
                support.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(NpagError::Model("weights must be finite and non-negative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-10 {
            return Err(NpagError::Model(format!("weights sum to {sum}, expected 1")));
        }
        Ok(Self { support, weights })
    }

    pub fn point_mass(theta: Vec<f64>) -> Self {
        Self { support: vec![theta], weights: vec![1.0] }
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NpagConfig {
    /// Defaults to `50·N`, capped at 10⁴.
    pub initial_grid_size: Option<usize>,
    pub eps_initial: f64,
    pub eps_min: f64,
    pub prune_threshold: f64,
    pub loglik_tol: f64,
    pub max_cycles: usize,
    pub rng_seed: u64,
    pub ipm_tol: f64,
    /// Lattice points per axis for the final optimality check.
    pub check_resolution: Option<usize>,
    /// Certificate passes when `max D ≤ check_tolerance · N`.
    pub check_tolerance: f64,
}

impl Default for NpagConfig {
    fn default() -> Self {
        Self {
            initial_grid_size: None,
            eps_initial: 0.2,
            eps_min: 1e-3,
            prune_threshold: 1e-3,
            loglik_tol: 1e-4,
            max_cycles: 1000,
            rng_seed: 0,
            ipm_tol: 1e-10,
            check_resolution: None,
            check_tolerance: 1e-3,
        }
    }
}

impl NpagConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(NpagError::Config(msg));
        if !(self.eps_min > 0.0 && self.eps_min < self.eps_initial && self.eps_initial <= 0.5) {
            return bad(format!(
                "npag needs 0 < eps_min < eps_initial ≤ 0.5, got eps_min={} eps_initial={}",
                self.eps_min, self.eps_initial
            ));
        }
        if !(self.prune_threshold > 0.0 && self.prune_threshold < 1.0) {
            return bad(format!("npag.prune_threshold must lie in (0, 1), got {}", self.prune_threshold));
        }
        if !(self.loglik_tol > 0.0) || !(self.ipm_tol > 0.0) {
            return bad("npag.loglik_tol and npag.ipm_tol must be positive".into());
        }
        if self.max_cycles == 0 {
            return bad("npag.max_cycles must be at least 1".into());
        }
        if self.initial_grid_size == Some(0) {
            return bad("npag.initial_grid_size must be at least 1".into());
        }
        if self.check_resolution.is_some_and(|r| r < 2) {
            return bad("npag.check_resolution must be at least 2".into());
        }
        if !(self.check_tolerance >= 0.0) {
            return bad("npag.check_tolerance must be non-negative".into());
        }
        Ok(())
    }

    pub fn grid_size_for(&self, n_subjects: usize) -> usize {
        self.initial_grid_size.unwrap_or_else(|| (50 * n_subjects).clamp(1, 10_000))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    /// `max_cycles` reached before the exit test passed.
    CycleLimit,
    /// The weight solver hit its iteration cap; the best iterate was kept.
    SolverLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    pub log_likelihood: f64,
    pub eps: f64,
    pub grid_size: usize,
    pub support_size: usize,
}

impl fmt::Display for CycleRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "cycle {:>5} eps {:.6e} grid {:>6} support {:>5} loglik {:.6}",
            self.cycle, self.eps, self.grid_size, self.support_size, self.log_likelihood
        )
    }
}

/// Diagnostics of the last weight solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSummary {
    pub iterations: usize,
    pub kkt_residual: f64,
    pub duality_gap: f64,
    pub mu_history: Vec<f64>,
}

impl From<&WeightSolution> for SolverSummary {
    fn from(s: &WeightSolution) -> Self {
        Self {
            iterations: s.iterations,
            kkt_residual: s.kkt_residual,
            duality_gap: s.duality_gap,
            mu_history: s.mu_history.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub distribution: DiscreteDistribution,
    pub log_likelihood: f64,
    pub cycle_history: Vec<CycleRecord>,
    pub optimality: OptimalityReport,
    pub status: FitStatus,
    pub solver: SolverSummary,
    pub warnings: Vec<String>,
}

/// Golden-ratio generalization: the positive root of `x^{d+1} = x + 1`.
fn generalized_golden_ratio(d: usize) -> f64 {
    let mut x: f64 = 2.0;
    for _ in 0..64 {
        let f = x.powi(d as i32 + 1) - x - 1.0;
        let df = (d as f64 + 1.0) * x.powi(d as i32) - 1.0;
        x -= f / df;
    }
    x
}

/// Low-discrepancy initial grid inside the open box.
///
/// Points follow the additive recurrence `frac(1/2 + n·α)` with
/// `α_j = φ_d^{-j}`. The first point is always the box center; the seed
/// selects where the rest of the sequence is read from.
pub fn initial_grid(space: &ParameterSpace, size: usize, seed: u64) -> Vec<Vec<f64>> {
    let d = space.dim();
    let phi = generalized_golden_ratio(d);
    let alpha: Vec<f64> = (1..=d).map(|j| phi.powi(-(j as i32))).collect();
    let offset = seed % 1_000_003;
    let mut points = Vec::with_capacity(size);
    if size == 0 {
        return points;
    }
    points.push(space.center());
    let mut n = offset;
    while points.len() < size {
        n += 1;
        let unit: Vec<f64> = alpha.iter().map(|a| (0.5 + n as f64 * a).fract()).collect();
        if unit.iter().any(|u| *u <= 0.0 || *u >= 1.0) {
            continue;
        }
        points.push(
            unit.iter()
                .zip(space.axes())
                .map(|(u, axis)| axis.lower + u * (axis.upper - axis.lower))
                .collect(),
        );
    }
    points
}

fn too_close(a: &[f64], b: &[f64], space: &ParameterSpace, min_frac: f64) -> bool {
    a.iter()
        .zip(b)
        .enumerate()
        .all(|(k, (x, y))| (x - y).abs() < min_frac * space.width(k))
}

/// Adds `±eps·(b_k − a_k)` neighbours along every axis of every support point,
/// clipped to the box. Candidates within `eps_min/10` (per axis, relative to
/// the box width) of an existing point are dropped.
pub fn expand_grid(support: &[Vec<f64>], eps: f64, space: &ParameterSpace, eps_min: f64) -> Vec<Vec<f64>> {
    let min_frac = eps_min / 10.0;
    let mut grid: Vec<Vec<f64>> = support.to_vec();
    for point in support {
        for k in 0..space.dim() {
            for sign in [-1.0, 1.0] {
                let mut candidate = point.clone();
                candidate[k] += sign * eps * space.width(k);
                space.clip(&mut candidate);
                if !grid.iter().any(|g| too_close(g, &candidate, space, min_frac)) {
                    grid.push(candidate);
                }
            }
        }
    }
    grid
}

/// Drops points with `w_k < threshold · max_j w_j` and renormalizes.
pub fn prune_support(dist: &DiscreteDistribution, threshold: f64) -> DiscreteDistribution {
    let (support, weights) = prune_indices(&dist.weights, threshold)
        .into_iter()
        .map(|k| (dist.support[k].clone(), dist.weights[k]))
        .unzip::<_, _, Vec<_>, Vec<f64>>();
    let total: f64 = weights.iter().sum();
    DiscreteDistribution { support, weights: weights.into_iter().map(|w| w / total).collect() }
}

fn prune_indices(weights: &[f64], threshold: f64) -> Vec<usize> {
    let max = weights.iter().cloned().fold(0.0, f64::max);
    // a few ulps of slack so weights sitting exactly on the cut survive rounding
    let cut = threshold * max * (1.0 - 8.0 * f64::EPSILON);
    let keep: Vec<usize> = (0..weights.len()).filter(|&k| weights[k] >= cut).collect();
    if keep.is_empty() {
        // all-zero weights: keep the first point rather than nothing
        vec![0]
    } else {
        keep
    }
}

fn key(theta: &[f64]) -> Vec<u64> {
    theta.iter().map(|v| v.to_bits()).collect()
}

struct CycleOutcome {
    distribution: DiscreteDistribution,
    log_likelihood: f64,
    solution: WeightSolution,
    solver_capped: bool,
}

fn solve_or_best(psi: &PsiMatrix, tol: f64) -> Result<(WeightSolution, bool)> {
    match solve_weights(psi, tol) {
        Ok(s) => Ok((s, false)),
        Err(NpagError::IterationLimit { best }) => {
            Ok((*best, true))
        }
        Err(e) => Err(e),
    }
}

/// Solve on `grid`, prune, and keep ℓ from dropping below the previous cycle.
fn run_cycle(psi: &PsiMatrix, previous: Option<(&DiscreteDistribution, f64)>, config: &NpagConfig) -> Result<CycleOutcome> {
    let (solution, mut capped) = solve_or_best(psi, config.ipm_tol)?;
    let kept = prune_indices(&solution.weights, config.prune_threshold);
    let total: f64 = kept.iter().map(|&k| solution.weights[k]).sum();
    let weights: Vec<f64> = kept.iter().map(|&k| solution.weights[k] / total).collect();
    let mut distribution = DiscreteDistribution { support: kept.iter().map(|&k| psi.grid[k].clone()).collect(), weights };
    let restricted = psi.select_columns(&kept);
    let mut log_likelihood = restricted.log_likelihood(&distribution.weights);
    let mut final_solution = solution;

    if let Some((prev, prev_ll)) = previous {
        if log_likelihood < prev_ll {
            // pruning cost more than expansion gained: re-solve on the
            // survivors together with the previous support, which the grid retains
            let mut columns = kept.clone();
            for theta in &prev.support {
                let k = key(theta);
                if let Some(idx) = psi.grid.iter().position(|g| key(g) == k) {
                    if !columns.contains(&idx) {
                        columns.push(idx);
                    }
                }
            }
            let union = psi.select_columns(&columns);
            let (sol, union_capped) = solve_or_best(&union, config.ipm_tol)?;
            capped |= union_capped;
            distribution = DiscreteDistribution { support: union.grid.clone(), weights: sol.weights.clone() };
            log_likelihood = sol.log_likelihood;
            final_solution = sol;
        }
    }
    Ok(CycleOutcome { distribution, log_likelihood, solution: final_solution, solver_capped: capped })
}

pub fn run_npag(model: &PopulationModel, subjects: &[Subject], config: &NpagConfig) -> Result<FitResult> {
    config.validate()?;
    if subjects.is_empty() {
        return Err(NpagError::Config("at least one subject is required".into()));
    }
    let space = model.space();
    let n = subjects.len();
    let mut grid = initial_grid(space, config.grid_size_for(n), config.rng_seed);
    let mut cache = PsiCache::new();
    let mut eps = config.eps_initial;
    let mut history: Vec<CycleRecord> = Vec::new();
    let mut current: Option<(DiscreteDistribution, f64)> = None;
    let mut last_solution: Option<WeightSolution> = None;
    let mut status = FitStatus::CycleLimit;

    for cycle in 1..=config.max_cycles {
        let psi = cache.build(model, subjects, &grid)?;
        let outcome = run_cycle(&psi, current.as_ref().map(|(d, l)| (d, *l)), config)?;
        let record = CycleRecord {
            cycle,
            log_likelihood: outcome.log_likelihood,
            eps,
            grid_size: grid.len(),
            support_size: outcome.distribution.len(),
        };
        log::info!("{record}");
        history.push(record);

        let improvement = current.as_ref().map_or(f64::INFINITY, |(_, prev)| outcome.log_likelihood - prev);
        current = Some((outcome.distribution, outcome.log_likelihood));
        last_solution = Some(outcome.solution);
        if outcome.solver_capped {
            status = FitStatus::SolverLimit;
            break;
        }
        if improvement < config.loglik_tol {
            if eps < config.eps_min {
                status = FitStatus::Converged;
                break;
            }
            eps /= 2.0;
        }
        if cycle == config.max_cycles {
            break;
        }
        let support = &current.as_ref().expect("set above").0.support;
        grid = expand_grid(support, eps, space, config.eps_min);
        cache.retain(&grid);
    }

    let (distribution, log_likelihood) = current.expect("at least one cycle runs");
    let solution = last_solution.expect("at least one cycle runs");
    let mut warnings = Vec::new();
    match status {
        FitStatus::CycleLimit => warnings.push(format!("stopped at max_cycles = {}", config.max_cycles)),
        FitStatus::SolverLimit => warnings.push(format!(
            "weight solver hit its iteration cap (kkt residual {:.3e})",
            solution.kkt_residual
        )),
        FitStatus::Converged => {}
    }
    if distribution.len() > n {
        warnings.push(format!(
            "support has {} points, more than the {} subjects bounding an optimal solution",
            distribution.len(),
            n
        ));
    }
    for w in &warnings {
        log::warn!("{w}");
    }

    let resolution = config.check_resolution.unwrap_or_else(|| default_resolution(space.dim()));
    let optimality = verify_optimality(&distribution, model, subjects, resolution, config.check_tolerance)?;

    Ok(FitResult {
        distribution,
        log_likelihood,
        cycle_history: history,
        optimality,
        status,
        solver: SolverSummary::from(&solution),
        warnings,
    })
}
