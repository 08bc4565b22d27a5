//! The subjects × grid likelihood table Ψ.
//!
//! Entries are stored row-scaled: `p(Y_i | φ_k) = values[(i, k)] · exp(row_log_scale[i])`
//! with each row's maximum equal to one. Row scaling shifts the objective by a
//! constant per subject and leaves the optimal weights unchanged.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{NpagError, Result};
use crate::filtering::{subject_log_likelihood, Subject};
use crate::models::PopulationModel;

/// Scaled entries below this are stored as exact zeros.
pub const UNDERFLOW_CLAMP: f64 = 1e-100;

#[derive(Debug, Clone, PartialEq)]
pub struct PsiMatrix {
    pub values: DMatrix<f64>,
    pub row_log_scale: Vec<f64>,
    pub grid: Vec<Vec<f64>>,
}

impl PsiMatrix {
    /// Builds the table from per-point log-likelihood columns (`columns[k][i]`).
    pub fn from_log_columns(grid: Vec<Vec<f64>>, columns: &[Vec<f64>], subject_ids: &[&str]) -> Result<Self> {
        let k = columns.len();
        if k == 0 || grid.len() != k {
            return Err(NpagError::Dimension("Ψ needs a nonempty grid with one column per point".into()));
        }
        let n = subject_ids.len();
        if columns.iter().any(|c| c.len() != n) {
            return Err(NpagError::Dimension("every Ψ column needs one entry per subject".into()));
        }
        let mut row_log_scale = vec![f64::NEG_INFINITY; n];
        for col in columns {
            for (scale, &l) in row_log_scale.iter_mut().zip(col) {
                *scale = scale.max(l);
            }
        }
        if let Some(i) = row_log_scale.iter().position(|s| *s == f64::NEG_INFINITY) {
            return Err(NpagError::DegenerateSubject { id: subject_ids[i].to_string() });
        }
        if row_log_scale.iter().any(|s| !s.is_finite()) {
            return Err(NpagError::NonFinite("subject log-likelihood"));
        }
        let values = DMatrix::from_fn(n, k, |i, j| {
            let v = (columns[j][i] - row_log_scale[i]).exp();
            if v < UNDERFLOW_CLAMP {
                0.0
            } else {
                v
            }
        });
        Ok(Self { values, row_log_scale, grid })
    }

    pub fn num_subjects(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_points(&self) -> usize {
        self.values.ncols()
    }

    /// `log p(Y_i | φ_k)`, or −∞ where the scaled entry is zero.
    pub fn log_entry(&self, i: usize, k: usize) -> f64 {
        self.values[(i, k)].ln() + self.row_log_scale[i]
    }

    /// `ℓ(w) = Σ_i log Σ_k w_k p(Y_i | φ_k)`.
    pub fn log_likelihood(&self, weights: &[f64]) -> f64 {
        (0..self.num_subjects())
            .map(|i| {
                let mix: f64 = weights.iter().enumerate().map(|(k, w)| w * self.values[(i, k)]).sum();
                mix.ln() + self.row_log_scale[i]
            })
            .sum()
    }

    /// Restriction to the given columns, rows rescaled to max one.
    pub fn select_columns(&self, columns: &[usize]) -> Self {
        let mut values = self.values.select_columns(columns.iter());
        let mut row_log_scale = self.row_log_scale.clone();
        for i in 0..values.nrows() {
            let max = values.row(i).max();
            if max > 0.0 {
                values.row_mut(i).scale_mut(1.0 / max);
                row_log_scale[i] += max.ln();
            }
        }
        let grid = columns.iter().map(|&k| self.grid[k].clone()).collect();
        Self { values, row_log_scale, grid }
    }

    /// Long-format CSV: `subject,point,<axis...>,log_lik`.
    pub fn write_csv<W: Write>(&self, mut out: W, subject_ids: &[&str], axis_names: &[&str]) -> std::io::Result<()> {
        write!(out, "subject,point")?;
        for name in axis_names {
            write!(out, ",{name}")?;
        }
        writeln!(out, ",log_lik")?;
        for (i, id) in subject_ids.iter().enumerate() {
            for (k, point) in self.grid.iter().enumerate() {
                write!(out, "{id},{k}")?;
                for v in point {
                    write!(out, ",{v}")?;
                }
                writeln!(out, ",{}", self.log_entry(i, k))?;
            }
        }
        Ok(())
    }
}

/// `log p(Y_i | θ)` for every subject.
pub fn log_likelihood_column(model: &PopulationModel, subjects: &[Subject], theta: &[f64]) -> Result<Vec<f64>> {
    subjects
        .iter()
        .map(|s| {
            let m = model.instantiate(theta, s)?;
            subject_log_likelihood(&m, s)
        })
        .collect()
}

pub fn build_psi(model: &PopulationModel, subjects: &[Subject], grid: &[Vec<f64>]) -> Result<PsiMatrix> {
    if grid.is_empty() {
        return Err(NpagError::Dimension("Ψ needs at least one grid point".into()));
    }
    for point in grid {
        model.space().check(point)?;
    }
    let columns: Vec<Vec<f64>> = grid
        .par_iter()
        .map(|theta| log_likelihood_column(model, subjects, theta))
        .collect::<Result<_>>()?;
    let ids: Vec<&str> = subjects.iter().map(|s| s.id.as_str()).collect();
    PsiMatrix::from_log_columns(grid.to_vec(), &columns, &ids)
}

fn key(theta: &[f64]) -> Vec<u64> {
    theta.iter().map(|v| v.to_bits()).collect()
}

/// Log-likelihood columns keyed by the exact bits of θ, reused across cycles.
#[derive(Debug, Default)]
pub struct PsiCache {
    columns: HashMap<Vec<u64>, Vec<f64>>,
}

impl PsiCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn build(&mut self, model: &PopulationModel, subjects: &[Subject], grid: &[Vec<f64>]) -> Result<PsiMatrix> {
        if grid.is_empty() {
            return Err(NpagError::Dimension("Ψ needs at least one grid point".into()));
        }
        let missing: Vec<&Vec<f64>> = grid.iter().filter(|t| !self.columns.contains_key(&key(t))).collect();
        for point in &missing {
            model.space().check(point)?;
        }
        let fresh: Vec<Vec<f64>> = missing
            .par_iter()
            .map(|theta| log_likelihood_column(model, subjects, theta))
            .collect::<Result<_>>()?;
        for (theta, col) in missing.into_iter().zip(fresh) {
            self.columns.insert(key(theta), col);
        }
        let columns: Vec<Vec<f64>> = grid.iter().map(|t| self.columns[&key(t)].clone()).collect();
        let ids: Vec<&str> = subjects.iter().map(|s| s.id.as_str()).collect();
        PsiMatrix::from_log_columns(grid.to_vec(), &columns, &ids)
    }

    /// Drops every cached column not belonging to `keep`.
    pub fn retain(&mut self, keep: &[Vec<f64>]) {
        let keys: std::collections::HashSet<Vec<u64>> = keep.iter().map(|t| key(t)).collect();
        self.columns.retain(|k, _| keys.contains(k));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_column_is_all_ones() {
        let cols = vec![vec![-3.0, -700.0, -0.5]];
        let psi = PsiMatrix::from_log_columns(vec![vec![1.0]], &cols, &["a", "b", "c"]).unwrap();
        assert!(psi.values.iter().all(|v| *v == 1.0));
        assert_eq!(psi.row_log_scale, vec![-3.0, -700.0, -0.5]);
    }

    #[test]
    fn degenerate_row_names_subject() {
        let cols = vec![vec![-1.0, f64::NEG_INFINITY], vec![-2.0, f64::NEG_INFINITY]];
        let err = PsiMatrix::from_log_columns(vec![vec![0.0], vec![1.0]], &cols, &["ok", "bad"]).unwrap_err();
        assert!(matches!(err, NpagError::DegenerateSubject { ref id } if id == "bad"));
    }

    #[test]
    fn tiny_entries_clamp_to_zero() {
        let cols = vec![vec![0.0], vec![-300.0]];
        let psi = PsiMatrix::from_log_columns(vec![vec![0.0], vec![1.0]], &cols, &["a"]).unwrap();
        assert_eq!(psi.values[(0, 1)], 0.0);
        assert_eq!(psi.log_entry(0, 1), f64::NEG_INFINITY);
    }

    #[test]
    fn column_selection_rescales_rows() {
        let cols = vec![vec![-1.0, -5.0], vec![-2.0, -4.0], vec![-3.0, -9.0]];
        let grid = vec![vec![0.0], vec![1.0], vec![2.0]];
        let psi = PsiMatrix::from_log_columns(grid, &cols, &["a", "b"]).unwrap();
        let sub = psi.select_columns(&[1, 2]);
        assert_eq!(sub.grid, vec![vec![1.0], vec![2.0]]);
        for i in 0..2 {
            assert!((sub.values.row(i).max() - 1.0).abs() < 1e-15);
            for (kk, &k) in [1usize, 2].iter().enumerate() {
                assert!((sub.log_entry(i, kk) - psi.log_entry(i, k)).abs() < 1e-12);
            }
        }
    }
}
