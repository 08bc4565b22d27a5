//! Result artifacts: the JSON record of a fit, a text table of the support
//! and SVG marginal plots.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::models::ParameterSpace;
use crate::npag::{CycleRecord, DiscreteDistribution, FitResult, FitStatus, SolverSummary};
use crate::optimality::OptimalityReport;

pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to reproduce a fit: the config echo, the seed and a hash
/// of the data file, plus the estimate itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitReport {
    pub format_version: u32,
    pub config: RunConfig,
    pub seed: u64,
    pub data_sha256: String,
    pub n_subjects: usize,
    pub parameter_names: Vec<String>,
    pub support: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub log_likelihood: f64,
    pub status: FitStatus,
    pub cycle_history: Vec<CycleRecord>,
    pub optimality: OptimalityReport,
    pub solver: SolverSummary,
    pub warnings: Vec<String>,
}

impl FitReport {
    pub fn new(config: &RunConfig, data: &[u8], n_subjects: usize, fit: FitResult) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            seed: config.npag.rng_seed,
            data_sha256: sha256_hex(data),
            n_subjects,
            parameter_names: config.bounds.names().iter().map(|s| s.to_string()).collect(),
            support: fit.distribution.support,
            weights: fit.distribution.weights,
            log_likelihood: fit.log_likelihood,
            status: fit.status,
            cycle_history: fit.cycle_history,
            optimality: fit.optimality,
            solver: fit.solver,
            warnings: fit.warnings,
        }
    }

    pub fn distribution(&self) -> DiscreteDistribution {
        DiscreteDistribution { support: self.support.clone(), weights: self.weights.clone() }
    }
}

pub fn sha256_hex(data: &[u8]) -> String {
    Sha256::digest(data).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Support points ordered by coordinates with their weights, a weight total
/// and the log-likelihood.
pub fn support_table(dist: &DiscreteDistribution, names: &[&str], log_likelihood: f64) -> String {
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| {
        dist.support[a]
            .iter()
            .zip(&dist.support[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut out = String::new();
    let _ = write!(out, "{:>5} {:>8}", "k", "w");
    for name in names {
        let _ = write!(out, " {name:>10}");
    }
    out.push('\n');
    for (row, &k) in order.iter().enumerate() {
        let _ = write!(out, "{:>5} {:>8.4}", row + 1, dist.weights[k]);
        for v in &dist.support[k] {
            let _ = write!(out, " {v:>10.6}");
        }
        out.push('\n');
    }
    let total: f64 = dist.weights.iter().sum();
    let _ = writeln!(out, "{:>5} {:>8.4}", "sum", total);
    let _ = writeln!(out, "log-likelihood = {log_likelihood:.4}");
    out
}

/// Per-axis marginal: distinct coordinates with summed weights, ascending.
pub fn marginal(dist: &DiscreteDistribution, axis: usize) -> Vec<(f64, f64)> {
    let mut pairs: Vec<(f64, f64)> = dist.support.iter().map(|p| p[axis]).zip(dist.weights.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(pairs.len());
    for (x, w) in pairs {
        match merged.last_mut() {
            Some(last) if last.0 == x => last.1 += w,
            _ => merged.push((x, w)),
        }
    }
    merged
}

/// Weighted Gaussian kernel density with a rule-of-thumb bandwidth based on
/// the effective number of points.
pub fn smoothed_density(points: &[(f64, f64)], lower: f64, upper: f64, samples: usize) -> Vec<(f64, f64)> {
    let mean: f64 = points.iter().map(|(x, w)| x * w).sum();
    let var: f64 = points.iter().map(|(x, w)| w * (x - mean).powi(2)).sum();
    let n_eff = 1.0 / points.iter().map(|(_, w)| w * w).sum::<f64>();
    let h = (1.06 * var.sqrt() * n_eff.powf(-0.2)).max((upper - lower) / 200.0);
    let norm = 1.0 / (h * (2.0 * std::f64::consts::PI).sqrt());
    (0..samples)
        .map(|j| {
            let x = lower + (upper - lower) * j as f64 / (samples - 1) as f64;
            let f = points.iter().map(|(p, w)| w * (-0.5 * ((x - p) / h).powi(2)).exp()).sum::<f64>() * norm;
            (x, f)
        })
        .collect()
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

/// Standalone SVG of one marginal as weighted spikes, optionally with a
/// kernel-smoothed curve scaled to the tallest spike.
pub fn marginal_svg(dist: &DiscreteDistribution, space: &ParameterSpace, axis: usize, smooth: bool) -> String {
    let a = &space.axes()[axis];
    let spikes = marginal(dist, axis);
    let y_max = spikes.iter().map(|s| s.1).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - a.lower) / (a.upper - a.lower) * plot_w;
    let sy = |y: f64| TOP + plot_h * (1.0 - y / y_max);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle">Marginal of {}</text>"#, WIDTH / 2.0, a.name);
    let _ = writeln!(
        s,
        r#"<path d="M{LEFT},{TOP} V{} H{}" fill="none" stroke="black"/>"#,
        TOP + plot_h,
        LEFT + plot_w
    );
    for j in 0..=4 {
        let x = a.lower + (a.upper - a.lower) * j as f64 / 4.0;
        let px = sx(x);
        let _ = writeln!(
            s,
            r#"<line x1="{px:.2}" y1="{}" x2="{px:.2}" y2="{}" stroke="black"/><text x="{px:.2}" y="{}" text-anchor="middle">{x:.3}</text>"#,
            TOP + plot_h,
            TOP + plot_h + 5.0,
            TOP + plot_h + 18.0
        );
        let y = y_max * j as f64 / 4.0;
        let py = sy(y);
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{py:.2}" x2="{LEFT}" y2="{py:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{y:.3}</text>"#,
            LEFT - 5.0,
            LEFT - 8.0,
            py + 4.0
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, LEFT + plot_w / 2.0, HEIGHT - 10.0, a.name);
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">weight</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );
    for (x, w) in &spikes {
        let _ = writeln!(
            s,
            r#"<line class="spike" x1="{0:.2}" y1="{1:.2}" x2="{0:.2}" y2="{2:.2}" stroke="steelblue" stroke-width="2"/>"#,
            sx(*x),
            sy(0.0),
            sy(*w)
        );
    }
    if smooth {
        let curve = smoothed_density(&spikes, a.lower, a.upper, 200);
        let peak = curve.iter().map(|c| c.1).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let mut d = String::new();
        for (j, (x, f)) in curve.iter().enumerate() {
            let _ = write!(d, "{}{:.2},{:.2} ", if j == 0 { "M" } else { "L" }, sx(*x), sy(f / peak * y_max));
        }
        let _ = writeln!(s, r#"<path class="smooth" d="{}" fill="none" stroke="firebrick"/>"#, d.trim_end());
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist() -> DiscreteDistribution {
        DiscreteDistribution {
            support: vec![vec![1.5, 1.0], vec![0.5, 1.0], vec![0.5, 1.2]],
            weights: vec![0.5, 0.3, 0.2],
        }
    }

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }

    #[test]
    fn marginal_merges_shared_coordinates() {
        assert_eq!(marginal(&dist(), 0), vec![(0.5, 0.5), (1.5, 0.5)]);
        let m = marginal(&dist(), 1);
        assert_eq!(m.len(), 2);
        assert!((m[0].1 - 0.8).abs() < 1e-15);
    }

    #[test]
    fn table_rows_sorted_with_total() {
        let t = support_table(&dist(), &["K", "Vol"], -12.345678);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 6);
        assert!(lines[1].contains("0.3000") && lines[1].contains("0.500000"));
        assert!(lines[4].contains("1.0000"));
        assert_eq!(lines[5], "log-likelihood = -12.3457");
    }

    #[test]
    fn svg_has_one_spike_per_coordinate() {
        let space = ParameterSpace::from_bounds(&[("K", 0.4, 2.0), ("Vol", 0.4, 2.0)]).unwrap();
        let plain = marginal_svg(&dist(), &space, 0, false);
        assert_eq!(plain.matches("class=\"spike\"").count(), 2);
        assert!(!plain.contains("class=\"smooth\""));
        assert!(marginal_svg(&dist(), &space, 0, true).contains("class=\"smooth\""));
    }

    #[test]
    fn smoothed_density_integrates_to_about_one() {
        let curve = smoothed_density(&[(1.0, 0.4), (1.4, 0.6)], 0.0, 3.0, 2001);
        let dx = 3.0 / 2000.0;
        let area: f64 = curve.iter().map(|c| c.1).sum::<f64>() * dx;
        assert!((area - 1.0).abs() < 1e-3, "{area}");
    }
}
