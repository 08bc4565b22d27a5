//! Synthetic one-compartment populations.
//!
//! Parameters come from stream 0 of a ChaCha8 generator seeded with
//! `SimConfig::seed`; subject `i` draws its noise from stream `i + 1`, so each
//! subject's record is independent of how many others are simulated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{NpagError, Result};
use crate::filtering::Subject;
use crate::models::{pk_process_variance, ParameterSpace};

/// Consecutive out-of-box draws tolerated before giving up.
pub const MAX_REJECTIONS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalLaw {
    pub mean: f64,
    /// Standard deviation.
    pub sd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n_subjects: usize,
    pub dose: f64,
    pub times: Vec<f64>,
    pub k_mixture: Vec<MixtureComponent>,
    pub vol: NormalLaw,
    /// Process-noise spectral density.
    pub w_c: f64,
    pub v_meas: f64,
    pub sigma0: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_subjects: 100,
            dose: 20.0,
            times: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            k_mixture: vec![
                MixtureComponent { weight: 0.5, mean: 0.5, sd: 0.05 },
                MixtureComponent { weight: 0.5, mean: 1.5, sd: 0.15 },
            ],
            vol: NormalLaw { mean: 1.0, sd: 0.2 },
            w_c: 0.0,
            v_meas: 0.25,
            sigma0: 0.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(NpagError::Config(format!("sim: {msg}")));
        if self.n_subjects == 0 {
            return bad("n_subjects must be at least 1");
        }
        if !(self.dose.is_finite() && self.dose >= 0.0) {
            return bad("dose must be finite and non-negative");
        }
        if self.times.is_empty() || self.times[0] <= 0.0 || self.times.windows(2).any(|w| w[1] <= w[0]) {
            return bad("times must be positive and strictly increasing");
        }
        if self.k_mixture.is_empty() {
            return bad("k_mixture needs at least one component");
        }
        if self.k_mixture.iter().any(|c| !(c.weight > 0.0 && c.sd > 0.0 && c.sd.is_finite() && c.mean.is_finite())) {
            return bad("k_mixture components need positive weight, finite mean and finite sd > 0");
        }
        let total: f64 = self.k_mixture.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(&format!("k_mixture weights must sum to 1, got {total}"));
        }
        if !(self.vol.sd > 0.0 && self.vol.sd.is_finite() && self.vol.mean.is_finite()) {
            return bad("vol needs a finite mean and finite sd > 0");
        }
        if !(self.w_c >= 0.0 && self.v_meas >= 0.0 && self.sigma0 >= 0.0) {
            return bad("w_c, v_meas and sigma0 must be non-negative");
        }
        Ok(())
    }
}

/// A simulated data set with the parameters that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPopulation {
    pub subjects: Vec<Subject>,
    /// `(K, Vol)` per subject.
    pub parameters: Vec<[f64; 2]>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn draw_k(config: &SimConfig, rng: &mut ChaCha8Rng) -> f64 {
    let u = rng.random::<f64>();
    let mut acc = 0.0;
    let mut chosen = config.k_mixture[config.k_mixture.len() - 1];
    for c in &config.k_mixture {
        acc += c.weight;
        if u < acc {
            chosen = *c;
            break;
        }
    }
    chosen.mean + chosen.sd * normal(rng)
}

/// Draws `(K, Vol)` pairs, rejecting pairs outside the fitting box.
pub fn sample_parameters(config: &SimConfig, space: &ParameterSpace) -> Result<Vec<[f64; 2]>> {
    config.validate()?;
    let k_axis = space
        .index_of("K")
        .ok_or_else(|| NpagError::Config("simulation needs a bounds axis named `K`".into()))?;
    let vol_axis = space
        .index_of("Vol")
        .or_else(|| space.index_of("V"))
        .ok_or_else(|| NpagError::Config("simulation needs a bounds axis named `Vol`".into()))?;
    let inside = |v: f64, axis: usize| {
        let a = &space.axes()[axis];
        v >= a.lower && v <= a.upper
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0);
    let mut out = Vec::with_capacity(config.n_subjects);
    let mut rejections = 0;
    while out.len() < config.n_subjects {
        let k = draw_k(config, &mut rng);
        let vol = config.vol.mean + config.vol.sd * normal(&mut rng);
        if inside(k, k_axis) && inside(vol, vol_axis) {
            out.push([k, vol]);
            rejections = 0;
        } else {
            rejections += 1;
            if rejections > MAX_REJECTIONS {
                return Err(NpagError::Config(format!(
                    "sim: more than {MAX_REJECTIONS} consecutive parameter draws fell outside the bounds box"
                )));
            }
        }
    }
    Ok(out)
}

/// Observations for one subject using the exact discrete-time recursion. No
/// dose record is attached; fits take the bolus from the model settings.
pub fn simulate_subject(id: &str, k: f64, vol: f64, config: &SimConfig, stream: u64) -> Result<Subject> {
    if !(k > 0.0 && vol > 0.0) {
        return Err(NpagError::Model(format!("simulation needs K > 0 and Vol > 0, got K={k} Vol={vol}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    let mut x = config.dose / vol + config.sigma0.sqrt() * normal(&mut rng);
    let mut prev = 0.0;
    let mut values = Vec::with_capacity(config.times.len());
    for &t in &config.times {
        let dt = t - prev;
        prev = t;
        let q = pk_process_variance(k, config.w_c, dt);
        x = (-k * dt).exp() * x + q.sqrt() * normal(&mut rng);
        values.push(x + config.v_meas.sqrt() * normal(&mut rng));
    }
    Subject::scalar(id, config.times.clone(), &values)
}

pub fn simulate_population(config: &SimConfig, space: &ParameterSpace) -> Result<SimulatedPopulation> {
    let parameters = sample_parameters(config, space)?;
    let width = config.n_subjects.to_string().len().max(3);
    let subjects = parameters
        .iter()
        .enumerate()
        .map(|(i, [k, vol])| simulate_subject(&format!("S{:0width$}", i + 1), *k, *vol, config, i as u64 + 1))
        .collect::<Result<_>>()?;
    Ok(SimulatedPopulation { subjects, parameters })
}
