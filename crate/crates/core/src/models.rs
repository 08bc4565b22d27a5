//! Linear Gaussian state-space population models.
//!
//! A model is a continuous-time linear SDE
//!
//! ```text
//! dx = (A x + B u) dt + dw,     E[dw dwᵀ] = W dt
//! y_k = C x(t_k) + v_k,         v_k ~ N(0, V)
//! x(0) ~ N(x̂₀, Σ₀)
//! ```
//!
//! with matrices depending on a parameter vector θ. On every inter-sample
//! interval the matrices are constant, so the SDE integrates exactly to a
//! discrete-time system `x_{k+1} = A_k x_k + B_k u_k + w_{k+1}` with
//! `w_{k+1} ~ N(0, W_k)`. The integrals are obtained from one matrix
//! exponential of a block upper-triangular matrix (Van Loan).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{NpagError, Result};
use crate::filtering::Subject;
use crate::linalg::{all_finite_mat, symmetrize};

/// One named parameter axis with closed bounds `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
}

/// The box Θ of admissible parameter vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Axis>", into = "Vec<Axis>")]
pub struct ParameterSpace {
    axes: Vec<Axis>,
}

impl ParameterSpace {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(NpagError::ParameterSpace("at least one axis is required".into()));
        }
        for (i, axis) in axes.iter().enumerate() {
            if !(axis.lower.is_finite() && axis.upper.is_finite()) {
                return Err(NpagError::ParameterSpace(format!("axis `{}` has non-finite bounds", axis.name)));
            }
            if axis.lower >= axis.upper {
                return Err(NpagError::ParameterSpace(format!(
                    "axis `{}` needs lower < upper, got [{}, {}]",
                    axis.name, axis.lower, axis.upper
                )));
            }
            if axes[..i].iter().any(|a| a.name == axis.name) {
                return Err(NpagError::ParameterSpace(format!("duplicate axis name `{}`", axis.name)));
            }
        }
        Ok(Self { axes })
    }

    /// Convenience constructor from `(name, lower, upper)` triples.
    pub fn from_bounds(bounds: &[(&str, f64, f64)]) -> Result<Self> {
        Self::new(
            bounds
                .iter()
                .map(|&(name, lower, upper)| Axis { name: name.to_string(), lower, upper })
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn names(&self) -> Vec<&str> {
        self.axes.iter().map(|a| a.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.axes.iter().position(|a| a.name == name)
    }

    pub fn width(&self, k: usize) -> f64 {
        self.axes[k].upper - self.axes[k].lower
    }

    pub fn center(&self) -> Vec<f64> {
        self.axes.iter().map(|a| 0.5 * (a.lower + a.upper)).collect()
    }

    /// Closed-box membership.
    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(&self.axes)
                .all(|(&t, a)| t >= a.lower && t <= a.upper)
    }

    pub fn check(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(NpagError::Dimension(format!(
                "theta has {} entries, parameter space has {} axes",
                theta.len(),
                self.dim()
            )));
        }
        for (&t, a) in theta.iter().zip(&self.axes) {
            if !(t >= a.lower && t <= a.upper) {
                return Err(NpagError::OutsideBox { theta: theta.to_vec(), axis: a.name.clone() });
            }
        }
        Ok(())
    }

    pub fn clip(&self, theta: &mut [f64]) {
        for (t, a) in theta.iter_mut().zip(&self.axes) {
            *t = t.clamp(a.lower, a.upper);
        }
    }
}

impl TryFrom<Vec<Axis>> for ParameterSpace {
    type Error = NpagError;

    fn try_from(axes: Vec<Axis>) -> Result<Self> {
        Self::new(axes)
    }
}

impl From<ParameterSpace> for Vec<Axis> {
    fn from(space: ParameterSpace) -> Self {
        space.axes
    }
}

/// Exact discretization of a time-invariant linear SDE over a step `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedLti {
    /// `exp(A dt)`
    pub a_d: DMatrix<f64>,
    /// `∫₀^dt exp(A s) B ds`
    pub b_d: DMatrix<f64>,
    /// `∫₀^dt exp(A s) W exp(Aᵀ s) ds`, symmetrized
    pub w_d: DMatrix<f64>,
}

/// Discretizes `dx = (A x + B u) dt + dw`, `E[dw dwᵀ] = W dt` over `dt`.
///
/// The exponential of the `(2n + q)`-square block matrix
///
/// ```text
/// | A   W    B |
/// | 0  -Aᵀ   0 |  · dt
/// | 0   0    0 |
/// ```
///
/// carries `exp(A dt)` in its top-left block, `∫ exp(As) B ds` in the top-right
/// block and `G = ∫ exp(A(dt-s)) W exp(-Aᵀs) ds` in the top-middle block, from
/// which `W_d = G · exp(A dt)ᵀ`.
pub fn discretize_lti(a: &DMatrix<f64>, b: &DMatrix<f64>, w: &DMatrix<f64>, dt: f64) -> Result<DiscretizedLti> {
    let n = a.nrows();
    if !a.is_square() {
        return Err(NpagError::Dimension(format!("A must be square, got {}x{}", a.nrows(), a.ncols())));
    }
    if b.nrows() != n {
        return Err(NpagError::Dimension(format!("B has {} rows, state dimension is {n}", b.nrows())));
    }
    if w.nrows() != n || w.ncols() != n {
        return Err(NpagError::Dimension(format!("W must be {n}x{n}, got {}x{}", w.nrows(), w.ncols())));
    }
    if !dt.is_finite() {
        return Err(NpagError::NonFinite("dt"));
    }
    if dt <= 0.0 {
        return Err(NpagError::Model(format!("discretization step must be positive, got {dt}")));
    }
    if !all_finite_mat(a) {
        return Err(NpagError::NonFinite("A"));
    }
    if !all_finite_mat(b) {
        return Err(NpagError::NonFinite("B"));
    }
    if !all_finite_mat(w) {
        return Err(NpagError::NonFinite("W"));
    }

    let q = b.ncols();
    let size = 2 * n + q;
    let mut block = DMatrix::<f64>::zeros(size, size);
    block.view_mut((0, 0), (n, n)).copy_from(&(a * dt));
    block.view_mut((0, n), (n, n)).copy_from(&(w * dt));
    block.view_mut((n, n), (n, n)).copy_from(&(-a.transpose() * dt));
    if q > 0 {
        block.view_mut((0, 2 * n), (n, q)).copy_from(&(b * dt));
    }
    let e = block.exp();

    let a_d = e.view((0, 0), (n, n)).into_owned();
    let g = e.view((0, n), (n, n)).into_owned();
    let b_d = e.view((0, 2 * n), (n, q)).into_owned();
    let mut w_d = g * a_d.transpose();
    symmetrize(&mut w_d);
    Ok(DiscretizedLti { a_d, b_d, w_d })
}

/// Matrices of one inter-sample interval, ending at an observation.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteStep {
    /// Interval end time.
    pub time: f64,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub u: DVector<f64>,
    pub w: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

/// A fully numeric discrete-time linear Gaussian system for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteLinearModel {
    pub x0: DVector<f64>,
    pub sigma0: DMatrix<f64>,
    /// One step per observation; step `k` propagates from the previous
    /// observation time (or 0) to `times[k]`.
    pub steps: Vec<DiscreteStep>,
}

impl DiscreteLinearModel {
    pub fn state_dim(&self) -> usize {
        self.x0.len()
    }
}

/// Noise settings of the built-in one-compartment model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PkSettings {
    /// Process-noise spectral density `W_c`.
    #[serde(default)]
    pub w_c: f64,
    /// Measurement-noise variance.
    #[serde(default = "default_v_meas")]
    pub v_meas: f64,
    /// Initial-state variance at dose time.
    #[serde(default)]
    pub sigma0: f64,
    /// Bolus dose at t = 0 used when a subject carries no dose records.
    #[serde(default = "default_dose")]
    pub dose: f64,
}

fn default_v_meas() -> f64 {
    0.25
}

fn default_dose() -> f64 {
    20.0
}

impl Default for PkSettings {
    fn default() -> Self {
        Self { w_c: 0.0, v_meas: default_v_meas(), sigma0: 0.0, dose: default_dose() }
    }
}

/// `W_c / (2K) · (1 − exp(−2KΔt))`
pub fn pk_process_variance(k: f64, w_c: f64, dt: f64) -> f64 {
    if w_c == 0.0 {
        return 0.0;
    }
    -w_c / (2.0 * k) * (-2.0 * k * dt).exp_m1()
}

/// One-compartment bolus model: `dx = −K x dt + dw`, `y_k = x_k + v_k`,
/// `x(0) ~ N(dose/Vol, Σ₀)`. Integration starts at the dose time t = 0.
pub fn pk_one_compartment(
    k: f64,
    vol: f64,
    dose: f64,
    times: &[f64],
    settings: &PkSettings,
) -> Result<DiscreteLinearModel> {
    if !(k > 0.0 && k.is_finite()) {
        return Err(NpagError::Model(format!("elimination rate K must be positive, got {k}")));
    }
    if !(vol > 0.0 && vol.is_finite()) {
        return Err(NpagError::Model(format!("volume Vol must be positive, got {vol}")));
    }
    if !(dose >= 0.0 && dose.is_finite()) {
        return Err(NpagError::Model(format!("dose must be non-negative, got {dose}")));
    }
    if settings.w_c < 0.0 || settings.v_meas < 0.0 || settings.sigma0 < 0.0 {
        return Err(NpagError::Model("noise variances must be non-negative".into()));
    }
    check_times(times)?;

    let mut prev = 0.0;
    let steps = times
        .iter()
        .map(|&t| {
            let dt = t - prev;
            prev = t;
            DiscreteStep {
                time: t,
                a: DMatrix::from_element(1, 1, (-k * dt).exp()),
                b: DMatrix::zeros(1, 0),
                u: DVector::zeros(0),
                w: DMatrix::from_element(1, 1, pk_process_variance(k, settings.w_c, dt)),
                c: DMatrix::from_element(1, 1, 1.0),
                v: DMatrix::from_element(1, 1, settings.v_meas),
            }
        })
        .collect();
    Ok(DiscreteLinearModel {
        x0: DVector::from_element(1, dose / vol),
        sigma0: DMatrix::from_element(1, 1, settings.sigma0),
        steps,
    })
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(NpagError::Model("at least one observation time is required".into()));
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(NpagError::NonFinite("observation times"));
    }
    if times[0] < 0.0 {
        return Err(NpagError::Model(format!("first observation time must be ≥ 0, got {}", times[0])));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(NpagError::Model("observation times must be strictly increasing".into()));
    }
    Ok(())
}

/// A matrix affine in θ: `base + Σ_j θ[name_j] · coefficient_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineMatrix {
    pub base: Vec<Vec<f64>>,
    #[serde(default)]
    pub theta: BTreeMap<String, Vec<Vec<f64>>>,
}

impl AffineMatrix {
    pub fn constant(rows: Vec<Vec<f64>>) -> Self {
        Self { base: rows, theta: BTreeMap::new() }
    }

    fn shape(&self) -> (usize, usize) {
        (self.base.len(), self.base.first().map_or(0, Vec::len))
    }

    fn validate(&self, label: &str, rows: usize, cols: usize, space: &ParameterSpace) -> Result<()> {
        let check = |m: &Vec<Vec<f64>>, what: &str| -> Result<()> {
            if m.len() != rows || m.iter().any(|r| r.len() != cols) {
                return Err(NpagError::Dimension(format!("{label}{what} must be {rows}x{cols}")));
            }
            if m.iter().flatten().any(|v| !v.is_finite()) {
                return Err(NpagError::Model(format!("{label}{what} has non-finite entries")));
            }
            Ok(())
        };
        // an n×0 matrix has no rows to carry a column count
        if cols > 0 || !self.base.is_empty() {
            check(&self.base, "")?;
        }
        for (name, coef) in &self.theta {
            if space.index_of(name).is_none() {
                return Err(NpagError::Model(format!("{label} references unknown parameter `{name}`")));
            }
            check(coef, &format!("[{name}]"))?;
        }
        Ok(())
    }

    fn eval(&self, rows: usize, cols: usize, space: &ParameterSpace, theta: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(rows, cols);
        for (i, row) in self.base.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        for (name, coef) in &self.theta {
            let t = theta[space.index_of(name).expect("validated")];
            for (i, row) in coef.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    m[(i, j)] += t * v;
                }
            }
        }
        m
    }
}

/// General time-invariant linear model with matrices affine in θ.
///
/// The input `u` (dimension 0 or 1) is piecewise constant: on each interval it
/// holds the amount of the latest dose record at or before the interval start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearModelSpec {
    pub a: AffineMatrix,
    #[serde(default)]
    pub b: Option<AffineMatrix>,
    pub c: AffineMatrix,
    pub w: AffineMatrix,
    pub v: AffineMatrix,
    pub x0: AffineMatrix,
    #[serde(default)]
    pub sigma0: Option<AffineMatrix>,
}

impl LinearModelSpec {
    pub fn state_dim(&self) -> usize {
        self.a.shape().0
    }

    pub fn obs_dim(&self) -> usize {
        self.c.shape().0
    }

    pub fn input_dim(&self) -> usize {
        self.b.as_ref().map_or(0, |b| b.shape().1)
    }
}

/// Model selection as it appears in the `model` section of a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", deny_unknown_fields)]
pub enum ModelSpec {
    #[serde(rename = "pk_1c")]
    PkOneCompartment(PkSettings),
    #[serde(rename = "linear")]
    Linear(LinearModelSpec),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Binding {
    Pk { k: usize, vol: usize },
    Linear,
}

/// A model specification bound to a parameter space. Immutable and shareable
/// across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationModel {
    spec: ModelSpec,
    space: ParameterSpace,
    binding: Binding,
}

impl PopulationModel {
    pub fn new(spec: ModelSpec, space: ParameterSpace) -> Result<Self> {
        let binding = match &spec {
            ModelSpec::PkOneCompartment(s) => {
                let k = space
                    .index_of("K")
                    .ok_or_else(|| NpagError::Model("pk_1c needs a parameter axis named `K`".into()))?;
                let vol = space
                    .index_of("Vol")
                    .or_else(|| space.index_of("V"))
                    .ok_or_else(|| NpagError::Model("pk_1c needs a parameter axis named `Vol` (or `V`)".into()))?;
                if space.axes()[k].lower <= 0.0 || space.axes()[vol].lower <= 0.0 {
                    return Err(NpagError::Model("pk_1c needs strictly positive lower bounds on K and Vol".into()));
                }
                if s.w_c < 0.0 || s.v_meas < 0.0 || s.sigma0 < 0.0 || s.dose < 0.0 {
                    return Err(NpagError::Model("pk_1c noise levels and dose must be non-negative".into()));
                }
                Binding::Pk { k, vol }
            }
            ModelSpec::Linear(l) => {
                let n = l.state_dim();
                let p = l.obs_dim();
                let q = l.input_dim();
                if n == 0 || p == 0 {
                    return Err(NpagError::Dimension("linear model needs state and observation dimensions ≥ 1".into()));
                }
                if q > 1 {
                    return Err(NpagError::Dimension("linear model input dimension must be 0 or 1".into()));
                }
                l.a.validate("a", n, n, &space)?;
                if let Some(b) = &l.b {
                    b.validate("b", n, q, &space)?;
                }
                l.c.validate("c", p, n, &space)?;
                l.w.validate("w", n, n, &space)?;
                l.v.validate("v", p, p, &space)?;
                l.x0.validate("x0", n, 1, &space)?;
                if let Some(s0) = &l.sigma0 {
                    s0.validate("sigma0", n, n, &space)?;
                }
                Binding::Linear
            }
        };
        Ok(Self { spec, space, binding })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn space(&self) -> &ParameterSpace {
        &self.space
    }

    /// Binds θ and a subject's schedule to concrete matrices.
    pub fn instantiate(&self, theta: &[f64], subject: &Subject) -> Result<DiscreteLinearModel> {
        self.space.check(theta)?;
        if subject.times.is_empty() {
            return Err(NpagError::Subject { id: subject.id.clone(), reason: "no observation times".into() });
        }
        match (&self.spec, self.binding) {
            (ModelSpec::PkOneCompartment(settings), Binding::Pk { k, vol }) => {
                let obs_dim_ok = subject.observations.iter().all(|o| o.len() == 1);
                if !obs_dim_ok {
                    return Err(NpagError::Dimension(format!(
                        "pk_1c expects scalar observations, subject `{}` has vectors",
                        subject.id
                    )));
                }
                if subject.doses.iter().any(|d| d.time != 0.0) {
                    return Err(NpagError::Dimension(format!(
                        "pk_1c models a single bolus at t = 0; subject `{}` has later doses",
                        subject.id
                    )));
                }
                let dose = if subject.doses.is_empty() {
                    settings.dose
                } else {
                    subject.doses.iter().map(|d| d.amount).sum()
                };
                pk_one_compartment(theta[k], theta[vol], dose, &subject.times, settings)
            }
            (ModelSpec::Linear(spec), _) => self.instantiate_linear(spec, theta, subject),
            _ => unreachable!("binding always matches the model variant"),
        }
    }

    fn instantiate_linear(&self, spec: &LinearModelSpec, theta: &[f64], subject: &Subject) -> Result<DiscreteLinearModel> {
        let space = &self.space;
        let n = spec.state_dim();
        let p = spec.obs_dim();
        let q = spec.input_dim();
        if let Some(bad) = subject.observations.iter().find(|o| o.len() != p) {
            return Err(NpagError::Dimension(format!(
                "model observes {p} components, subject `{}` has {}",
                subject.id,
                bad.len()
            )));
        }
        if q == 0 && !subject.doses.is_empty() {
            return Err(NpagError::Dimension(format!(
                "model has no input but subject `{}` has dose records",
                subject.id
            )));
        }
        for dose in &subject.doses {
            if dose.time != 0.0 && !subject.times.contains(&dose.time) {
                return Err(NpagError::Dimension(format!(
                    "dose at t = {} for subject `{}` does not fall on 0 or an observation time",
                    dose.time, subject.id
                )));
            }
        }

        let a = spec.a.eval(n, n, space, theta);
        let b = spec.b.as_ref().map_or_else(|| DMatrix::zeros(n, 0), |m| m.eval(n, q, space, theta));
        let c = spec.c.eval(p, n, space, theta);
        let w = spec.w.eval(n, n, space, theta);
        let mut v = spec.v.eval(p, p, space, theta);
        symmetrize(&mut v);
        let x0 = spec.x0.eval(n, 1, space, theta).column(0).into_owned();
        let mut sigma0 = spec.sigma0.as_ref().map_or_else(|| DMatrix::zeros(n, n), |m| m.eval(n, n, space, theta));
        symmetrize(&mut sigma0);

        let input_at = |t: f64| -> f64 {
            subject
                .doses
                .iter()
                .filter(|d| d.time <= t)
                .max_by(|x, y| x.time.total_cmp(&y.time))
                .map_or(0.0, |d| d.amount)
        };

        let mut cache: Vec<(u64, DiscretizedLti)> = Vec::new();
        let mut prev = 0.0;
        let mut steps = Vec::with_capacity(subject.times.len());
        for &t in &subject.times {
            let dt = t - prev;
            let disc = if dt == 0.0 {
                DiscretizedLti { a_d: DMatrix::identity(n, n), b_d: DMatrix::zeros(n, q), w_d: DMatrix::zeros(n, n) }
            } else if let Some((_, d)) = cache.iter().find(|(bits, _)| *bits == dt.to_bits()) {
                d.clone()
            } else {
                let d = discretize_lti(&a, &b, &w, dt)?;
                cache.push((dt.to_bits(), d.clone()));
                d
            };
            let u = if q == 0 { DVector::zeros(0) } else { DVector::from_element(1, input_at(prev)) };
            steps.push(DiscreteStep { time: t, a: disc.a_d, b: disc.b_d, u, w: disc.w_d, c: c.clone(), v: v.clone() });
            prev = t;
        }
        Ok(DiscreteLinearModel { x0, sigma0, steps })
    }
}
