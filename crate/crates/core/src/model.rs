//! Parametric discrete-time model abstraction, trajectories and synthetic data.
//!
//! A model is the sum of a physics part `f(x, u; θ)` and an optional learned
//! correction `δ(x, u; ω)`, observed through `h(x)`. Parameters are handled
//! as the stacked vector `ϑ = [θ; ω]` everywhere except [`ModelSpec::predict_step`].

use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_len, Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Default ∞-norm magnitude above which a trajectory is considered escaped.
pub const DEFAULT_ESCAPE_BOUND: f64 = 1e9;

/// Physics part of the model: next-state map, output map and their Jacobians.
pub trait Dynamics: Send + Sync {
    fn name(&self) -> &str;
    fn n_x(&self) -> usize;
    fn n_u(&self) -> usize;
    fn n_theta(&self) -> usize;

    fn n_z(&self) -> usize {
        self.n_x()
    }

    fn step(&self, x: &Vector, u: &Vector, theta: &Vector) -> Result<Vector>;

    /// `∂f/∂x`, `n_x × n_x`.
    fn jac_x(&self, x: &Vector, u: &Vector, theta: &Vector) -> Result<Matrix>;

    /// `∂f/∂θ`, `n_x × n_theta`.
    fn jac_theta(&self, x: &Vector, u: &Vector, theta: &Vector) -> Result<Matrix>;

    fn output(&self, x: &Vector) -> Vector {
        x.clone()
    }

    /// `∂h/∂x`, `n_z × n_x`.
    fn jac_output(&self, x: &Vector) -> Matrix {
        Matrix::identity(self.n_z(), x.len())
    }
}

/// Black-box correction term `δ(x, u; ω)` added to the physics step.
pub trait Correction: Send + Sync {
    fn n_omega(&self) -> usize;
    fn eval(&self, x: &Vector, u: &Vector, omega: &Vector) -> Vector;
    fn jac_x(&self, x: &Vector, u: &Vector, omega: &Vector) -> Matrix;
    fn jac_omega(&self, x: &Vector, u: &Vector, omega: &Vector) -> Matrix;
}

#[derive(Clone)]
pub struct ModelSpec {
    dynamics: Arc<dyn Dynamics>,
    correction: Option<Arc<dyn Correction>>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.dynamics.name())
            .field("n_x", &self.n_x())
            .field("n_u", &self.n_u())
            .field("n_z", &self.n_z())
            .field("n_theta", &self.n_theta())
            .field("n_omega", &self.n_omega())
            .finish()
    }
}

impl ModelSpec {
    pub fn new(dynamics: Arc<dyn Dynamics>) -> Self {
        Self {
            dynamics,
            correction: None,
        }
    }

    pub fn with_correction(mut self, correction: Arc<dyn Correction>) -> Self {
        self.correction = Some(correction);
        self
    }

    pub fn name(&self) -> &str {
        self.dynamics.name()
    }

    pub fn dynamics(&self) -> &dyn Dynamics {
        self.dynamics.as_ref()
    }

    pub fn shared_dynamics(&self) -> Arc<dyn Dynamics> {
        Arc::clone(&self.dynamics)
    }

    pub fn correction(&self) -> Option<&dyn Correction> {
        self.correction.as_deref()
    }

    pub fn n_x(&self) -> usize {
        self.dynamics.n_x()
    }

    pub fn n_u(&self) -> usize {
        self.dynamics.n_u()
    }

    pub fn n_z(&self) -> usize {
        self.dynamics.n_z()
    }

    pub fn n_theta(&self) -> usize {
        self.dynamics.n_theta()
    }

    pub fn n_omega(&self) -> usize {
        self.correction.as_ref().map_or(0, |c| c.n_omega())
    }

    pub fn n_vartheta(&self) -> usize {
        self.n_theta() + self.n_omega()
    }

    /// Stacks physical and correction parameters into `ϑ = [θ; ω]`.
    pub fn vartheta(&self, theta: &Vector, omega: &Vector) -> Result<Vector> {
        check_len("theta", self.n_theta(), theta.len())?;
        check_len("omega", self.n_omega(), omega.len())?;
        Ok(Vector::from_iterator(
            self.n_vartheta(),
            theta.iter().chain(omega.iter()).copied(),
        ))
    }

    /// Splits `ϑ` back into `(θ, ω)`.
    pub fn split(&self, vartheta: &Vector) -> Result<(Vector, Vector)> {
        check_len("vartheta", self.n_vartheta(), vartheta.len())?;
        let n_theta = self.n_theta();
        Ok((
            vartheta.rows(0, n_theta).into_owned(),
            vartheta.rows(n_theta, self.n_omega()).into_owned(),
        ))
    }

    fn check_point(&self, x: &Vector, u: &Vector) -> Result<()> {
        check_len("state", self.n_x(), x.len())?;
        check_len("input", self.n_u(), u.len())
    }

    /// `f(x, u; θ) + δ(x, u; ω)`. Non-finite results are passed through unmasked.
    pub fn predict_step(&self, x: &Vector, u: &Vector, theta: &Vector, omega: &Vector) -> Result<Vector> {
        self.check_point(x, u)?;
        check_len("theta", self.n_theta(), theta.len())?;
        check_len("omega", self.n_omega(), omega.len())?;
        let mut next = self.dynamics.step(x, u, theta)?;
        if let Some(c) = &self.correction {
            next += c.eval(x, u, omega);
        }
        Ok(next)
    }

    pub fn step(&self, x: &Vector, u: &Vector, vartheta: &Vector) -> Result<Vector> {
        let (theta, omega) = self.split(vartheta)?;
        self.predict_step(x, u, &theta, &omega)
    }

    /// `J^{x/x} = ∂f/∂x + ∂δ/∂x`.
    pub fn jac_state(&self, x: &Vector, u: &Vector, vartheta: &Vector) -> Result<Matrix> {
        self.check_point(x, u)?;
        let (theta, omega) = self.split(vartheta)?;
        let mut jac = self.dynamics.jac_x(x, u, &theta)?;
        if let Some(c) = &self.correction {
            jac += c.jac_x(x, u, &omega);
        }
        Ok(jac)
    }

    /// `J^{x/ϑ} = [∂f/∂θ | ∂δ/∂ω]`, `n_x × n_vartheta`.
    pub fn jac_params(&self, x: &Vector, u: &Vector, vartheta: &Vector) -> Result<Matrix> {
        self.check_point(x, u)?;
        let (theta, omega) = self.split(vartheta)?;
        let jac_theta = self.dynamics.jac_theta(x, u, &theta)?;
        let mut jac = Matrix::zeros(self.n_x(), self.n_vartheta());
        jac.columns_mut(0, self.n_theta()).copy_from(&jac_theta);
        if let Some(c) = &self.correction {
            jac.columns_mut(self.n_theta(), self.n_omega())
                .copy_from(&c.jac_omega(x, u, &omega));
        }
        Ok(jac)
    }

    pub fn output(&self, x: &Vector) -> Vector {
        self.dynamics.output(x)
    }

    pub fn jac_output(&self, x: &Vector) -> Matrix {
        self.dynamics.jac_output(x)
    }
}

/// True if `x` is non-finite or its ∞-norm exceeds `bound`.
pub fn escaped(x: &Vector, bound: f64) -> bool {
    x.iter().any(|v| !v.is_finite() || v.abs() > bound)
}

/// Measured input/output sequences `ũ_0..ũ_T`, `z̃_0..z̃_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    inputs: Vec<Vector>,
    outputs: Vec<Vector>,
}

impl Trajectory {
    pub fn new(inputs: Vec<Vector>, outputs: Vec<Vector>) -> Result<Self> {
        if outputs.is_empty() {
            return Err(Error::Data("trajectory needs at least one sample".into()));
        }
        check_len("trajectory inputs", outputs.len(), inputs.len())?;
        let n_u = inputs[0].len();
        let n_z = outputs[0].len();
        for (k, (u, z)) in inputs.iter().zip(&outputs).enumerate() {
            check_len("input sample", n_u, u.len())?;
            check_len("output sample", n_z, z.len())?;
            if u.iter().chain(z.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("non-finite sample at k={k}")));
            }
        }
        Ok(Self { inputs, outputs })
    }

    pub fn horizon(&self) -> usize {
        self.outputs.len() - 1
    }

    pub fn inputs(&self) -> &[Vector] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[Vector] {
        &self.outputs
    }

    pub fn n_u(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn n_z(&self) -> usize {
        self.outputs[0].len()
    }

    /// First `horizon + 1` samples.
    pub fn truncated(&self, horizon: usize) -> Result<Self> {
        if horizon > self.horizon() {
            return Err(Error::Config(format!(
                "cannot truncate horizon {} to {horizon}",
                self.horizon()
            )));
        }
        Ok(Self {
            inputs: self.inputs[..=horizon].to_vec(),
            outputs: self.outputs[..=horizon].to_vec(),
        })
    }

    pub fn check_model(&self, model: &ModelSpec) -> Result<()> {
        check_len("trajectory input dimension", model.n_u(), self.n_u())?;
        check_len("trajectory output dimension", model.n_z(), self.n_z())
    }

    /// Writes `k,u_1..,z_1..` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["k".to_string()];
        header.extend((1..=self.n_u()).map(|i| format!("u_{i}")));
        header.extend((1..=self.n_z()).map(|i| format!("z_{i}")));
        w.write_record(&header)?;
        for (k, (u, z)) in self.inputs.iter().zip(&self.outputs).enumerate() {
            let mut row = vec![k.to_string()];
            row.extend(u.iter().chain(z.iter()).map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format produced by [`Trajectory::write_csv`]. Column names must be
    /// exactly `k`, then `u_1..u_m`, then `z_1..z_n` with no gaps.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let names: Vec<&str> = header.iter().map(str::trim).collect();
        if names.first() != Some(&"k") {
            return Err(Error::Data("first column must be `k`".into()));
        }
        let n_u = names.iter().filter(|n| n.starts_with("u_")).count();
        let n_z = names.iter().filter(|n| n.starts_with("z_")).count();
        if n_z == 0 {
            return Err(Error::Data("no output columns `z_i`".into()));
        }
        let expected: Vec<String> = std::iter::once("k".to_string())
            .chain((1..=n_u).map(|i| format!("u_{i}")))
            .chain((1..=n_z).map(|i| format!("z_{i}")))
            .collect();
        if names.len() != expected.len() || names.iter().zip(&expected).any(|(a, b)| a != b) {
            return Err(Error::Data(format!(
                "unexpected header {names:?}, expected {expected:?}"
            )));
        }

        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        for (row_idx, record) in r.records().enumerate() {
            let record = record?;
            if record.len() != expected.len() {
                return Err(Error::Data(format!(
                    "row {row_idx} has {} columns, expected {}",
                    record.len(),
                    expected.len()
                )));
            }
            let k: usize = record[0]
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("row {row_idx}: bad step index")))?;
            if k != row_idx {
                return Err(Error::Data(format!("row {row_idx}: step index {k} out of order")));
            }
            let values = record
                .iter()
                .skip(1)
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Data(format!("row {row_idx}: bad number `{s}`")))
                })
                .collect::<Result<Vec<f64>>>()?;
            inputs.push(Vector::from_column_slice(&values[..n_u]));
            outputs.push(Vector::from_column_slice(&values[n_u..]));
        }
        Self::new(inputs, outputs)
    }
}

/// Predicted states and outputs of a free-run simulation.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub states: Vec<Vector>,
    pub outputs: Vec<Vector>,
    /// First step whose state escaped the magnitude bound, if any.
    pub escape: Option<usize>,
}

/// Simulates `x̂_{k+1} = f(x̂_k, u_k; θ) + δ(x̂_k, u_k; ω)` for `k < T`, `T = inputs.len() - 1`.
///
/// Stops at the first state that is non-finite or exceeds `bound` in the ∞-norm; that
/// state is included and its index reported as `escape`.
pub fn rollout(
    model: &ModelSpec,
    x0: &Vector,
    vartheta: &Vector,
    inputs: &[Vector],
    bound: f64,
) -> Result<Rollout> {
    if inputs.is_empty() {
        return Err(Error::Config("rollout needs at least one input sample".into()));
    }
    check_len("initial state", model.n_x(), x0.len())?;
    let (theta, omega) = model.split(vartheta)?;
    let horizon = inputs.len() - 1;
    let mut states = Vec::with_capacity(horizon + 1);
    let mut outputs = Vec::with_capacity(horizon + 1);
    let mut x = x0.clone();
    for k in 0..=horizon {
        outputs.push(model.output(&x));
        let out = escaped(&x, bound);
        states.push(x.clone());
        if out {
            return Ok(Rollout {
                states,
                outputs,
                escape: Some(k),
            });
        }
        if k < horizon {
            x = model.predict_step(&x, &inputs[k], &theta, &omega)?;
        }
    }
    Ok(Rollout {
        states,
        outputs,
        escape: None,
    })
}

/// Unmodeled dynamics `Δ(x, u)` of the data-generating system.
pub type Unmodeled = Arc<dyn Fn(&Vector, &Vector) -> Vector + Send + Sync>;

#[derive(Clone)]
pub struct DataGenConfig {
    pub true_theta: Vector,
    pub true_x0: Vector,
    pub noise_std_u: f64,
    pub noise_std_z: f64,
    pub unmodeled: Option<Unmodeled>,
    pub seed: u64,
}

impl fmt::Debug for DataGenConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DataGenConfig")
            .field("true_theta", &self.true_theta.as_slice())
            .field("true_x0", &self.true_x0.as_slice())
            .field("noise_std_u", &self.noise_std_u)
            .field("noise_std_z", &self.noise_std_z)
            .field("unmodeled", &self.unmodeled.is_some())
            .field("seed", &self.seed)
            .finish()
    }
}

impl DataGenConfig {
    pub fn noiseless(true_theta: Vector, true_x0: Vector) -> Self {
        Self {
            true_theta,
            true_x0,
            noise_std_u: 0.0,
            noise_std_z: 0.0,
            unmodeled: None,
            seed: 0,
        }
    }
}

/// Simulates the true system `x_{k+1} = f(x_k, u_k; θ̄) + Δ(x_k, u_k)` and returns
/// noisy measurements `ũ_k = u_k + η^u_k`, `z̃_k = h(x_k) + η^z_k`.
pub fn generate_data(model: &ModelSpec, cfg: &DataGenConfig, inputs: &[Vector]) -> Result<Trajectory> {
    check_len("true theta", model.n_theta(), cfg.true_theta.len())?;
    check_len("true x0", model.n_x(), cfg.true_x0.len())?;
    if !(cfg.noise_std_u >= 0.0 && cfg.noise_std_z >= 0.0) {
        return Err(Error::Config("noise standard deviations must be >= 0".into()));
    }
    if inputs.is_empty() {
        return Err(Error::Config("data generation needs at least one input sample".into()));
    }
    let dynamics = model.dynamics();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut measured_u = Vec::with_capacity(inputs.len());
    let mut measured_z = Vec::with_capacity(inputs.len());
    let mut x = cfg.true_x0.clone();
    for (k, u) in inputs.iter().enumerate() {
        check_len("input sample", model.n_u(), u.len())?;
        if escaped(&x, DEFAULT_ESCAPE_BOUND) {
            return Err(Error::Escape { step: k });
        }
        let noisy_u = u.map(|v| v + cfg.noise_std_u * rng.sample_normal());
        let noisy_z = dynamics
            .output(&x)
            .map(|v| v + cfg.noise_std_z * rng.sample_normal());
        measured_u.push(noisy_u);
        measured_z.push(noisy_z);
        if k + 1 < inputs.len() {
            let mut next = dynamics.step(&x, u, &cfg.true_theta)?;
            if let Some(delta) = &cfg.unmodeled {
                next += delta(&x, u);
            }
            x = next;
        }
    }
    Trajectory::new(measured_u, measured_z)
}

trait NormalSample {
    fn sample_normal(&mut self) -> f64;
}

impl NormalSample for ChaCha8Rng {
    fn sample_normal(&mut self) -> f64 {
        StandardNormal.sample(self)
    }
}

/// Evaluation point for Jacobian validation.
#[derive(Debug, Clone)]
pub struct JacobianPoint {
    pub x: Vector,
    pub u: Vector,
    pub vartheta: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacobianCheck {
    pub name: &'static str,
    pub max_deviation: f64,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct JacobianReport {
    pub checks: Vec<JacobianCheck>,
}

impl JacobianReport {
    pub fn worst(&self) -> Option<&JacobianCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.max_deviation.total_cmp(&b.max_deviation))
    }
}

fn fd_step(value: f64) -> f64 {
    1e-6 * value.abs().max(1.0)
}

/// Central-difference Jacobian of `map` at `at`.
fn central_jacobian<F>(at: &Vector, rows: usize, mut map: F) -> Result<Matrix>
where
    F: FnMut(&Vector) -> Result<Vector>,
{
    let mut jac = Matrix::zeros(rows, at.len());
    let mut probe = at.clone();
    for j in 0..at.len() {
        let h = fd_step(at[j]);
        probe[j] = at[j] + h;
        let plus = map(&probe)?;
        probe[j] = at[j] - h;
        let minus = map(&probe)?;
        probe[j] = at[j];
        jac.set_column(j, &((plus - minus) / (2.0 * h)));
    }
    Ok(jac)
}

fn compare(name: &'static str, analytic: &Matrix, numeric: &Matrix) -> Result<JacobianCheck> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::Dimension {
            what: format!("{name} shape ({}x{})", numeric.nrows(), numeric.ncols()),
            expected: numeric.len(),
            got: analytic.len(),
        });
    }
    let mut check = JacobianCheck {
        name,
        max_deviation: 0.0,
        row: 0,
        col: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for c in 0..analytic.ncols() {
        for r in 0..analytic.nrows() {
            let (a, n) = (analytic[(r, c)], numeric[(r, c)]);
            let dev = (a - n).abs() / a.abs().max(n.abs()).max(1.0);
            let dev = if dev.is_nan() { f64::INFINITY } else { dev };
            if dev > check.max_deviation || (r == 0 && c == 0) {
                check = JacobianCheck {
                    name,
                    max_deviation: dev,
                    row: r,
                    col: c,
                    analytic: a,
                    numeric: n,
                };
            }
        }
    }
    Ok(check)
}

/// Compares every declared Jacobian with central finite differences
/// (step `1e-6·max(1, |value|)`); deviation is `|a - n| / max(1, |a|, |n|)`.
pub fn jacobian_report(model: &ModelSpec, point: &JacobianPoint) -> Result<JacobianReport> {
    let (theta, omega) = model.split(&point.vartheta)?;
    check_len("state", model.n_x(), point.x.len())?;
    check_len("input", model.n_u(), point.u.len())?;
    let dynamics = model.dynamics();
    let (x, u) = (&point.x, &point.u);
    let n_x = model.n_x();
    let mut checks = Vec::new();

    let num = central_jacobian(x, n_x, |p| dynamics.step(p, u, &theta))?;
    checks.push(compare("jac_f_x", &dynamics.jac_x(x, u, &theta)?, &num)?);

    let num = central_jacobian(&theta, n_x, |p| dynamics.step(x, u, p))?;
    checks.push(compare("jac_f_theta", &dynamics.jac_theta(x, u, &theta)?, &num)?);

    let num = central_jacobian(x, model.n_z(), |p| Ok(dynamics.output(p)))?;
    checks.push(compare("jac_h_x", &dynamics.jac_output(x), &num)?);

    if let Some(c) = model.correction() {
        let num = central_jacobian(x, n_x, |p| Ok(c.eval(p, u, &omega)))?;
        checks.push(compare("jac_delta_x", &c.jac_x(x, u, &omega), &num)?);
        let num = central_jacobian(&omega, n_x, |p| Ok(c.eval(x, u, p)))?;
        checks.push(compare("jac_delta_omega", &c.jac_omega(x, u, &omega), &num)?);
    }
    Ok(JacobianReport { checks })
}

/// Like [`jacobian_report`] but fails on the first Jacobian whose deviation exceeds `tol`.
pub fn check_jacobians(model: &ModelSpec, point: &JacobianPoint, tol: f64) -> Result<JacobianReport> {
    let all = [&point.x, &point.u, &point.vartheta];
    if all.iter().any(|v| v.iter().any(|e| !e.is_finite())) {
        return Err(Error::Config("jacobian check point must be finite".into()));
    }
    let report = jacobian_report(model, point)?;
    if let Some(bad) = report.checks.iter().find(|c| c.max_deviation > tol) {
        return Err(Error::JacobianMismatch {
            jacobian: bad.name.to_string(),
            row: bad.row,
            col: bad.col,
            analytic: bad.analytic,
            numeric: bad.numeric,
            deviation: bad.max_deviation,
        });
    }
    Ok(report)
}
