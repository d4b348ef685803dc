//! Forward sensitivity recursions for the multi-step cost.
//!
//! Along a rollout the memory matrices evolve as a linear parameter-varying system
//!
//! ```text
//! Λ_k      = J^{x/x}_k Λ_{k-1} + J^{x/ϑ}_k        Λ_0     = 0
//! Λ_{0,k}  = J^{x/x}_k Λ_{0,k-1}                   Λ_{0,0} = I
//! ∇_ϑC_k   = ∇_ϑC_{k-1}  + Λ_kᵀρ_k + ϱ_k          ∇_ϑC_0  = ϱ_0
//! ∇_{x0}C_k = ∇_{x0}C_{k-1} + Λ_{0,k}ᵀρ_k         ∇_{x0}C_0 = ρ_0
//! ```
//!
//! where `J^{x/x}_k = ∂x̂_k/∂x̂_{k-1}` and `J^{x/ϑ}_k = ∂x̂_k/∂ϑ` (direct part only) are
//! evaluated at `(x̂_{k-1}, ũ_{k-1})`. One pass costs `O(T n_x² n_ϑ)`.

use crate::error::{check_len, Result};
use crate::loss::{LossSpec, StepSeed};
use crate::model::{escaped, Matrix, ModelSpec, Trajectory, Vector};
use crate::monitor::{spectral_norm, MonitorBounds, StabilityReport};

/// Euclidean norm of the concatenation of `parts`, scaled to avoid overflow.
pub fn stable_norm(parts: &[&Vector]) -> f64 {
    let mut scale = 0.0_f64;
    for x in parts.iter().flat_map(|v| v.iter()) {
        if x.is_nan() {
            return f64::NAN;
        }
        scale = scale.max(x.abs());
    }
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    let sum: f64 = parts.iter().flat_map(|v| v.iter()).map(|x| (x / scale).powi(2)).sum();
    scale * sum.sqrt()
}

/// Horizons above this keep only running monitor totals unless told otherwise.
pub const SUMMARY_HORIZON: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityState {
    /// `Λ_k = dx̂_k/dϑ`, `n_x × n_ϑ`.
    pub lambda: Matrix,
    /// `Λ_{0,k} = dx̂_k/dx̂_0`, `n_x × n_x`.
    pub lambda0: Matrix,
    pub grad_vartheta: Vector,
    pub grad_x0: Vector,
    pub k: usize,
}

/// Per-step gradient increment `B_k = Λ_kᵀρ_k + ϱ_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct InnovationRecord {
    pub step: usize,
    pub innovation: Vector,
    pub innovation_norm: f64,
    /// `‖J^{x/x}_k‖₂`; absent at `k = 0` or when norms are not tracked.
    pub jac_spectral_norm: Option<f64>,
}

impl InnovationRecord {
    fn new(step: usize, innovation: Vector) -> Self {
        Self {
            step,
            innovation_norm: stable_norm(&[&innovation]),
            innovation,
            jac_spectral_norm: None,
        }
    }
}

/// State at `k = 0` together with its innovation record (`B_0 = ϱ_0`).
pub fn init_state(n_x: usize, n_vartheta: usize, seed0: &StepSeed) -> (SensitivityState, InnovationRecord) {
    let state = SensitivityState {
        lambda: Matrix::zeros(n_x, n_vartheta),
        lambda0: Matrix::identity(n_x, n_x),
        grad_vartheta: seed0.varrho.clone(),
        grad_x0: seed0.rho.clone(),
        k: 0,
    };
    (state, InnovationRecord::new(0, seed0.varrho.clone()))
}

impl SensitivityState {
    /// Parameter recursion for step `self.k + 1`; does not advance `k`.
    pub fn step_theta(&mut self, jac_x_x: &Matrix, jac_x_vartheta: &Matrix, seed: &StepSeed) -> InnovationRecord {
        self.lambda = jac_x_x * &self.lambda + jac_x_vartheta;
        let innovation = self.lambda.tr_mul(&seed.rho) + &seed.varrho;
        self.grad_vartheta += &innovation;
        InnovationRecord::new(self.k + 1, innovation)
    }

    /// Initial-condition recursion for step `self.k + 1`; does not advance `k`.
    pub fn step_x0(&mut self, jac_x_x: &Matrix, seed: &StepSeed) {
        self.lambda0 = jac_x_x * &self.lambda0;
        self.grad_x0 += self.lambda0.tr_mul(&seed.rho);
    }

    /// Both recursions, then `k += 1`.
    pub fn advance(&mut self, jac_x_x: &Matrix, jac_x_vartheta: &Matrix, seed: &StepSeed) -> InnovationRecord {
        let record = self.step_theta(jac_x_x, jac_x_vartheta, seed);
        self.step_x0(jac_x_x, seed);
        self.k += 1;
        record
    }

    pub fn is_finite(&self) -> bool {
        [&self.lambda, &self.lambda0]
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()))
            && self.grad_vartheta.iter().chain(self.grad_x0.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RecordMode {
    /// Keep per-step records unless the horizon exceeds [`SUMMARY_HORIZON`].
    #[default]
    Auto,
    All,
    Summary,
}

#[derive(Debug, Clone, Copy)]
pub struct GradientOptions {
    pub bounds: MonitorBounds,
    /// Compute `‖J^{x/x}_k‖₂` and `‖Λ_{0,k}‖₂` each step.
    pub track_norms: bool,
    pub records: RecordMode,
}

impl Default for GradientOptions {
    fn default() -> Self {
        Self {
            bounds: MonitorBounds::default(),
            track_norms: true,
            records: RecordMode::Auto,
        }
    }
}

impl GradientOptions {
    /// Bare recursion: no norm tracking, records summarized. Used for timing.
    pub fn lean() -> Self {
        Self {
            bounds: MonitorBounds {
                grad_bound: f64::INFINITY,
                sum_bound: f64::INFINITY,
                ..MonitorBounds::default()
            },
            track_norms: false,
            records: RecordMode::Summary,
        }
    }
}

/// Result of one forward pass.
#[derive(Debug, Clone)]
pub struct GradientPass {
    pub grad_vartheta: Vector,
    pub grad_x0: Vector,
    /// `C = Σ_k L_k` over the completed steps.
    pub cost: f64,
    pub records: Vec<InnovationRecord>,
    pub report: StabilityReport,
    /// Last step folded into the gradients (`T` for a complete pass).
    pub last_step: Option<usize>,
    /// States `x̂_0..x̂_{last_step}`.
    pub states: Vec<Vector>,
}

impl GradientPass {
    pub fn exploded(&self) -> bool {
        self.report.exploded
    }

    /// `‖[∇_ϑC; ∇_{x0}C]‖₂`.
    pub fn grad_norm(&self) -> f64 {
        stable_norm(&[&self.grad_vartheta, &self.grad_x0])
    }
}

fn check_inputs(model: &ModelSpec, loss: &LossSpec, traj: &Trajectory, x0: &Vector, vartheta: &Vector) -> Result<()> {
    traj.check_model(model)?;
    check_len("initial state", model.n_x(), x0.len())?;
    check_len("vartheta", model.n_vartheta(), vartheta.len())?;
    loss.validate(model.n_x(), model.n_z())
}

/// One forward pass: rollout interleaved with the sensitivity recursions.
///
/// The first non-finite value or escaped state stops the pass; gradients and cost then
/// cover steps `0..k-1` and the report carries the explosion flag and step.
pub fn full_gradient(
    model: &ModelSpec,
    loss: &LossSpec,
    traj: &Trajectory,
    x0: &Vector,
    vartheta: &Vector,
    opts: &GradientOptions,
) -> Result<GradientPass> {
    check_inputs(model, loss, traj, x0, vartheta)?;
    let (n_x, n_vartheta) = (model.n_x(), model.n_vartheta());
    let horizon = traj.horizon();
    let summarize = match opts.records {
        RecordMode::Auto => horizon > SUMMARY_HORIZON,
        RecordMode::All => false,
        RecordMode::Summary => true,
    };
    let mut report = if summarize {
        StabilityReport::summarized(opts.bounds)
    } else {
        StabilityReport::new(opts.bounds)
    };
    let mut records = Vec::new();
    let pass = |state: &SensitivityState, cost, report, records, last_step, states| GradientPass {
        grad_vartheta: state.grad_vartheta.clone(),
        grad_x0: state.grad_x0.clone(),
        cost,
        records,
        report,
        last_step,
        states,
    };

    let zs = traj.outputs();
    let us = traj.inputs();
    let mut x = x0.clone();
    let mut states = vec![x.clone()];
    if escaped(&x, opts.bounds.escape_bound) {
        report.mark_escape(0);
        let empty = SensitivityState {
            lambda: Matrix::zeros(n_x, n_vartheta),
            lambda0: Matrix::identity(n_x, n_x),
            grad_vartheta: Vector::zeros(n_vartheta),
            grad_x0: Vector::zeros(n_x),
            k: 0,
        };
        return Ok(pass(&empty, 0.0, report, records, None, states));
    }

    let e = model.output(&x) - &zs[0];
    let mut cost = loss.value(&e, &x, vartheta);
    let seed = loss.step_seed(&e, &x, vartheta, &model.jac_output(&x));
    let (mut state, record) = init_state(n_x, n_vartheta, &seed);
    report.observe(&record, stable_norm(&[&state.grad_vartheta]), opts.track_norms.then_some(1.0));
    if !summarize {
        records.push(record);
    }
    if !cost.is_finite() || !state.is_finite() {
        report.mark_non_finite(0);
        return Ok(pass(&state, cost, report, records, Some(0), states));
    }

    for k in 1..=horizon {
        let u = &us[k - 1];
        let jac_x = model.jac_state(&x, u, vartheta)?;
        let jac_p = model.jac_params(&x, u, vartheta)?;
        let next = model.step(&x, u, vartheta)?;
        if escaped(&next, opts.bounds.escape_bound) {
            report.mark_escape(k);
            return Ok(pass(&state, cost, report, records, Some(k - 1), states));
        }
        let e = model.output(&next) - &zs[k];
        let step_cost = loss.value(&e, &next, vartheta);
        let seed = loss.step_seed(&e, &next, vartheta, &model.jac_output(&next));

        let previous = (state.grad_vartheta.clone(), state.grad_x0.clone());
        let mut record = state.advance(&jac_x, &jac_p, &seed);
        if !step_cost.is_finite() || !state.is_finite() || jac_x.iter().any(|v| !v.is_finite()) {
            (state.grad_vartheta, state.grad_x0) = previous;
            report.mark_non_finite(k);
            return Ok(pass(&state, cost, report, records, Some(k - 1), states));
        }
        cost += step_cost;
        let lambda0_norm = if opts.track_norms {
            record.jac_spectral_norm = Some(spectral_norm(&jac_x));
            Some(spectral_norm(&state.lambda0))
        } else {
            None
        };
        report.observe(&record, stable_norm(&[&state.grad_vartheta]), lambda0_norm);
        if !summarize {
            records.push(record);
        }
        x = next;
        states.push(x.clone());
    }
    Ok(pass(&state, cost, report, records, Some(horizon), states))
}

/// Multi-step cost by plain rollout, independent of the recursion.
/// Returns the escape step instead of a cost if the trajectory leaves `bound`.
pub fn multi_step_cost(
    model: &ModelSpec,
    loss: &LossSpec,
    traj: &Trajectory,
    x0: &Vector,
    vartheta: &Vector,
    bound: f64,
) -> Result<std::result::Result<f64, usize>> {
    check_inputs(model, loss, traj, x0, vartheta)?;
    let r = crate::model::rollout(model, x0, vartheta, traj.inputs(), bound)?;
    if let Some(k) = r.escape {
        return Ok(Err(k));
    }
    let cost = r
        .states
        .iter()
        .zip(&r.outputs)
        .zip(traj.outputs())
        .map(|((x, zhat), z)| loss.value(&(zhat - z), x, vartheta))
        .sum();
    Ok(Ok(cost))
}
