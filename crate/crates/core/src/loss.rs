//! Per-step losses, exponential state barriers, ridge regularization and the
//! gradient seeds `ρ_k = ∂L_k/∂x̂_k`, `ϱ_k = ∂L_k/∂ϑ` consumed by the sensitivity recursion.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::model::{Matrix, Vector};

/// `λ Σ_i exp(α(x̂_i - ub_i)) + λ Σ_i exp(α(lb_i - x̂_i))`. Infinite bounds disable a side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierTerm {
    #[serde(with = "bounds")]
    pub lower: Vec<f64>,
    #[serde(with = "bounds")]
    pub upper: Vec<f64>,
    pub lambda: f64,
    pub alpha: f64,
}

/// JSON has no infinities; `null` stands for an unbounded side.
mod bounds {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let opts: Vec<Option<f64>> = values.iter().map(|v| v.is_finite().then_some(*v)).collect();
        serde::Serialize::serialize(&opts, s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let opts: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(opts.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect())
    }
}

impl BarrierTerm {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, lambda: f64, alpha: f64) -> Result<Self> {
        let b = Self {
            lower,
            upper,
            lambda,
            alpha,
        };
        b.validate()?;
        Ok(b)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        check_len("barrier upper bound", self.lower.len(), self.upper.len())?;
        if !(self.lambda > 0.0 && self.alpha > 0.0) {
            return Err(Error::Config("barrier lambda and alpha must be positive".into()));
        }
        Ok(())
    }

    fn lower_at(&self, i: usize) -> Option<f64> {
        let lb = self.lower[i];
        lb.is_finite().then_some(lb)
    }

    fn upper_at(&self, i: usize) -> Option<f64> {
        let ub = self.upper[i];
        ub.is_finite().then_some(ub)
    }

    pub fn value(&self, x: &Vector) -> f64 {
        let mut total = 0.0;
        for (i, &xi) in x.iter().enumerate() {
            if let Some(ub) = self.upper_at(i) {
                total += self.lambda * (self.alpha * (xi - ub)).exp();
            }
            if let Some(lb) = self.lower_at(i) {
                total += self.lambda * (self.alpha * (lb - xi)).exp();
            }
        }
        total
    }

    pub fn gradient(&self, x: &Vector) -> Vector {
        Vector::from_fn(x.len(), |i, _| {
            let mut g = 0.0;
            if let Some(ub) = self.upper_at(i) {
                g += self.lambda * self.alpha * (self.alpha * (x[i] - ub)).exp();
            }
            if let Some(lb) = self.lower_at(i) {
                g -= self.lambda * self.alpha * (self.alpha * (lb - x[i])).exp();
            }
            g
        })
    }
}

/// Extra loss term with direct dependence on the state and the parameters.
pub trait ParamPenalty: Send + Sync {
    fn value(&self, x_hat: &Vector, vartheta: &Vector) -> f64;
    fn grad_x(&self, x_hat: &Vector, vartheta: &Vector) -> Vector;
    fn grad_vartheta(&self, x_hat: &Vector, vartheta: &Vector) -> Vector;
}

/// `L_k = eᵀWe + Σ barriers(x̂) + γ‖ϑ‖² (+ optional penalty hook)`.
#[derive(Clone)]
pub struct LossSpec {
    pub weights: Matrix,
    pub barriers: Vec<BarrierTerm>,
    pub ridge: f64,
    pub penalty: Option<Arc<dyn ParamPenalty>>,
}

impl fmt::Debug for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LossSpec")
            .field("weights", &self.weights)
            .field("barriers", &self.barriers)
            .field("ridge", &self.ridge)
            .field("penalty", &self.penalty.is_some())
            .finish()
    }
}

/// Gradient seeds of one loss term.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSeed {
    pub rho: Vector,
    pub varrho: Vector,
}

impl StepSeed {
    pub fn zeros(n_x: usize, n_vartheta: usize) -> Self {
        Self {
            rho: Vector::zeros(n_x),
            varrho: Vector::zeros(n_vartheta),
        }
    }
}

impl LossSpec {
    /// Unweighted squared error `eᵀe`.
    pub fn squared_error(n_z: usize) -> Self {
        Self {
            weights: Matrix::identity(n_z, n_z),
            barriers: Vec::new(),
            ridge: 0.0,
            penalty: None,
        }
    }

    pub fn with_barrier(mut self, barrier: BarrierTerm) -> Self {
        self.barriers.push(barrier);
        self
    }

    pub fn with_ridge(mut self, ridge: f64) -> Self {
        self.ridge = ridge;
        self
    }

    /// Multiplies every term of the loss by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.weights *= c;
        out.ridge *= c;
        for b in &mut out.barriers {
            b.lambda *= c;
        }
        out
    }

    pub fn validate(&self, n_x: usize, n_z: usize) -> Result<()> {
        if self.weights.shape() != (n_z, n_z) {
            return Err(Error::Dimension {
                what: "loss weight matrix".into(),
                expected: n_z * n_z,
                got: self.weights.len(),
            });
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::Config("ridge coefficient must be >= 0".into()));
        }
        for b in &self.barriers {
            b.validate()?;
            check_len("barrier bounds", n_x, b.lower.len())?;
        }
        Ok(())
    }

    pub fn value(&self, e: &Vector, x_hat: &Vector, vartheta: &Vector) -> f64 {
        let mut total = e.dot(&(&self.weights * e));
        total += self.barriers.iter().map(|b| b.value(x_hat)).sum::<f64>();
        if self.ridge != 0.0 {
            total += self.ridge * vartheta.norm_squared();
        }
        if let Some(p) = &self.penalty {
            total += p.value(x_hat, vartheta);
        }
        total
    }

    /// `ρ = J^{z/x}ᵀ (W + Wᵀ) e + ∇ₓ barriers`, `ϱ = 2γϑ`, plus hook gradients.
    /// The error convention is `e = ẑ - z̃`, so `J^{e/z}` is the identity.
    pub fn step_seed(&self, e: &Vector, x_hat: &Vector, vartheta: &Vector, jac_h_x: &Matrix) -> StepSeed {
        let grad_e = &self.weights * e + self.weights.tr_mul(e);
        let mut rho = jac_h_x.tr_mul(&grad_e);
        for b in &self.barriers {
            rho += b.gradient(x_hat);
        }
        let mut varrho = vartheta * (2.0 * self.ridge);
        if let Some(p) = &self.penalty {
            rho += p.grad_x(x_hat, vartheta);
            varrho += p.grad_vartheta(x_hat, vartheta);
        }
        StepSeed { rho, varrho }
    }
}

/// Free-function form of [`LossSpec::value`].
pub fn loss_value(spec: &LossSpec, e: &Vector, x_hat: &Vector, vartheta: &Vector) -> f64 {
    spec.value(e, x_hat, vartheta)
}

/// Free-function form of [`LossSpec::step_seed`].
pub fn step_seed(spec: &LossSpec, e: &Vector, x_hat: &Vector, vartheta: &Vector, jac_h_x: &Matrix) -> StepSeed {
    spec.step_seed(e, x_hat, vartheta, jac_h_x)
}
