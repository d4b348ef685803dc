//! Running witnesses for gradient boundedness over a forward pass.
//!
//! The report tracks the supremum of `‖∇_ϑC_k‖₂`, prefix sums of the innovation
//! norms `‖Λ_kᵀρ_k + ϱ_k‖₂` (so any window sum `Σ_{i=j}^{k-1}` is a difference of two
//! entries), the growth of the initial-condition sensitivity `‖Λ_{0,k}‖₂`, and the
//! first step at which the predicted trajectory escaped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{rollout, Matrix, ModelSpec, Vector, DEFAULT_ESCAPE_BOUND};
use crate::sensitivity::InnovationRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonitorBounds {
    /// Bound on `‖∇_ϑC_k‖₂`.
    pub grad_bound: f64,
    /// Bound on the cumulative innovation norm.
    pub sum_bound: f64,
    /// ∞-norm bound on predicted states.
    pub escape_bound: f64,
}

impl Default for MonitorBounds {
    fn default() -> Self {
        Self {
            grad_bound: 1e9,
            sum_bound: 1e9,
            escape_bound: DEFAULT_ESCAPE_BOUND,
        }
    }
}

impl MonitorBounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_bound > 0.0 && self.sum_bound > 0.0 && self.escape_bound > 0.0) {
            return Err(Error::Config("monitor bounds must be positive".into()));
        }
        Ok(())
    }
}

/// Why a report was flagged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplosionCause {
    GradientBound,
    InnovationSumBound,
    NonFinite,
    Escape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub bounds: MonitorBounds,
    pub sup_grad_norm: f64,
    /// `innovation_sums[k] = Σ_{i<k} ‖B_i‖₂`; empty in summarized mode.
    pub innovation_sums: Vec<f64>,
    pub total_innovation: f64,
    /// `‖Λ_{0,k}‖₂` per observed step; empty when norms are not tracked.
    pub lambda0_norms: Vec<f64>,
    pub escape_index: Option<usize>,
    pub exploded: bool,
    pub explosion_step: Option<usize>,
    pub explosion_cause: Option<ExplosionCause>,
    pub steps_observed: usize,
    summarized: bool,
}

impl StabilityReport {
    pub fn new(bounds: MonitorBounds) -> Self {
        Self {
            bounds,
            sup_grad_norm: 0.0,
            innovation_sums: vec![0.0],
            total_innovation: 0.0,
            lambda0_norms: Vec::new(),
            escape_index: None,
            exploded: false,
            explosion_step: None,
            explosion_cause: None,
            steps_observed: 0,
            summarized: false,
        }
    }

    /// Keeps only running totals, no per-step series.
    pub fn summarized(bounds: MonitorBounds) -> Self {
        Self {
            innovation_sums: Vec::new(),
            summarized: true,
            ..Self::new(bounds)
        }
    }

    pub fn is_summarized(&self) -> bool {
        self.summarized
    }

    fn flag(&mut self, step: usize, cause: ExplosionCause) {
        if !self.exploded {
            self.exploded = true;
            self.explosion_step = Some(step);
            self.explosion_cause = Some(cause);
        }
    }

    /// Folds in one step. Non-finite inputs flag the report and are not accumulated.
    pub fn observe(&mut self, record: &InnovationRecord, grad_norm: f64, lambda0_norm: Option<f64>) {
        let step = record.step;
        self.steps_observed += 1;
        if !record.innovation_norm.is_finite() || !grad_norm.is_finite() {
            self.flag(step, ExplosionCause::NonFinite);
            return;
        }
        self.total_innovation += record.innovation_norm;
        if !self.summarized {
            self.innovation_sums.push(self.total_innovation);
        }
        self.sup_grad_norm = self.sup_grad_norm.max(grad_norm);
        if let Some(n) = lambda0_norm {
            self.lambda0_norms.push(n);
            if !n.is_finite() {
                self.flag(step, ExplosionCause::NonFinite);
            }
        }
        if grad_norm > self.bounds.grad_bound {
            self.flag(step, ExplosionCause::GradientBound);
        }
        if self.total_innovation > self.bounds.sum_bound {
            self.flag(step, ExplosionCause::InnovationSumBound);
        }
    }

    pub fn mark_escape(&mut self, step: usize) {
        self.escape_index.get_or_insert(step);
        self.flag(step, ExplosionCause::Escape);
    }

    pub fn mark_non_finite(&mut self, step: usize) {
        self.flag(step, ExplosionCause::NonFinite);
    }

    /// `Σ_{i=j}^{k-1} ‖B_i‖₂` over stored records, `0 <= j < k <= records`.
    pub fn window_sums(&self, j: usize, k: usize) -> Result<f64> {
        let len = self.innovation_sums.len().saturating_sub(1);
        if self.summarized || j >= k || k > len {
            return Err(Error::InvalidWindow { j, k, len });
        }
        Ok(self.innovation_sums[k] - self.innovation_sums[j])
    }

    /// JSON document; per-step series are dropped unless `series` is set.
    pub fn to_json(&self, series: bool) -> Result<String> {
        let mut doc = self.clone();
        if !series {
            doc.innovation_sums.clear();
            doc.lambda0_norms.clear();
        }
        Ok(serde_json::to_string_pretty(&doc)?)
    }
}

/// First `k <= horizon` with `‖x̂_k‖_∞ > bound` or a non-finite state.
pub fn escape_time(
    model: &ModelSpec,
    x0: &Vector,
    vartheta: &Vector,
    inputs: &[Vector],
    bound: f64,
    horizon: usize,
) -> Result<Option<usize>> {
    if !(bound > 0.0) {
        return Err(Error::Config("escape bound must be positive".into()));
    }
    if horizon >= inputs.len() {
        return Err(Error::Config(format!(
            "horizon {horizon} needs {} input samples, got {}",
            horizon + 1,
            inputs.len()
        )));
    }
    Ok(rollout(model, x0, vartheta, &inputs[..=horizon], bound)?.escape)
}

/// Largest singular value by power iteration on `MᵀM` (50 iterations, relative tol 1e-10).
pub fn spectral_norm(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    if m.iter().any(|v| !v.is_finite()) {
        return f64::NAN;
    }
    let gram = m.tr_mul(m);
    let n = gram.ncols();
    let mut v = Vector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut estimate = 0.0;
    for attempt in 0..=n {
        if attempt > 0 {
            v = Vector::zeros(n);
            v[attempt - 1] = 1.0;
        }
        estimate = 0.0;
        for _ in 0..50 {
            let w = &gram * &v;
            let norm = w.norm();
            if norm == 0.0 {
                break;
            }
            let next = v.dot(&w);
            v = w / norm;
            let converged = (next - estimate).abs() <= 1e-10 * next.abs();
            estimate = next;
            if converged {
                break;
            }
        }
        if estimate > 0.0 {
            break;
        }
    }
    estimate.max(0.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::make_logistic;
    use proptest::prelude::*;

    fn record(step: usize, norm: f64) -> InnovationRecord {
        InnovationRecord {
            step,
            innovation: Vector::from_element(1, norm),
            innovation_norm: norm,
            jac_spectral_norm: None,
        }
    }

    fn v(values: &[f64]) -> Vector {
        Vector::from_column_slice(values)
    }

    #[test]
    fn constant_innovations_sum_linearly() {
        let mut r = StabilityReport::new(MonitorBounds::default());
        for k in 0..10 {
            r.observe(&record(k, 1.0), 1.0, None);
        }
        assert_eq!(r.innovation_sums[10], 10.0);
        assert_eq!(r.window_sums(0, 10).unwrap(), 10.0);
        assert_eq!(r.window_sums(9, 10).unwrap(), 1.0);
        assert!(!r.exploded);
    }

    #[test]
    fn zero_innovations() {
        let mut r = StabilityReport::new(MonitorBounds::default());
        for k in 0..5 {
            r.observe(&record(k, 0.0), 0.0, Some(1.0));
        }
        assert!(r.innovation_sums.iter().all(|s| *s == 0.0));
        assert!(!r.exploded);
        assert_eq!(r.sup_grad_norm, 0.0);
    }

    #[test]
    fn bounds_and_non_finite_flag() {
        let bounds = MonitorBounds {
            grad_bound: 10.0,
            ..Default::default()
        };
        let mut r = StabilityReport::new(bounds);
        r.observe(&record(0, 1.0), 5.0, None);
        assert!(!r.exploded);
        r.observe(&record(1, 1.0), 11.0, None);
        assert_eq!(r.explosion_cause, Some(ExplosionCause::GradientBound));
        assert_eq!(r.explosion_step, Some(1));

        let mut r = StabilityReport::new(MonitorBounds::default());
        r.observe(&record(0, f64::NAN), 0.0, None);
        assert_eq!(r.explosion_cause, Some(ExplosionCause::NonFinite));
    }

    #[test]
    fn invalid_windows() {
        let mut r = StabilityReport::new(MonitorBounds::default());
        for k in 0..3 {
            r.observe(&record(k, 1.0), 1.0, None);
        }
        assert!(r.window_sums(2, 2).is_err());
        assert!(r.window_sums(0, 4).is_err());
        let s = StabilityReport::summarized(MonitorBounds::default());
        assert!(s.window_sums(0, 1).is_err());
    }

    #[test]
    fn escape_times() {
        let m = make_logistic();
        let inputs = vec![Vector::zeros(0); 10_001];
        assert_eq!(escape_time(&m, &v(&[0.5]), &v(&[3.5]), &inputs, 1e6, 10_000).unwrap(), None);
        let kc = escape_time(&m, &v(&[0.5]), &v(&[5.0]), &inputs, 1e6, 10_000).unwrap();
        assert!(matches!(kc, Some(k) if k < 20));
        let kc = escape_time(&m, &v(&[1.2]), &v(&[4.0]), &inputs, 1e6, 10_000).unwrap();
        assert!(kc.is_some());
        assert!(escape_time(&m, &v(&[0.5]), &v(&[3.0]), &inputs, 0.0, 10).is_err());
    }

    #[test]
    fn spectral_norm_matches_svd() {
        let m = Matrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, -0.5, 0.3, 4.0, 0.0, 1.0, 1.0]);
        let svd = m.clone().svd(false, false);
        let expected = svd.singular_values.max();
        assert!((spectral_norm(&m) - expected).abs() <= 1e-8 * expected);
        assert_eq!(spectral_norm(&Matrix::identity(2, 2)), 1.0);
        assert_eq!(spectral_norm(&Matrix::zeros(2, 2)), 0.0);
        let orth = Matrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        assert!((spectral_norm(&orth) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn json_omits_series_unless_asked() {
        let mut r = StabilityReport::new(MonitorBounds::default());
        r.observe(&record(0, 2.0), 1.0, Some(1.0));
        let short: serde_json::Value = serde_json::from_str(&r.to_json(false).unwrap()).unwrap();
        assert_eq!(short["innovation_sums"].as_array().unwrap().len(), 0);
        assert_eq!(short["total_innovation"], 2.0);
        let full: StabilityReport = serde_json::from_str(&r.to_json(true).unwrap()).unwrap();
        assert_eq!(full, r);
    }

    proptest! {
        #[test]
        fn windows_match_direct_sums(norms in proptest::collection::vec(0.0f64..100.0, 1..60), a in 0usize..60, b in 0usize..60) {
            let mut r = StabilityReport::new(MonitorBounds { sum_bound: f64::MAX, ..Default::default() });
            for (k, n) in norms.iter().enumerate() {
                r.observe(&record(k, *n), 0.0, None);
            }
            let len = norms.len();
            let (j, k) = (a % len, 1 + b % len);
            prop_assume!(j < k);
            let direct: f64 = norms[j..k].iter().sum();
            let windowed = r.window_sums(j, k).unwrap();
            prop_assert!((windowed - direct).abs() <= 1e-12 * direct.max(1.0));
            for k2 in k..=len {
                prop_assert!(r.window_sums(j, k).unwrap() <= r.window_sums(j, k2).unwrap());
            }
            prop_assert!(r.innovation_sums.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
