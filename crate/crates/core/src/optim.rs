//! First-order identification loop over repeated forward sensitivity passes.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::loss::LossSpec;
use crate::model::{ModelSpec, Trajectory, Vector};
use crate::monitor::StabilityReport;
use crate::sensitivity::{full_gradient, GradientOptions, GradientPass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    GradientDescent,
    Momentum,
    Adam,
}

/// What to do when a candidate iterate produces an exploding pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplosionPolicy {
    /// Discard the candidate, halve both step sizes and retry from the previous iterate.
    #[default]
    Halve,
    /// Stop at the first explosion.
    Abort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub method: Method,
    pub step_size_vartheta: f64,
    pub step_size_x0: f64,
    pub momentum_coeff: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Stop once the cost drops below this.
    pub eps1: f64,
    /// Stop once the gradient norm drops below this.
    pub eps2: f64,
    pub max_iters: usize,
    pub estimate_x0: bool,
    pub on_explosion: ExplosionPolicy,
    pub max_halvings: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: Method::GradientDescent,
            step_size_vartheta: 1e-3,
            step_size_x0: 1e-3,
            momentum_coeff: 0.9,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            eps1: 1e-12,
            eps2: 1e-10,
            max_iters: 1000,
            estimate_x0: true,
            on_explosion: ExplosionPolicy::Halve,
            max_halvings: 5,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("step_size_vartheta", self.step_size_vartheta),
            ("step_size_x0", self.step_size_x0),
            ("eps1", self.eps1),
            ("eps2", self.eps2),
            ("adam_eps", self.adam_eps),
        ];
        for (name, value) in positive {
            if !(value > 0.0) {
                return Err(Error::Config(format!("optimizer.{name} must be positive, got {value}")));
            }
        }
        for (name, value) in [
            ("momentum_coeff", self.momentum_coeff),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&value) {
                return Err(Error::Config(format!("optimizer.{name} must lie in [0, 1), got {value}")));
            }
        }
        if self.max_iters == 0 {
            return Err(Error::Config("optimizer.max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Per-method memory carried between updates.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodState {
    first_vartheta: Vector,
    first_x0: Vector,
    second_vartheta: Vector,
    second_x0: Vector,
    t: i32,
}

impl MethodState {
    pub fn new(n_vartheta: usize, n_x: usize) -> Self {
        Self {
            first_vartheta: Vector::zeros(n_vartheta),
            first_x0: Vector::zeros(n_x),
            second_vartheta: Vector::zeros(n_vartheta),
            second_x0: Vector::zeros(n_x),
            t: 0,
        }
    }
}

/// One first-order step. `x0` is returned unchanged when `estimate_x0` is off.
pub fn update(
    state: &mut MethodState,
    vartheta: &Vector,
    x0: &Vector,
    grad_vartheta: &Vector,
    grad_x0: &Vector,
    cfg: &OptimizerConfig,
    steps: (f64, f64),
) -> (Vector, Vector) {
    let (a_v, a_x) = steps;
    state.t += 1;
    let (dv, dx) = match cfg.method {
        Method::GradientDescent => (grad_vartheta * a_v, grad_x0 * a_x),
        Method::Momentum => {
            let mu = cfg.momentum_coeff;
            state.first_vartheta = &state.first_vartheta * mu + grad_vartheta;
            state.first_x0 = &state.first_x0 * mu + grad_x0;
            (&state.first_vartheta * a_v, &state.first_x0 * a_x)
        }
        Method::Adam => {
            let (b1, b2, eps, t) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, state.t);
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let adam = |m: &mut Vector, v: &mut Vector, g: &Vector, a: f64| -> Vector {
                *m = &*m * b1 + g * (1.0 - b1);
                *v = &*v * b2 + g.component_mul(g) * (1.0 - b2);
                Vector::from_fn(g.len(), |i, _| a * (m[i] / c1) / ((v[i] / c2).sqrt() + eps))
            };
            let dv = adam(&mut state.first_vartheta, &mut state.second_vartheta, grad_vartheta, a_v);
            let dx = adam(&mut state.first_x0, &mut state.second_x0, grad_x0, a_x);
            (dv, dx)
        }
    };
    let new_x0 = if cfg.estimate_x0 { x0 - dx } else { x0.clone() };
    (vartheta - dv, new_x0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationLog {
    pub iter: usize,
    pub cost: f64,
    /// `‖[∇_ϑC; ∇_{x0}C]‖₂`.
    pub grad_norm: f64,
    pub vartheta: Vector,
    pub x0: Vector,
    pub explosion: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    CostBelowThreshold,
    GradientBelowThreshold,
    MaxIterations,
    Exploded,
}

impl Status {
    pub fn converged(self) -> bool {
        matches!(self, Status::CostBelowThreshold | Status::GradientBelowThreshold)
    }
}

#[derive(Debug, Clone)]
pub struct Identification {
    /// Final estimate; the lowest-cost accepted iterate when the budget ran out.
    pub vartheta: Vector,
    pub x0: Vector,
    pub cost: f64,
    pub status: Status,
    /// Accepted iterates, interleaved with rejected (exploding) candidates.
    pub logs: Vec<IterationLog>,
    /// Monitor of the last accepted pass.
    pub report: StabilityReport,
    /// Monitor of the first exploding pass, if any.
    pub explosion_report: Option<StabilityReport>,
}

impl Identification {
    pub fn exploded(&self) -> bool {
        self.explosion_report.is_some()
    }
}

fn log_entry(iter: usize, pass: &GradientPass, vartheta: &Vector, x0: &Vector) -> IterationLog {
    IterationLog {
        iter,
        cost: pass.cost,
        grad_norm: pass.grad_norm(),
        vartheta: vartheta.clone(),
        x0: x0.clone(),
        explosion: pass.exploded(),
    }
}

/// Repeats forward passes and first-order updates until `C < ε₁`, `‖∇C‖₂ < ε₂` or the
/// iteration budget runs out.
pub fn identify(
    model: &ModelSpec,
    loss: &LossSpec,
    traj: &Trajectory,
    init_vartheta: &Vector,
    init_x0: &Vector,
    cfg: &OptimizerConfig,
    grad_opts: &GradientOptions,
) -> Result<Identification> {
    cfg.validate()?;
    check_len("initial vartheta", model.n_vartheta(), init_vartheta.len())?;
    check_len("initial state", model.n_x(), init_x0.len())?;
    if init_vartheta.iter().chain(init_x0.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Config("initial guesses must be finite".into()));
    }

    let mut vartheta = init_vartheta.clone();
    let mut x0 = init_x0.clone();
    let mut pass = full_gradient(model, loss, traj, &x0, &vartheta, grad_opts)?;
    let mut logs = vec![log_entry(0, &pass, &vartheta, &x0)];
    let finish = |vartheta, x0, cost, status, logs, report, explosion_report| Identification {
        vartheta,
        x0,
        cost,
        status,
        logs,
        report,
        explosion_report,
    };
    if pass.exploded() {
        let report = pass.report.clone();
        return Ok(finish(vartheta, x0, pass.cost, Status::Exploded, logs, report.clone(), Some(report)));
    }

    let mut state = MethodState::new(vartheta.len(), x0.len());
    let mut steps = (cfg.step_size_vartheta, cfg.step_size_x0);
    let mut halvings = 0;
    let mut explosion_report = None;
    let mut best = (pass.cost, vartheta.clone(), x0.clone());
    let mut iter = 0;
    loop {
        if pass.cost < cfg.eps1 || pass.grad_norm() < cfg.eps2 {
            let status = if pass.cost < cfg.eps1 {
                Status::CostBelowThreshold
            } else {
                Status::GradientBelowThreshold
            };
            return Ok(finish(vartheta, x0, pass.cost, status, logs, pass.report, explosion_report));
        }
        if iter == cfg.max_iters {
            let (cost, vartheta, x0) = best;
            return Ok(finish(vartheta, x0, cost, Status::MaxIterations, logs, pass.report, explosion_report));
        }
        iter += 1;

        let saved = state.clone();
        let (cand_v, cand_x) = update(&mut state, &vartheta, &x0, &pass.grad_vartheta, &pass.grad_x0, cfg, steps);
        let candidate = full_gradient(model, loss, traj, &cand_x, &cand_v, grad_opts)?;
        logs.push(log_entry(iter, &candidate, &cand_v, &cand_x));
        if candidate.exploded() {
            explosion_report.get_or_insert_with(|| candidate.report.clone());
            if cfg.on_explosion == ExplosionPolicy::Abort || halvings == cfg.max_halvings {
                let report = candidate.report;
                return Ok(finish(vartheta, x0, pass.cost, Status::Exploded, logs, report, explosion_report));
            }
            halvings += 1;
            steps = (steps.0 * 0.5, steps.1 * 0.5);
            state = saved;
            continue;
        }
        vartheta = cand_v;
        x0 = cand_x;
        pass = candidate;
        if pass.cost < best.0 {
            best = (pass.cost, vartheta.clone(), x0.clone());
        }
    }
}

fn log_header(n_vartheta: usize, n_x: usize) -> Vec<String> {
    let mut h = vec!["iter".to_string(), "cost".into(), "grad_norm".into()];
    h.extend((1..=n_vartheta).map(|i| format!("theta_{i}")));
    h.extend((1..=n_x).map(|i| format!("x0_{i}")));
    h.push("explosion".into());
    h
}

/// Writes `iter,cost,grad_norm,theta_1..,x0_1..,explosion`.
pub fn write_logs<W: Write>(logs: &[IterationLog], n_vartheta: usize, n_x: usize, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(log_header(n_vartheta, n_x))?;
    for log in logs {
        check_len("logged vartheta", n_vartheta, log.vartheta.len())?;
        check_len("logged x0", n_x, log.x0.len())?;
        let mut rec = vec![log.iter.to_string(), log.cost.to_string(), log.grad_norm.to_string()];
        rec.extend(log.vartheta.iter().chain(log.x0.iter()).map(f64::to_string));
        rec.push(log.explosion.to_string());
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_logs<R: Read>(reader: R) -> Result<Vec<IterationLog>> {
    let mut r = csv::Reader::from_reader(reader);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let n_vartheta = header.iter().filter(|h| h.starts_with("theta_")).count();
    let n_x = header.iter().filter(|h| h.starts_with("x0_")).count();
    if header != log_header(n_vartheta, n_x) {
        return Err(Error::Data(format!("unexpected iteration log header {header:?}")));
    }
    let mut logs = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| Error::Data(format!("bad number '{}' in column {}", &rec[i], header[i])))
        };
        let explosion = match &rec[header.len() - 1] {
            "true" => true,
            "false" => false,
            other => return Err(Error::Data(format!("bad explosion flag '{other}'"))),
        };
        logs.push(IterationLog {
            iter: rec[0].parse().map_err(|_| Error::Data(format!("bad iteration '{}'", &rec[0])))?,
            cost: num(1)?,
            grad_norm: num(2)?,
            vartheta: Vector::from_iterator(n_vartheta, (3..3 + n_vartheta).map(num).collect::<Result<Vec<_>>>()?),
            x0: Vector::from_iterator(n_x, (3 + n_vartheta..3 + n_vartheta + n_x).map(num).collect::<Result<Vec<_>>>()?),
            explosion,
        });
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(values: &[f64]) -> Vector {
        Vector::from_column_slice(values)
    }

    fn step(cfg: &OptimizerConfig, g: f64) -> f64 {
        let mut state = MethodState::new(1, 1);
        let (nv, _) = update(&mut state, &v(&[1.0]), &v(&[0.0]), &v(&[g]), &v(&[0.0]), cfg, (0.1, 0.1));
        nv[0]
    }

    #[test]
    fn gradient_descent_step() {
        let cfg = OptimizerConfig::default();
        assert!((step(&cfg, 2.0) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_momentum_is_gradient_descent() {
        let gd = OptimizerConfig::default();
        let mom = OptimizerConfig {
            method: Method::Momentum,
            momentum_coeff: 0.0,
            ..Default::default()
        };
        let (mut s1, mut s2) = (MethodState::new(2, 1), MethodState::new(2, 1));
        let (mut a, mut b) = (v(&[1.0, -2.0]), v(&[1.0, -2.0]));
        for g in [[0.3, 1.0], [-2.0, 0.5], [4.0, 4.0]] {
            a = update(&mut s1, &a, &v(&[0.0]), &v(&g), &v(&[0.0]), &gd, (0.1, 0.1)).0;
            b = update(&mut s2, &b, &v(&[0.0]), &v(&g), &v(&[0.0]), &mom, (0.1, 0.1)).0;
        }
        assert_eq!(a, b);
    }

    #[test]
    fn adam_first_step_is_sign_scaled() {
        let cfg = OptimizerConfig {
            method: Method::Adam,
            ..Default::default()
        };
        for g in [3.0, -0.02, 150.0] {
            let moved = 1.0 - step(&cfg, g);
            assert!((moved - 0.1 * g.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn fixed_initial_state() {
        let cfg = OptimizerConfig {
            estimate_x0: false,
            ..Default::default()
        };
        let mut state = MethodState::new(1, 1);
        let (_, x) = update(&mut state, &v(&[1.0]), &v(&[0.7]), &v(&[1.0]), &v(&[5.0]), &cfg, (0.1, 0.1));
        assert_eq!(x[0], 0.7);
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        for bad in [
            OptimizerConfig { step_size_vartheta: 0.0, ..Default::default() },
            OptimizerConfig { eps2: -1.0, ..Default::default() },
            OptimizerConfig { momentum_coeff: 1.0, ..Default::default() },
            OptimizerConfig { max_iters: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        let err = serde_json::from_str::<OptimizerConfig>(r#"{"step": 1}"#).unwrap_err();
        assert!(err.to_string().contains("unknown field"));
        let parsed: OptimizerConfig = serde_json::from_str(r#"{"method": "gradient-descent", "on_explosion": "abort"}"#).unwrap();
        assert_eq!(parsed.on_explosion, ExplosionPolicy::Abort);
    }

    #[test]
    fn log_round_trip() {
        let logs = vec![
            IterationLog {
                iter: 0,
                cost: 0.1 + 0.2,
                grad_norm: 1e-300,
                vartheta: v(&[3.95, -1.0 / 3.0]),
                x0: v(&[0.123456789012345678]),
                explosion: false,
            },
            IterationLog {
                iter: 1,
                cost: f64::INFINITY,
                grad_norm: 2.5,
                vartheta: v(&[4.01, 0.0]),
                x0: v(&[0.5]),
                explosion: true,
            },
        ];
        let mut buf = Vec::new();
        write_logs(&logs, 2, 1, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("iter,cost,grad_norm,theta_1,theta_2,x0_1,explosion\n"));
        assert_eq!(read_logs(buf.as_slice()).unwrap(), logs);
    }
}
