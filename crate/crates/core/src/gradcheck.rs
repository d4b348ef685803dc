//! Oracle agreement runner: recursive vs naive vs finite-difference gradients, plus
//! analytic Jacobian checks, on random problems in each model's stable region.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossSpec;
use crate::model::{generate_data, jacobian_report, DataGenConfig, JacobianCheck, JacobianPoint, ModelSpec, Trajectory, Vector};
use crate::oracle::{fd_gradient, naive_gradient, relative_error, DEFAULT_H_REL};
use crate::sensitivity::{full_gradient, GradientOptions};

/// A random identification problem: data, initial state and evaluation point.
#[derive(Debug, Clone)]
pub struct Problem {
    pub traj: Trajectory,
    pub x0: Vector,
    pub vartheta: Vector,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vector {
    Vector::from_fn(n, |_, _| rng.random_range(lo..hi))
}

/// Samples a problem of horizon `T` in the stable region of a built-in model.
///
/// Data come from a nearby "true" parameter with small measurement noise; correction
/// coefficients, if any, are drawn small.
pub fn random_problem(model: &ModelSpec, horizon: usize, rng: &mut ChaCha8Rng) -> Result<Problem> {
    let (true_theta, theta, x0, input_std) = match model.name() {
        "logistic" => (uniform(rng, 1, 1.5, 3.4), uniform(rng, 1, 1.5, 3.4), uniform(rng, 1, 0.1, 0.9), 0.0),
        "linear" => (uniform(rng, 1, -0.95, 0.95), uniform(rng, 1, -0.95, 0.95), uniform(rng, 1, -1.0, 1.0), 0.0),
        "euler" => {
            let truth = uniform(rng, 3, 1.0, 3.0);
            let guess = truth.map(|t| t * rng.random_range(0.9..1.1));
            (truth, guess, uniform(rng, 3, -0.5, 0.5), 0.1)
        }
        other => return Err(Error::Config(format!("no stable-region sampler for model `{other}`"))),
    };
    let inputs: Vec<Vector> = (0..=horizon)
        .map(|_| Vector::from_fn(model.n_u(), |_, _| input_std * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let mut cfg = DataGenConfig::noiseless(true_theta, x0.clone());
    cfg.noise_std_z = 0.01;
    cfg.seed = rng.random();
    let traj = generate_data(model, &cfg, &inputs)?;
    let omega = uniform(rng, model.n_omega(), -0.01, 0.01);
    let vartheta = model.vartheta(&theta, &omega)?;
    Ok(Problem { traj, x0, vartheta })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub fd_rtol: f64,
    pub fd_atol: f64,
    pub exact_rtol: f64,
    pub jacobian_tol: f64,
    pub h_rel: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            fd_rtol: 1e-5,
            fd_atol: 1e-8,
            exact_rtol: 1e-10,
            jacobian_tol: 1e-5,
            h_rel: DEFAULT_H_REL,
        }
    }
}

/// One comparison between two gradient sources.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub model: String,
    pub pair: &'static str,
    pub horizon: usize,
    pub point: usize,
    /// `‖a - b‖∞ / max(‖a‖∞, ‖b‖∞)`.
    pub rel_error: f64,
    pub abs_error: f64,
    pub tolerance: f64,
    pub atol: f64,
}

impl Comparison {
    pub fn passed(&self) -> bool {
        self.rel_error <= self.tolerance || self.abs_error <= self.atol
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} T={} point {}: relative error {:.3e} (tolerance {:.0e}), absolute {:.3e}",
            self.model, self.pair, self.horizon, self.point, self.rel_error, self.tolerance, self.abs_error
        )
    }
}

fn compare(model: &str, pair: &'static str, horizon: usize, point: usize, a: &Vector, b: &Vector, tol: f64, atol: f64) -> Comparison {
    Comparison {
        model: model.to_string(),
        pair,
        horizon,
        point,
        rel_error: relative_error(a, b),
        abs_error: if a.iter().chain(b.iter()).all(|v| v.is_finite()) { (a - b).amax() } else { f64::INFINITY },
        tolerance: tol,
        atol,
    }
}

/// All three pairwise comparisons at one problem.
pub fn oracle_triangle(model: &ModelSpec, loss: &LossSpec, problem: &Problem, tol: &Tolerances, point: usize) -> Result<Vec<Comparison>> {
    let Problem { traj, x0, vartheta } = problem;
    let name = model.name();
    let horizon = traj.horizon();
    let full = full_gradient(model, loss, traj, x0, vartheta, &GradientOptions::default())?;
    if full.exploded() {
        return Err(Error::Escape {
            step: full.report.explosion_step.unwrap_or(0),
        });
    }
    let naive = naive_gradient(model, loss, traj, x0, vartheta)?;
    let (fd_v, fd_x) = fd_gradient(model, loss, traj, x0, vartheta, tol.h_rel)?;
    let stacked = |a: &Vector, b: &Vector| Vector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied());
    Ok(vec![
        compare(name, "recursive/naive", horizon, point, &full.grad_vartheta, &naive, tol.exact_rtol, 0.0),
        compare(
            name,
            "recursive/finite-difference",
            horizon,
            point,
            &stacked(&full.grad_vartheta, &full.grad_x0),
            &stacked(&fd_v, &fd_x),
            tol.fd_rtol,
            tol.fd_atol,
        ),
        compare(name, "naive/finite-difference", horizon, point, &naive, &fd_v, tol.fd_rtol, tol.fd_atol),
    ])
}

/// Outcome of a gradient check sweep.
#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub comparisons: Vec<Comparison>,
    /// `(model, check)` for every Jacobian evaluation.
    pub jacobians: Vec<(String, JacobianCheck)>,
    pub jacobian_tol: f64,
}

impl GradcheckReport {
    pub fn worst_jacobian(&self) -> Option<&(String, JacobianCheck)> {
        self.jacobians
            .iter()
            .max_by(|a, b| a.1.max_deviation.total_cmp(&b.1.max_deviation))
    }

    /// Largest violation relative to its tolerance; the largest error when all pass.
    pub fn worst_comparison(&self) -> Option<&Comparison> {
        let ratio = |a: &&Comparison, b: &&Comparison| (a.rel_error / a.tolerance).total_cmp(&(b.rel_error / b.tolerance));
        let failed = self.comparisons.iter().filter(|c| !c.passed()).max_by(ratio);
        failed.or_else(|| self.comparisons.iter().max_by(ratio))
    }

    pub fn failures(&self) -> usize {
        self.comparisons.iter().filter(|c| !c.passed()).count()
            + self.jacobians.iter().filter(|(_, j)| !(j.max_deviation <= self.jacobian_tol)).count()
    }

    pub fn passed(&self) -> bool {
        self.failures() == 0
    }

    pub fn max_rel_error(&self, pair: &str) -> f64 {
        self.comparisons
            .iter()
            .filter(|c| c.pair == pair)
            .map(|c| c.rel_error)
            .fold(0.0, f64::max)
    }

    /// Human-readable summary ending with the worst offender.
    pub fn summary(&self) -> String {
        let mut lines = Vec::new();
        for pair in ["recursive/naive", "recursive/finite-difference", "naive/finite-difference"] {
            let n = self.comparisons.iter().filter(|c| c.pair == pair).count();
            if n > 0 {
                lines.push(format!("{pair}: {n} comparisons, max relative error {:.3e}", self.max_rel_error(pair)));
            }
        }
        if let Some((model, j)) = self.worst_jacobian() {
            lines.push(format!(
                "jacobians: {} checks, worst {model} {}[{},{}] deviation {:.3e} (tolerance {:.0e})",
                self.jacobians.len(),
                j.name,
                j.row,
                j.col,
                j.max_deviation,
                self.jacobian_tol
            ));
        }
        let bad_jac = self
            .worst_jacobian()
            .filter(|(_, j)| !(j.max_deviation <= self.jacobian_tol));
        if let Some((model, j)) = bad_jac {
            lines.push(format!(
                "FAIL {model} {}[{},{}]: analytic {:e}, numeric {:e}, deviation {:.3e}",
                j.name, j.row, j.col, j.analytic, j.numeric, j.max_deviation
            ));
        } else if let Some(c) = self.worst_comparison().filter(|c| !c.passed()) {
            lines.push(format!("FAIL {c}"));
        } else {
            lines.push("all checks passed".into());
        }
        lines.join("\n")
    }
}

/// Oracle triangle and Jacobian checks over `points` random problems per horizon.
pub fn gradcheck(model: &ModelSpec, loss: &LossSpec, horizons: &[usize], points: usize, tol: &Tolerances, seed: u64) -> Result<GradcheckReport> {
    let mut report = GradcheckReport {
        jacobian_tol: tol.jacobian_tol,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &horizon in horizons {
        for point in 0..points {
            let problem = random_problem(model, horizon, &mut rng)?;
            report.comparisons.extend(oracle_triangle(model, loss, &problem, tol, point)?);
            let at = JacobianPoint {
                x: problem.x0.clone(),
                u: problem.traj.inputs()[0].clone(),
                vartheta: problem.vartheta.clone(),
            };
            let checks = jacobian_report(model, &at)?;
            report
                .jacobians
                .extend(checks.checks.into_iter().map(|c| (model.name().to_string(), c)));
        }
    }
    Ok(report)
}
