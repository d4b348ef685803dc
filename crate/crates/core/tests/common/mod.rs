#![allow(dead_code)]

use msid::model::{generate_data, DataGenConfig, Matrix, Trajectory, Vector};
use msid::models::{make_euler, make_logistic};
use msid::monitor::escape_time;
use msid::{full_gradient, BarrierTerm, GradientOptions, LossSpec, MonitorBounds};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRID_HORIZON: usize = 30;
pub const STABLE_THETAS: [f64; 6] = [0.5, 1.5, 2.5, 3.2, 3.5, 3.9];
pub const ESCAPING_THETAS: [f64; 3] = [4.2, 4.5, 5.0];

pub fn v(values: &[f64]) -> Vector {
    Vector::from_column_slice(values)
}

pub fn initial_states(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..20).map(|_| rng.random_range(0.0..1.0)).filter(|x| *x > 0.0).collect()
}

fn grid_data(x0: f64) -> Trajectory {
    generate_data(&make_logistic(), &DataGenConfig::noiseless(v(&[3.5]), v(&[x0])), &vec![v(&[]); GRID_HORIZON + 1]).unwrap()
}

/// Checks one `(θ, x0)` grid point; returns a description of any mismatch.
pub fn grid_point(theta: f64, x0: f64) -> Option<String> {
    let model = make_logistic();
    let bounds = MonitorBounds::default();
    let traj = grid_data(x0);
    let kc = escape_time(&model, &v(&[x0]), &v(&[theta]), traj.inputs(), bounds.escape_bound, GRID_HORIZON).unwrap();
    let pass = full_gradient(&model, &LossSpec::squared_error(1), &traj, &v(&[x0]), &v(&[theta]), &GradientOptions::default()).unwrap();
    let stable = theta <= 4.0;
    match (stable, kc) {
        (true, Some(k)) => Some(format!("theta {theta}, x0 {x0}: escaped at {k}")),
        (true, None) if pass.exploded() => Some(format!("theta {theta}, x0 {x0}: flagged {:?}", pass.report.explosion_cause)),
        (true, None) => None,
        (false, None) => Some(format!("theta {theta}, x0 {x0}: no escape within {GRID_HORIZON} steps")),
        (false, Some(k)) if !pass.exploded() || pass.report.escape_index != Some(k) => {
            Some(format!("theta {theta}, x0 {x0}: escape at {k}, report {:?}", pass.report.escape_index))
        }
        (false, Some(_)) => None,
    }
}

pub fn grid_failures() -> Vec<String> {
    let mut failures = Vec::new();
    for (thetas, seed) in [(&STABLE_THETAS[..], 1), (&ESCAPING_THETAS[..], 2)] {
        for &theta in thetas {
            failures.extend(initial_states(seed).into_iter().filter_map(|x0| grid_point(theta, x0)));
        }
    }
    failures
}

/// Worst relative error of the per-step seeds `(ρ, ϱ)` against central differences of
/// the step loss, over `points` random states, parameters and outputs.
pub fn loss_seed_fd_error(points: usize, seed: u64) -> f64 {
    let model = make_euler(0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut loss = LossSpec::squared_error(3).with_ridge(0.05);
    loss.weights = Matrix::from_row_slice(3, 3, &[1.5, 0.2, 0.0, -0.1, 1.0, 0.3, 0.0, 0.1, 0.7]);
    loss = loss.with_barrier(BarrierTerm::new(vec![-1.0; 3], vec![1.0; 3], 0.5, 4.0).unwrap());

    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let x = Vector::from_fn(3, |_, _| rng.random_range(-1.2..1.2));
        let p = Vector::from_fn(3, |_, _| rng.random_range(0.5..3.0));
        let z = Vector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let l = |x: &Vector, p: &Vector| loss.value(&(model.output(x) - &z), x, p);
        let s = loss.step_seed(&(model.output(&x) - &z), &x, &p, &model.jac_output(&x));
        let central = |f: &dyn Fn(&Vector) -> f64, at: &Vector| {
            Vector::from_fn(at.len(), |i, _| {
                let h = 1e-6 * at[i].abs().max(1.0);
                let (mut a, mut b) = (at.clone(), at.clone());
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (a[i] - b[i])
            })
        };
        let fd_rho = central(&|x| l(x, &p), &x);
        let fd_varrho = central(&|p| l(&x, p), &p);
        for (a, b) in [(&s.rho, &fd_rho), (&s.varrho, &fd_varrho)] {
            let scale = a.amax().max(b.amax()).max(1.0);
            worst = worst.max((a - b).amax() / scale);
        }
    }
    worst
}

/// `(x̂, computed, expected)` for the logistic barrier with bounds `[0, 1]`, λ = 10, α = 100.
pub fn barrier_values() -> Vec<(f64, f64, f64)> {
    let b = BarrierTerm::new(vec![0.0], vec![1.0], 10.0, 100.0).unwrap();
    let expected = |x: f64| 10.0 * (100.0 * (x - 1.0)).exp() + 10.0 * (-100.0 * x).exp();
    [0.0, 0.5, 1.0].into_iter().map(|x| (x, b.value(&v(&[x])), expected(x))).collect()
}

pub fn barrier_values_match() -> bool {
    barrier_values().iter().all(|(_, got, want)| (got - want).abs() <= 1e-12 * want.abs().max(1e-300))
}
