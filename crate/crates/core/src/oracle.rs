//! Independent gradient oracles: central finite differences, the non-recursive cubic
//! method, explicit transition products and the linear scalar closed form.

use crate::error::{check_len, Error, Result};
use crate::loss::LossSpec;
use crate::model::{Matrix, ModelSpec, Trajectory, Vector, DEFAULT_ESCAPE_BOUND};
use crate::sensitivity::multi_step_cost;

pub const DEFAULT_H_REL: f64 = 1e-6;

/// Step Jacobians along the predicted trajectory.
#[derive(Debug, Clone)]
pub struct StepJacobians {
    /// `x̂_0..x̂_T`.
    pub states: Vec<Vector>,
    /// `jac_x[k-1] = J^{x/x}_k`, evaluated at `(x̂_{k-1}, ũ_{k-1})`.
    pub jac_x: Vec<Matrix>,
    /// `jac_p[k-1] = J^{x/ϑ}_k`.
    pub jac_p: Vec<Matrix>,
}

/// Rolls the model out and collects `J^{x/x}_k`, `J^{x/ϑ}_k` for `k = 1..T`.
pub fn step_jacobians(model: &ModelSpec, x0: &Vector, vartheta: &Vector, inputs: &[Vector], bound: f64) -> Result<StepJacobians> {
    check_len("initial state", model.n_x(), x0.len())?;
    check_len("vartheta", model.n_vartheta(), vartheta.len())?;
    let horizon = inputs.len().saturating_sub(1);
    let mut out = StepJacobians {
        states: vec![x0.clone()],
        jac_x: Vec::with_capacity(horizon),
        jac_p: Vec::with_capacity(horizon),
    };
    let mut x = x0.clone();
    for (k, u) in inputs.iter().take(horizon).enumerate() {
        out.jac_x.push(model.jac_state(&x, u, vartheta)?);
        out.jac_p.push(model.jac_params(&x, u, vartheta)?);
        x = model.step(&x, u, vartheta)?;
        if crate::model::escaped(&x, bound) {
            return Err(Error::Escape { step: k + 1 });
        }
        out.states.push(x.clone());
    }
    Ok(out)
}

/// `Φ(k, j) = J^{x/x}_k ⋯ J^{x/x}_{j+1}` built by explicit products; identity when `k = j`.
pub fn transition_matrix(jac_x: &[Matrix], k: usize, j: usize) -> Matrix {
    assert!(j <= k && k <= jac_x.len(), "transition window out of range");
    let n = jac_x.first().map_or(0, |m| m.nrows());
    let mut phi = Matrix::identity(n, n);
    for i in j + 1..=k {
        phi = &jac_x[i - 1] * phi;
    }
    phi
}

/// Parameter gradient with every `dx̂_k/dϑ = Σ_{τ=1}^{k} Φ(k,τ) J^{x/ϑ}_τ` rebuilt from
/// scratch, each `Φ` from explicit matrix products. Cubic in the horizon by design.
pub fn naive_gradient(model: &ModelSpec, loss: &LossSpec, traj: &Trajectory, x0: &Vector, vartheta: &Vector) -> Result<Vector> {
    traj.check_model(model)?;
    loss.validate(model.n_x(), model.n_z())?;
    let jacs = step_jacobians(model, x0, vartheta, traj.inputs(), DEFAULT_ESCAPE_BOUND)?;
    let (n_x, n_vartheta) = (model.n_x(), model.n_vartheta());
    let zs = traj.outputs();

    let seed_at = |k: usize| {
        let x = &jacs.states[k];
        let e = model.output(x) - &zs[k];
        loss.step_seed(&e, x, vartheta, &model.jac_output(x))
    };
    let mut grad = seed_at(0).varrho;
    for k in 1..=traj.horizon() {
        let mut lambda = Matrix::zeros(n_x, n_vartheta);
        for tau in 1..=k {
            let phi = transition_matrix(&jacs.jac_x, k, tau);
            lambda += phi * &jacs.jac_p[tau - 1];
        }
        let seed = seed_at(k);
        let innovation = lambda.tr_mul(&seed.rho) + &seed.varrho;
        grad += innovation;
    }
    Ok(grad)
}

/// Central differences of the rolled-out cost, step `h_rel·max(1, |v|)` per component.
/// Returns `(∇_ϑC, ∇_{x0}C)`.
pub fn fd_gradient(
    model: &ModelSpec,
    loss: &LossSpec,
    traj: &Trajectory,
    x0: &Vector,
    vartheta: &Vector,
    h_rel: f64,
) -> Result<(Vector, Vector)> {
    if !(h_rel > 0.0) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let cost = |x0: &Vector, vartheta: &Vector, component: String| -> Result<f64> {
        match multi_step_cost(model, loss, traj, x0, vartheta, DEFAULT_ESCAPE_BOUND)? {
            Ok(c) => Ok(c),
            Err(step) => Err(Error::PerturbationEscape { component, step }),
        }
    };
    let central = |v: &Vector, i: usize, eval: &dyn Fn(&Vector) -> Result<f64>| -> Result<f64> {
        let h = h_rel * v[i].abs().max(1.0);
        let (mut plus, mut minus) = (v.clone(), v.clone());
        plus[i] += h;
        minus[i] -= h;
        Ok((eval(&plus)? - eval(&minus)?) / (plus[i] - minus[i]))
    };

    let mut g_vartheta = Vector::zeros(vartheta.len());
    for i in 0..vartheta.len() {
        g_vartheta[i] = central(vartheta, i, &|p| cost(x0, p, format!("vartheta[{i}]")))?;
    }
    let mut g_x0 = Vector::zeros(x0.len());
    for i in 0..x0.len() {
        g_x0[i] = central(x0, i, &|p| cost(p, vartheta, format!("x0[{i}]")))?;
    }
    Ok((g_vartheta, g_x0))
}

fn all_finite(a: &Vector, b: &Vector) -> bool {
    a.iter().chain(b.iter()).all(|v| v.is_finite())
}

/// `‖a - b‖∞ / max(‖a‖∞, ‖b‖∞)`, zero when both vanish, infinite on non-finite input.
pub fn relative_error(a: &Vector, b: &Vector) -> f64 {
    if !all_finite(a, b) {
        return f64::INFINITY;
    }
    let scale = a.amax().max(b.amax());
    let diff = (a - b).amax();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// `‖a - b‖∞ ≤ max(rtol·max(‖a‖∞, ‖b‖∞), atol)`.
pub fn agrees(a: &Vector, b: &Vector, rtol: f64, atol: f64) -> bool {
    a.len() == b.len() && all_finite(a, b) && (a - b).amax() <= (rtol * a.amax().max(b.amax())).max(atol)
}

/// Gradient of `Σ_k w(θ^k x0 - z_k)²` for `x_{k+1} = θx_k`: `(∂C/∂θ, ∂C/∂x0)`.
pub fn linear_closed_form(theta: f64, x0: f64, outputs: &[f64], weight: f64) -> (f64, f64) {
    let mut g_theta = 0.0;
    let mut g_x0 = 0.0;
    for (k, z) in outputs.iter().enumerate() {
        let e = theta.powi(k as i32) * x0 - z;
        if k > 0 {
            g_theta += 2.0 * weight * e * k as f64 * theta.powi(k as i32 - 1) * x0;
        }
        g_x0 += 2.0 * weight * e * theta.powi(k as i32);
    }
    (g_theta, g_x0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{make_euler, make_linear, make_logistic};
    use crate::sensitivity::{full_gradient, GradientOptions};

    fn v(values: &[f64]) -> Vector {
        Vector::from_column_slice(values)
    }

    #[test]
    fn transition_of_empty_window_is_identity() {
        let jx = vec![Matrix::from_element(2, 2, 3.0)];
        assert_eq!(transition_matrix(&jx, 1, 1), Matrix::identity(2, 2));
        assert_eq!(transition_matrix(&jx, 1, 0), jx[0]);
    }

    #[test]
    fn transition_order() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let b = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        let jx = vec![a.clone(), b.clone()];
        assert_eq!(transition_matrix(&jx, 2, 0), &b * &a);
    }

    #[test]
    fn zero_loss_gives_zero_fd_gradient() {
        let mut loss = LossSpec::squared_error(1);
        loss.weights = Matrix::zeros(1, 1);
        let traj = Trajectory::new(vec![v(&[]); 11], vec![v(&[0.3]); 11]).unwrap();
        let (g, gx) = fd_gradient(&make_logistic(), &loss, &traj, &v(&[0.2]), &v(&[3.2]), DEFAULT_H_REL).unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(gx[0], 0.0);
    }

    #[test]
    fn single_step_naive_is_bitwise_recursion() {
        let model = make_euler(0.1);
        let traj = Trajectory::new(
            vec![v(&[0.1, -0.2, 0.3]), v(&[0.0, 0.0, 0.0])],
            vec![v(&[0.5, 0.1, -0.2]), v(&[0.4, 0.2, -0.1])],
        )
        .unwrap();
        let loss = LossSpec::squared_error(3).with_ridge(0.01);
        let (x0, p) = (v(&[0.3, 0.2, 0.1]), v(&[1.0, 2.0, 3.0]));
        let naive = naive_gradient(&model, &loss, &traj, &x0, &p).unwrap();
        let full = full_gradient(&model, &loss, &traj, &x0, &p, &GradientOptions::default()).unwrap();
        assert_eq!(naive, full.grad_vartheta);
    }

    #[test]
    fn linear_closed_form_matches_fd() {
        let zs = [1.0, 0.8, 0.7, 0.5, 0.45];
        let traj = Trajectory::new(vec![v(&[]); 5], zs.iter().map(|z| v(&[*z])).collect()).unwrap();
        let (g, gx) = fd_gradient(&make_linear(), &LossSpec::squared_error(1), &traj, &v(&[1.1]), &v(&[0.85]), DEFAULT_H_REL).unwrap();
        let (ct, cx) = linear_closed_form(0.85, 1.1, &zs, 1.0);
        assert!((g[0] - ct).abs() <= 1e-8 * ct.abs().max(1.0));
        assert!((gx[0] - cx).abs() <= 1e-8 * cx.abs().max(1.0));
    }

    #[test]
    fn perturbation_escape_names_component() {
        let traj = Trajectory::new(vec![v(&[]); 3], vec![v(&[0.0]); 3]).unwrap();
        let err = fd_gradient(&make_linear(), &LossSpec::squared_error(1), &traj, &v(&[5e8]), &v(&[1.5]), 1e-3).unwrap_err();
        match err {
            Error::PerturbationEscape { component, .. } => assert_eq!(component, "vartheta[0]"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn agreement_metric() {
        assert!(agrees(&v(&[1.0, 2.0]), &v(&[1.0, 2.0 + 1e-6]), 1e-5, 1e-8));
        assert!(!agrees(&v(&[1.0, 2.0]), &v(&[1.0, 2.1]), 1e-5, 1e-8));
        assert!(agrees(&v(&[0.0]), &v(&[5e-9]), 1e-5, 1e-8));
        assert_eq!(relative_error(&v(&[0.0]), &v(&[0.0])), 0.0);
        assert!(!agrees(&v(&[f64::NAN]), &v(&[1.0]), 1e-5, 1e-8));
        assert_eq!(relative_error(&v(&[f64::NAN]), &v(&[1.0])), f64::INFINITY);
        assert!((relative_error(&v(&[2.0]), &v(&[1.0])) - 0.5).abs() < 1e-15);
    }
}
