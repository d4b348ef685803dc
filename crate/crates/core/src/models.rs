//! Built-in models with analytic Jacobians.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{Correction, Dynamics, Matrix, ModelSpec, Vector};

/// `x_{k+1} = θ x_k (1 - x_k)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Logistic;

impl Dynamics for Logistic {
    fn name(&self) -> &str {
        "logistic"
    }
    fn n_x(&self) -> usize {
        1
    }
    fn n_u(&self) -> usize {
        0
    }
    fn n_theta(&self) -> usize {
        1
    }

    fn step(&self, x: &Vector, _u: &Vector, theta: &Vector) -> Result<Vector> {
        Ok(Vector::from_element(1, theta[0] * x[0] * (1.0 - x[0])))
    }

    fn jac_x(&self, x: &Vector, _u: &Vector, theta: &Vector) -> Result<Matrix> {
        Ok(Matrix::from_element(1, 1, theta[0] * (1.0 - 2.0 * x[0])))
    }

    fn jac_theta(&self, x: &Vector, _u: &Vector, _theta: &Vector) -> Result<Matrix> {
        Ok(Matrix::from_element(1, 1, x[0] * (1.0 - x[0])))
    }
}

/// Torque-driven Euler equations for a rigid body with diagonal inertia
/// `θ = (I_1, I_2, I_3)`, discretized with explicit forward Euler:
///
/// `ω_{k+1} = ω_k + dt · I^{-1} (M_k - ω_k × I ω_k)`.
#[derive(Debug, Clone, Copy)]
pub struct EulerRigidBody {
    pub dt: f64,
}

impl EulerRigidBody {
    fn inertia(theta: &Vector) -> Result<[f64; 3]> {
        let i = [theta[0], theta[1], theta[2]];
        if i.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Evaluation(format!(
                "inertia must be positive, got {i:?}"
            )));
        }
        Ok(i)
    }

    /// `M - ω × Iω` per axis.
    fn net_torque(w: &Vector, m: &Vector, i: &[f64; 3]) -> [f64; 3] {
        [
            m[0] - (i[2] - i[1]) * w[1] * w[2],
            m[1] - (i[0] - i[2]) * w[2] * w[0],
            m[2] - (i[1] - i[0]) * w[0] * w[1],
        ]
    }
}

impl Dynamics for EulerRigidBody {
    fn name(&self) -> &str {
        "euler"
    }
    fn n_x(&self) -> usize {
        3
    }
    fn n_u(&self) -> usize {
        3
    }
    fn n_theta(&self) -> usize {
        3
    }

    fn step(&self, w: &Vector, m: &Vector, theta: &Vector) -> Result<Vector> {
        let i = Self::inertia(theta)?;
        let g = Self::net_torque(w, m, &i);
        Ok(Vector::from_fn(3, |a, _| w[a] + self.dt * g[a] / i[a]))
    }

    fn jac_x(&self, w: &Vector, _m: &Vector, theta: &Vector) -> Result<Matrix> {
        let i = Self::inertia(theta)?;
        let dt = self.dt;
        let (a, b, c) = (
            dt * (i[2] - i[1]) / i[0],
            dt * (i[0] - i[2]) / i[1],
            dt * (i[1] - i[0]) / i[2],
        );
        #[rustfmt::skip]
        let jac = Matrix::from_row_slice(3, 3, &[
            1.0,        -a * w[2], -a * w[1],
            -b * w[2],  1.0,       -b * w[0],
            -c * w[1],  -c * w[0], 1.0,
        ]);
        Ok(jac)
    }

    fn jac_theta(&self, w: &Vector, m: &Vector, theta: &Vector) -> Result<Matrix> {
        let i = Self::inertia(theta)?;
        let g = Self::net_torque(w, m, &i);
        let dt = self.dt;
        let (w23, w31, w12) = (w[1] * w[2], w[2] * w[0], w[0] * w[1]);
        #[rustfmt::skip]
        let jac = Matrix::from_row_slice(3, 3, &[
            -dt * g[0] / (i[0] * i[0]), dt * w23 / i[0],            -dt * w23 / i[0],
            -dt * w31 / i[1],           -dt * g[1] / (i[1] * i[1]), dt * w31 / i[1],
            dt * w12 / i[2],            -dt * w12 / i[2],           -dt * g[2] / (i[2] * i[2]),
        ]);
        Ok(jac)
    }
}

/// `x_{k+1} = θ x_k`; states are `θ^k x_0` in closed form.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinearScalar;

impl Dynamics for LinearScalar {
    fn name(&self) -> &str {
        "linear"
    }
    fn n_x(&self) -> usize {
        1
    }
    fn n_u(&self) -> usize {
        0
    }
    fn n_theta(&self) -> usize {
        1
    }

    fn step(&self, x: &Vector, _u: &Vector, theta: &Vector) -> Result<Vector> {
        Ok(Vector::from_element(1, theta[0] * x[0]))
    }

    fn jac_x(&self, _x: &Vector, _u: &Vector, theta: &Vector) -> Result<Matrix> {
        Ok(Matrix::from_element(1, 1, theta[0]))
    }

    fn jac_theta(&self, x: &Vector, _u: &Vector, _theta: &Vector) -> Result<Matrix> {
        Ok(Matrix::from_element(1, 1, x[0]))
    }
}

/// Linear-in-parameters correction `δ_i(x) = Σ_j ω_{i,j} φ_j(x)` over state monomials
/// of total degree 1..=3, taken in graded lexicographic order.
///
/// Coefficients are stored row-major: `ω[i * n_terms + j]`.
#[derive(Debug, Clone)]
pub struct PolynomialCorrection {
    n_x: usize,
    exponents: Vec<Vec<u32>>,
}

impl PolynomialCorrection {
    pub const MAX_DEGREE: u32 = 3;

    /// All monomials of degree 1..=3 in `n_x` variables.
    pub fn full(n_x: usize) -> Self {
        let mut exponents = Vec::new();
        for degree in 1..=Self::MAX_DEGREE {
            let mut current = vec![0u32; n_x];
            collect_monomials(0, degree, &mut current, &mut exponents);
        }
        Self { n_x, exponents }
    }

    /// The first `n_terms` monomials of [`PolynomialCorrection::full`].
    pub fn truncated(n_x: usize, n_terms: usize) -> Result<Self> {
        let mut full = Self::full(n_x);
        if n_terms > full.exponents.len() {
            return Err(Error::Config(format!(
                "at most {} monomials of degree <= {} exist for n_x = {n_x}, requested {n_terms}",
                full.exponents.len(),
                Self::MAX_DEGREE
            )));
        }
        full.exponents.truncate(n_terms);
        Ok(full)
    }

    pub fn n_terms(&self) -> usize {
        self.exponents.len()
    }

    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }

    fn features(&self, x: &Vector) -> Vec<f64> {
        self.exponents
            .iter()
            .map(|e| e.iter().zip(x.iter()).map(|(&p, &v)| v.powi(p as i32)).product())
            .collect()
    }

    /// `∂φ_j/∂x_l` as an `n_terms × n_x` matrix.
    fn feature_jacobian(&self, x: &Vector) -> Matrix {
        Matrix::from_fn(self.n_terms(), self.n_x, |j, l| {
            let e = &self.exponents[j];
            if e[l] == 0 {
                return 0.0;
            }
            e.iter()
                .zip(x.iter())
                .enumerate()
                .map(|(idx, (&p, &v))| {
                    if idx == l {
                        p as f64 * v.powi(p as i32 - 1)
                    } else {
                        v.powi(p as i32)
                    }
                })
                .product()
        })
    }

    fn coefficients(&self, omega: &Vector) -> Matrix {
        Matrix::from_row_slice(self.n_x, self.n_terms(), omega.as_slice())
    }
}

fn collect_monomials(var: usize, remaining: u32, current: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if var + 1 == current.len() {
        current[var] = remaining;
        out.push(current.clone());
        current[var] = 0;
        return;
    }
    for p in (0..=remaining).rev() {
        current[var] = p;
        collect_monomials(var + 1, remaining - p, current, out);
    }
    current[var] = 0;
}

impl Correction for PolynomialCorrection {
    fn n_omega(&self) -> usize {
        self.n_x * self.n_terms()
    }

    fn eval(&self, x: &Vector, _u: &Vector, omega: &Vector) -> Vector {
        let phi = Vector::from_vec(self.features(x));
        self.coefficients(omega) * phi
    }

    fn jac_x(&self, x: &Vector, _u: &Vector, omega: &Vector) -> Matrix {
        self.coefficients(omega) * self.feature_jacobian(x)
    }

    fn jac_omega(&self, x: &Vector, _u: &Vector, _omega: &Vector) -> Matrix {
        let phi = self.features(x);
        let m = self.n_terms();
        let mut jac = Matrix::zeros(self.n_x, self.n_omega());
        for i in 0..self.n_x {
            for (j, value) in phi.iter().enumerate() {
                jac[(i, i * m + j)] = *value;
            }
        }
        jac
    }
}

/// Which analytic Jacobian a [`FaultyJacobian`] corrupts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianFault {
    StateJacobian,
    ParameterJacobian,
}

impl JacobianFault {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "jac_f_x" => Ok(Self::StateJacobian),
            "jac_f_theta" => Ok(Self::ParameterJacobian),
            other => Err(Error::Config(format!("unknown jacobian `{other}`"))),
        }
    }
}

/// Wraps a model and scales one of its Jacobians. Negative control for Jacobian checks.
pub struct FaultyJacobian {
    inner: Arc<dyn Dynamics>,
    fault: JacobianFault,
    scale: f64,
}

impl FaultyJacobian {
    pub fn new(inner: Arc<dyn Dynamics>, fault: JacobianFault, scale: f64) -> Self {
        Self { inner, fault, scale }
    }
}

impl Dynamics for FaultyJacobian {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn n_x(&self) -> usize {
        self.inner.n_x()
    }
    fn n_u(&self) -> usize {
        self.inner.n_u()
    }
    fn n_theta(&self) -> usize {
        self.inner.n_theta()
    }
    fn n_z(&self) -> usize {
        self.inner.n_z()
    }
    fn step(&self, x: &Vector, u: &Vector, theta: &Vector) -> Result<Vector> {
        self.inner.step(x, u, theta)
    }
    fn jac_x(&self, x: &Vector, u: &Vector, theta: &Vector) -> Result<Matrix> {
        let jac = self.inner.jac_x(x, u, theta)?;
        Ok(if self.fault == JacobianFault::StateJacobian { jac * self.scale } else { jac })
    }
    fn jac_theta(&self, x: &Vector, u: &Vector, theta: &Vector) -> Result<Matrix> {
        let jac = self.inner.jac_theta(x, u, theta)?;
        Ok(if self.fault == JacobianFault::ParameterJacobian { jac * self.scale } else { jac })
    }
    fn output(&self, x: &Vector) -> Vector {
        self.inner.output(x)
    }
    fn jac_output(&self, x: &Vector) -> Matrix {
        self.inner.jac_output(x)
    }
}

pub fn make_logistic() -> ModelSpec {
    ModelSpec::new(Arc::new(Logistic))
}

/// Panics if `dt` is not positive; use [`model_by_name`] for validated construction.
pub fn make_euler(dt: f64) -> ModelSpec {
    assert!(dt > 0.0, "time step must be positive");
    ModelSpec::new(Arc::new(EulerRigidBody { dt }))
}

pub fn make_linear() -> ModelSpec {
    ModelSpec::new(Arc::new(LinearScalar))
}

/// Attaches a polynomial correction with `n_terms` monomials per state.
pub fn with_polynomial(model: ModelSpec, n_terms: usize) -> Result<ModelSpec> {
    if n_terms == 0 {
        return Ok(model);
    }
    let poly = PolynomialCorrection::truncated(model.n_x(), n_terms)?;
    Ok(model.with_correction(Arc::new(poly)))
}

/// `logistic | euler | linear`.
pub fn model_by_name(name: &str, dt: f64) -> Result<ModelSpec> {
    match name {
        "logistic" => Ok(make_logistic()),
        "linear" => Ok(make_linear()),
        "euler" => {
            if !(dt > 0.0) {
                return Err(Error::Config(format!("euler time step must be positive, got {dt}")));
            }
            Ok(make_euler(dt))
        }
        other => Err(Error::Config(format!(
            "unknown model `{other}` (expected logistic | euler | linear)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{check_jacobians, rollout, JacobianPoint};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(values: &[f64]) -> Vector {
        Vector::from_column_slice(values)
    }

    #[test]
    fn monomial_counts() {
        assert_eq!(PolynomialCorrection::full(1).n_terms(), 3);
        assert_eq!(PolynomialCorrection::full(3).n_terms(), 19);
        let p = PolynomialCorrection::full(2);
        assert_eq!(p.exponents()[..2], [vec![1, 0], vec![0, 1]]);
        assert!(PolynomialCorrection::truncated(3, 20).is_err());
    }

    #[test]
    fn polynomial_vanishes_at_zero_coefficients() {
        let m = with_polynomial(make_euler(0.1), 19).unwrap();
        assert_eq!(m.n_vartheta(), 60);
        let theta = v(&[1.0, 2.0, 3.0]);
        let omega = Vector::zeros(57);
        let x = v(&[0.3, -0.2, 0.1]);
        let u = v(&[0.0, 0.1, 0.0]);
        let with = m.predict_step(&x, &u, &theta, &omega).unwrap();
        let without = make_euler(0.1).predict_step(&x, &u, &theta, &v(&[])).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn non_positive_inertia_is_an_evaluation_error() {
        let m = make_euler(0.1);
        let err = m.predict_step(&v(&[0.1, 0.1, 0.1]), &v(&[0.0; 3]), &v(&[1.0, 0.0, 1.0]), &v(&[]));
        assert!(matches!(err, Err(Error::Evaluation(_))));
    }

    #[test]
    fn unknown_model_name() {
        assert!(model_by_name("pendulum", 0.1).is_err());
        assert!(model_by_name("euler", 0.0).is_err());
        assert_eq!(model_by_name("euler", 0.1).unwrap().n_x(), 3);
    }

    fn random_point(model: &ModelSpec, rng: &mut ChaCha8Rng) -> JacobianPoint {
        let (x, theta) = match model.name() {
            "logistic" => (v(&[rng.random_range(0.0..1.0)]), v(&[rng.random_range(0.0..4.0)])),
            "linear" => (v(&[rng.random_range(-2.0..2.0)]), v(&[rng.random_range(-1.0..1.0)])),
            _ => (
                Vector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)),
                Vector::from_fn(3, |_, _| rng.random_range(0.5..3.0)),
            ),
        };
        let omega = Vector::from_fn(model.n_omega(), |_, _| rng.random_range(-0.5..0.5));
        JacobianPoint {
            u: Vector::from_fn(model.n_u(), |_, _| rng.random_range(-1.0..1.0)),
            vartheta: model.vartheta(&theta, &omega).unwrap(),
            x,
        }
    }

    #[test]
    fn builtin_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let models = [
            make_logistic(),
            make_euler(0.1),
            make_linear(),
            with_polynomial(make_euler(0.1), 19).unwrap(),
            with_polynomial(make_logistic(), 3).unwrap(),
        ];
        for model in &models {
            for _ in 0..100 {
                let point = random_point(model, &mut rng);
                check_jacobians(model, &point, 1e-5)
                    .unwrap_or_else(|e| panic!("{}: {e}", model.name()));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn logistic_stays_in_unit_interval(theta in 0.0f64..=4.0, x0 in 0.0f64..=1.0) {
            let inputs = vec![Vector::zeros(0); 10_001];
            let r = rollout(&make_logistic(), &v(&[x0]), &v(&[theta]), &inputs, 1e9).unwrap();
            prop_assert!(r.escape.is_none());
            prop_assert!(r.states.iter().all(|x| (0.0..=1.0).contains(&x[0])));
        }
    }
}
