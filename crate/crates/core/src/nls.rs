//! Levenberg-Marquardt over residual blocks.
//!
//! Each [`ResidualBlock`] reads a subset of the state vector and produces a
//! residual that is whitened by a square-root information matrix, so the
//! objective is `½ Σ ‖W r(x)‖²`, i.e. half the sum of squared Mahalanobis
//! distances. Normal equations are dense; the problems solved here have at
//! most a few hundred parameters.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("residual block {block} references parameter {index} but the state has {len} entries")]
    ParameterOutOfRange { block: usize, index: usize, len: usize },
    #[error("initial state is not finite")]
    NonFiniteState,
    #[error("residual block {0} is not finite at the initial state")]
    NonFiniteResidual(usize),
    #[error("residual block {block}: weight is {rows}x{cols}, residual dimension is {dim}")]
    WeightShape {
        block: usize,
        rows: usize,
        cols: usize,
        dim: usize,
    },
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
}

/// A residual function of a parameter slice.
pub trait CostFunction: Send + Sync {
    fn residual_dim(&self) -> usize;

    fn evaluate(&self, params: &[f64]) -> DVector<f64>;

    /// Analytic Jacobian `residual_dim × params.len()`, if available.
    fn jacobian(&self, _params: &[f64]) -> Option<DMatrix<f64>> {
        None
    }
}

/// Cost function from a closure, Jacobian by finite differences.
pub struct FnCost<F> {
    dim: usize,
    f: F,
}

impl<F> FnCost<F>
where
    F: Fn(&[f64]) -> DVector<f64> + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> CostFunction for FnCost<F>
where
    F: Fn(&[f64]) -> DVector<f64> + Send + Sync,
{
    fn residual_dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, params: &[f64]) -> DVector<f64> {
        (self.f)(params)
    }
}

/// Whitening applied to a block's residual.
#[derive(Debug, Clone, PartialEq)]
enum Weight {
    Scalar(f64),
    Matrix(DMatrix<f64>),
}

pub struct ResidualBlock {
    parameter_indices: Vec<usize>,
    weight: Weight,
    cost: Box<dyn CostFunction>,
}

impl ResidualBlock {
    /// Block with unit weight.
    pub fn new(parameter_indices: Vec<usize>, cost: impl CostFunction + 'static) -> Self {
        Self {
            parameter_indices,
            weight: Weight::Scalar(1.0),
            cost: Box::new(cost),
        }
    }

    pub fn with_sqrt_information(mut self, weight: DMatrix<f64>) -> Self {
        self.weight = Weight::Matrix(weight);
        self
    }

    /// Scalar standard deviation applied to every residual component.
    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.weight = Weight::Scalar(1.0 / sigma);
        self
    }

    /// Weight `W` with `WᵀW = Σ⁻¹`.
    pub fn with_covariance(self, covariance: &DMatrix<f64>) -> Result<Self, SolverError> {
        let w = sqrt_information(covariance)?;
        Ok(self.with_sqrt_information(w))
    }

    pub fn dimension(&self) -> usize {
        self.cost.residual_dim()
    }

    pub fn parameter_indices(&self) -> &[usize] {
        &self.parameter_indices
    }

    pub fn sqrt_information_matrix(&self) -> DMatrix<f64> {
        match &self.weight {
            Weight::Scalar(w) => DMatrix::identity(self.dimension(), self.dimension()) * *w,
            Weight::Matrix(m) => m.clone(),
        }
    }

    fn whiten(&self, r: DVector<f64>) -> DVector<f64> {
        match &self.weight {
            Weight::Scalar(w) if *w == 1.0 => r,
            Weight::Scalar(w) => r * *w,
            Weight::Matrix(m) => m * r,
        }
    }

    fn whiten_jacobian(&self, j: DMatrix<f64>) -> DMatrix<f64> {
        match &self.weight {
            Weight::Scalar(w) if *w == 1.0 => j,
            Weight::Scalar(w) => j * *w,
            Weight::Matrix(m) => m * j,
        }
    }

    pub fn cost_function(&self) -> &dyn CostFunction {
        self.cost.as_ref()
    }

    fn gather(&self, state: &DVector<f64>) -> Vec<f64> {
        self.parameter_indices.iter().map(|&i| state[i]).collect()
    }

    /// Whitened residual at `state`.
    pub fn weighted_residual(&self, state: &DVector<f64>) -> DVector<f64> {
        self.whiten(self.cost.evaluate(&self.gather(state)))
    }

    fn linearize(&self, state: &DVector<f64>, analytic: bool) -> (DVector<f64>, DMatrix<f64>) {
        let params = self.gather(state);
        let r = self.cost.evaluate(&params);
        let j = if analytic {
            self.cost
                .jacobian(&params)
                .unwrap_or_else(|| numeric_jacobian(self.cost.as_ref(), &params))
        } else {
            numeric_jacobian(self.cost.as_ref(), &params)
        };
        (self.whiten(r), self.whiten_jacobian(j))
    }
}

/// Upper-triangular `W` such that `WᵀW = Σ⁻¹`.
pub fn sqrt_information(covariance: &DMatrix<f64>) -> Result<DMatrix<f64>, SolverError> {
    let inv = covariance
        .clone()
        .cholesky()
        .ok_or(SolverError::NotPositiveDefinite)?
        .inverse();
    let l = inv.cholesky().ok_or(SolverError::NotPositiveDefinite)?.l();
    Ok(l.transpose())
}

/// Central differences with step `max(1e-6, 1e-6·|xᵢ|)`.
pub fn numeric_jacobian(cost: &dyn CostFunction, params: &[f64]) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(cost.residual_dim(), params.len());
    let mut x = params.to_vec();
    for c in 0..params.len() {
        let h = (1e-6 * params[c].abs()).max(1e-6);
        x[c] = params[c] + h;
        let plus = cost.evaluate(&x);
        x[c] = params[c] - h;
        let minus = cost.evaluate(&x);
        x[c] = params[c];
        j.set_column(c, &((plus - minus) / (2.0 * h)));
    }
    j
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub lambda_increase: f64,
    pub lambda_decrease: f64,
    pub relative_cost_tolerance: f64,
    pub gradient_tolerance: f64,
    pub analytic_jacobians: bool,
    /// Huber threshold on the whitened residual norm of a block; off when `None`.
    pub huber: Option<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            initial_lambda: 1e-4,
            lambda_increase: 10.0,
            lambda_decrease: 0.5,
            relative_cost_tolerance: 1e-8,
            gradient_tolerance: 1e-10,
            analytic_jacobians: true,
            huber: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    CostTolerance,
    GradientTolerance,
    /// Damping grew without finding a descent step; the state is stationary
    /// to working precision.
    DampingExhausted,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
    pub termination: Termination,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub rejected_steps: usize,
    pub wall_time: f64,
}

struct Linearization {
    cost: f64,
    hessian: DMatrix<f64>,
    gradient: DVector<f64>,
}

fn huber_scale(norm: f64, huber: Option<f64>) -> (f64, Option<f64>) {
    match huber {
        Some(k) if norm > k => ((k / norm).sqrt(), Some(k * norm - 0.5 * k * k)),
        _ => (1.0, None),
    }
}

fn total_cost(blocks: &[ResidualBlock], state: &DVector<f64>, huber: Option<f64>) -> f64 {
    blocks
        .iter()
        .map(|b| {
            let r = b.weighted_residual(state);
            let n2 = r.norm_squared();
            match huber_scale(n2.sqrt(), huber) {
                (_, Some(robust)) => robust,
                _ => 0.5 * n2,
            }
        })
        .sum()
}

fn linearize(blocks: &[ResidualBlock], state: &DVector<f64>, options: &SolverOptions) -> Linearization {
    let n = state.len();
    let mut hessian = DMatrix::zeros(n, n);
    let mut gradient = DVector::zeros(n);
    let mut cost = 0.0;
    for block in blocks {
        let (mut r, mut j) = block.linearize(state, options.analytic_jacobians);
        let norm = r.norm();
        let (scale, robust) = huber_scale(norm, options.huber);
        cost += robust.unwrap_or(0.5 * norm * norm);
        if scale != 1.0 {
            r *= scale;
            j *= scale;
        }
        let jtj = j.transpose() * &j;
        let jtr = j.transpose() * &r;
        let idx = block.parameter_indices();
        for (a, &ia) in idx.iter().enumerate() {
            gradient[ia] += jtr[a];
            for (b, &ib) in idx.iter().enumerate() {
                hessian[(ia, ib)] += jtj[(a, b)];
            }
        }
    }
    Linearization {
        cost,
        hessian,
        gradient,
    }
}

fn solve_damped(hessian: &DMatrix<f64>, gradient: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    let mut a = hessian.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += lambda * hessian[(i, i)].max(1e-12);
    }
    let rhs = -gradient;
    if let Some(ch) = a.clone().cholesky() {
        return Some(ch.solve(&rhs));
    }
    // indefinite through rounding: QR still gives a usable step
    let step = a.qr().solve(&rhs)?;
    step.iter().all(|v| v.is_finite()).then_some(step)
}

fn validate(blocks: &[ResidualBlock], state: &DVector<f64>) -> Result<(), SolverError> {
    if !state.iter().all(|v| v.is_finite()) {
        return Err(SolverError::NonFiniteState);
    }
    for (k, block) in blocks.iter().enumerate() {
        if let Some(&index) = block.parameter_indices().iter().find(|&&i| i >= state.len()) {
            return Err(SolverError::ParameterOutOfRange {
                block: k,
                index,
                len: state.len(),
            });
        }
        let dim = block.dimension();
        if let Weight::Matrix(w) = &block.weight {
            if w.nrows() != dim || w.ncols() != dim {
                return Err(SolverError::WeightShape {
                    block: k,
                    rows: w.nrows(),
                    cols: w.ncols(),
                    dim,
                });
            }
        }
        if !block.weighted_residual(state).iter().all(|v| v.is_finite()) {
            return Err(SolverError::NonFiniteResidual(k));
        }
    }
    Ok(())
}

/// Minimizes `½ Σ ‖W r(x)‖²` from `initial`.
///
/// Hitting the iteration cap is not an error: the best state is returned
/// with `converged = false`.
pub fn solve(
    blocks: &[ResidualBlock],
    initial: DVector<f64>,
    options: &SolverOptions,
) -> Result<(DVector<f64>, SolverReport), SolverError> {
    let start = Instant::now();
    validate(blocks, &initial)?;

    let mut state = initial;
    let mut lin = linearize(blocks, &state, options);
    let initial_cost = lin.cost;
    let mut cost_history = vec![lin.cost];
    let mut lambda = options.initial_lambda;
    let mut iterations = 0;
    let mut rejected_steps = 0;
    let mut termination = Termination::MaxIterations;

    'outer: while iterations < options.max_iterations {
        if lin.cost == 0.0 {
            termination = Termination::CostTolerance;
            break;
        }
        if lin.gradient.amax() < options.gradient_tolerance {
            termination = Termination::GradientTolerance;
            break;
        }
        loop {
            if lambda > 1e16 {
                termination = Termination::DampingExhausted;
                break 'outer;
            }
            let Some(step) = solve_damped(&lin.hessian, &lin.gradient, lambda) else {
                lambda *= options.lambda_increase;
                rejected_steps += 1;
                continue;
            };
            let candidate = &state + &step;
            let cost = total_cost(blocks, &candidate, options.huber);
            if cost.is_finite() && cost <= lin.cost {
                let previous = lin.cost;
                state = candidate;
                lin = linearize(blocks, &state, options);
                cost_history.push(lin.cost);
                iterations += 1;
                lambda = (lambda * options.lambda_decrease).max(1e-15);
                let decrease = previous - lin.cost;
                if decrease <= options.relative_cost_tolerance * previous {
                    termination = Termination::CostTolerance;
                    break 'outer;
                }
                break;
            }
            lambda *= options.lambda_increase;
            rejected_steps += 1;
        }
    }

    let report = SolverReport {
        iterations,
        initial_cost,
        final_cost: lin.cost,
        converged: termination != Termination::MaxIterations,
        termination,
        cost_history,
        rejected_steps,
        wall_time: start.elapsed().as_secs_f64(),
    };
    Ok((state, report))
}

/// Inverse Gauss-Newton Hessian at `state`.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariance {
    pub matrix: DMatrix<f64>,
    /// Some direction of the information matrix carries (numerically) no information.
    pub rank_deficient: bool,
    pub min_eigenvalue: f64,
}

pub fn covariance(blocks: &[ResidualBlock], state: &DVector<f64>, options: &SolverOptions) -> Covariance {
    let opts = SolverOptions {
        huber: None,
        ..*options
    };
    let lin = linearize(blocks, state, &opts);
    let h = 0.5 * (&lin.hessian + lin.hessian.transpose());
    let eig = SymmetricEigen::new(h);
    let max_eig = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let floor = (max_eig * 1e-16).max(1e-300);
    let rank_deficient = max_eig <= 0.0 || min_eig <= max_eig * 1e-12;
    let inv = eig.eigenvalues.map(|l| 1.0 / l.max(floor));
    let matrix = &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose();
    Covariance {
        matrix,
        rank_deficient,
        min_eigenvalue: min_eig,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Rosenbrock;

    impl CostFunction for Rosenbrock {
        fn residual_dim(&self) -> usize {
            2
        }
        fn evaluate(&self, p: &[f64]) -> DVector<f64> {
            DVector::from_vec(vec![1.0 - p[0], 10.0 * (p[1] - p[0] * p[0])])
        }
        fn jacobian(&self, p: &[f64]) -> Option<DMatrix<f64>> {
            Some(DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, -20.0 * p[0], 10.0]))
        }
    }

    /// `A x - b` with an analytic Jacobian.
    struct Linear {
        a: DMatrix<f64>,
        b: DVector<f64>,
    }

    impl CostFunction for Linear {
        fn residual_dim(&self) -> usize {
            self.a.nrows()
        }
        fn evaluate(&self, p: &[f64]) -> DVector<f64> {
            &self.a * DVector::from_column_slice(p) - &self.b
        }
        fn jacobian(&self, _p: &[f64]) -> Option<DMatrix<f64>> {
            Some(self.a.clone())
        }
    }

    #[test]
    fn single_linear_residual() {
        let blocks = vec![ResidualBlock::new(
            vec![0],
            FnCost::new(1, |p: &[f64]| DVector::from_element(1, p[0] - 3.0)),
        )];
        let (x, report) = solve(&blocks, DVector::zeros(1), &SolverOptions::default()).unwrap();
        assert_relative_eq!(x[0], 3.0, epsilon = 1e-9);
        assert!(report.final_cost < 1e-18);
        assert!(report.converged);
    }

    #[test]
    fn rosenbrock_reaches_global_minimum() {
        let blocks = vec![ResidualBlock::new(vec![0, 1], Rosenbrock)];
        let x0 = DVector::from_vec(vec![-1.2, 1.0]);
        let (x, report) = solve(&blocks, x0, &SolverOptions::default()).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-6 && (x[1] - 1.0).abs() < 1e-6, "{x}");
        assert!(report.converged);
        assert!(report.final_cost <= report.initial_cost);
    }

    #[test]
    fn accepted_steps_never_increase_cost() {
        let blocks = vec![ResidualBlock::new(vec![0, 1], Rosenbrock)];
        let (_, report) = solve(
            &blocks,
            DVector::from_vec(vec![-1.2, 1.0]),
            &SolverOptions::default(),
        )
        .unwrap();
        for w in report.cost_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(report.rejected_steps > 0);
    }

    #[test]
    fn linear_problem_matches_pseudoinverse_in_two_iterations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let a = DMatrix::from_fn(12, 4, |_, _| rng.gen_range(-1.0..1.0));
            let b = DVector::from_fn(12, |_, _| rng.gen_range(-1.0..1.0));
            let oracle = a.clone().pseudo_inverse(1e-14).unwrap() * &b;
            let blocks = vec![ResidualBlock::new(vec![0, 1, 2, 3], Linear { a, b })];
            let opts = SolverOptions {
                max_iterations: 2,
                ..Default::default()
            };
            let (x, report) = solve(&blocks, DVector::zeros(4), &opts).unwrap();
            assert!(report.iterations <= 2);
            assert!((x - &oracle).norm() < 1e-6 * (1.0 + oracle.norm()));
        }
    }

    #[test]
    fn doubling_weights_keeps_the_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let b = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
        let one = vec![ResidualBlock::new(
            vec![0, 1, 2, 3],
            Linear {
                a: a.clone(),
                b: b.clone(),
            },
        )];
        let two = vec![ResidualBlock::new(vec![0, 1, 2, 3], Linear { a, b }).with_sigma(0.5)];
        let (x1, _) = solve(&one, DVector::zeros(4), &SolverOptions::default()).unwrap();
        let (x2, _) = solve(&two, DVector::zeros(4), &SolverOptions::default()).unwrap();
        assert!((x1 - x2).norm() < 1e-8);
    }

    #[test]
    fn numeric_and_analytic_runs_agree() {
        let blocks = vec![ResidualBlock::new(vec![0, 1], Rosenbrock)];
        let x0 = DVector::from_vec(vec![-1.2, 1.0]);
        let (xa, _) = solve(&blocks, x0.clone(), &SolverOptions::default()).unwrap();
        let opts = SolverOptions {
            analytic_jacobians: false,
            ..Default::default()
        };
        let (xn, _) = solve(&blocks, x0, &opts).unwrap();
        assert!((xa - xn).norm() < 1e-5);
    }

    #[test]
    fn numeric_jacobian_of_square() {
        let cost = FnCost::new(1, |p: &[f64]| DVector::from_element(1, p[0] * p[0]));
        let j = numeric_jacobian(&cost, &[2.0]);
        assert!((j[(0, 0)] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn iteration_cap_reports_not_converged() {
        let blocks = vec![ResidualBlock::new(vec![0, 1], Rosenbrock)];
        let opts = SolverOptions {
            max_iterations: 2,
            ..Default::default()
        };
        let (x, report) = solve(&blocks, DVector::from_vec(vec![-1.2, 1.0]), &opts).unwrap();
        assert!(!report.converged);
        assert_eq!(report.termination, Termination::MaxIterations);
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_bad_inputs() {
        let blocks = vec![ResidualBlock::new(
            vec![3],
            FnCost::new(1, |p: &[f64]| DVector::from_element(1, p[0])),
        )];
        assert!(matches!(
            solve(&blocks, DVector::zeros(2), &SolverOptions::default()),
            Err(SolverError::ParameterOutOfRange { .. })
        ));
        let blocks = vec![ResidualBlock::new(
            vec![0],
            FnCost::new(1, |p: &[f64]| DVector::from_element(1, p[0].ln())),
        )];
        assert!(matches!(
            solve(&blocks, DVector::from_element(1, -1.0), &SolverOptions::default()),
            Err(SolverError::NonFiniteResidual(0))
        ));
        assert!(matches!(
            solve(
                &blocks,
                DVector::from_element(1, f64::NAN),
                &SolverOptions::default()
            ),
            Err(SolverError::NonFiniteState)
        ));
    }

    #[test]
    fn covariance_weighting_realizes_mahalanobis_norm() {
        let cov = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.2]);
        let w = sqrt_information(&cov).unwrap();
        let e = DVector::from_vec(vec![0.3, -0.7]);
        let direct = (e.transpose() * cov.clone().try_inverse().unwrap() * &e)[0];
        assert_relative_eq!((&w * &e).norm_squared(), direct, epsilon = 1e-12);
    }

    #[test]
    fn covariance_of_linear_problem_and_rank_deficiency() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 2.0, 1.0, 1.0]);
        let blocks = vec![ResidualBlock::new(
            vec![0, 1],
            Linear {
                a: a.clone(),
                b: DVector::zeros(3),
            },
        )];
        let c = covariance(&blocks, &DVector::zeros(2), &SolverOptions::default());
        let oracle = (a.transpose() * &a).try_inverse().unwrap();
        assert!((c.matrix - oracle).norm() < 1e-12);
        assert!(!c.rank_deficient);

        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        let blocks = vec![ResidualBlock::new(
            vec![0, 1],
            Linear {
                a,
                b: DVector::zeros(2),
            },
        )];
        let c = covariance(&blocks, &DVector::zeros(2), &SolverOptions::default());
        assert!(c.rank_deficient);
        assert!(c.matrix.trace() > 1e6);
    }

    #[test]
    fn huber_limits_outlier_influence() {
        // three consistent observations of 1.0 and one wild one
        let obs = [1.0, 1.0, 1.0, 50.0];
        let blocks: Vec<_> = obs
            .iter()
            .map(|&o| {
                ResidualBlock::new(
                    vec![0],
                    FnCost::new(1, move |p: &[f64]| DVector::from_element(1, p[0] - o)),
                )
            })
            .collect();
        let (plain, _) = solve(&blocks, DVector::zeros(1), &SolverOptions::default()).unwrap();
        let opts = SolverOptions {
            huber: Some(1.0),
            ..Default::default()
        };
        let (robust, _) = solve(&blocks, DVector::zeros(1), &opts).unwrap();
        assert!((plain[0] - 13.25).abs() < 1e-6);
        assert!((robust[0] - 1.0).abs() < (plain[0] - 1.0).abs() / 5.0);
    }
}
