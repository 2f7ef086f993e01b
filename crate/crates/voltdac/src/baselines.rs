//! Comparator policies: the uncontrolled injection and a per-step
//! optimization method that trusts the model estimate.

use nalgebra::{DMatrix, DVector};

use crate::controller::CostWeights;
use crate::linalg::clip;
use crate::{Error, Result};

/// One-step box-constrained quadratic program in the stacked input
/// `u = [p; q]`:
///
/// ```text
/// minimize  c_p ||p - p_bar||^2 + c_q ||q||^2 + c_x ||B^ u + w^||^2
/// subject to  lo <= u <= hi
/// ```
///
/// `p_bar` is the active half of the natural input `u~ = [p_bar; 0]`.
#[derive(Debug, Clone)]
pub struct QpProblem<'a> {
    pub b_hat: &'a DMatrix<f64>,
    /// Predicted disturbance for the coming step.
    pub w_hat: &'a DVector<f64>,
    pub u_tilde: &'a DVector<f64>,
    pub lo: &'a DVector<f64>,
    pub hi: &'a DVector<f64>,
    pub weights: CostWeights,
}

impl QpProblem<'_> {
    pub fn bus_count(&self) -> usize {
        self.w_hat.len()
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        let n = self.bus_count();
        let mut value = 0.0;
        for i in 0..n {
            value += self.weights.c_p * (u[i] - self.u_tilde[i]).powi(2);
            value += self.weights.c_q * u[n + i].powi(2);
        }
        let x_hat = self.b_hat * u + self.w_hat;
        value + self.weights.c_x * x_hat.norm_squared()
    }

    fn gradient(&self, u: &DVector<f64>) -> DVector<f64> {
        let n = self.bus_count();
        let mut grad = DVector::zeros(2 * n);
        for i in 0..n {
            grad[i] = 2.0 * self.weights.c_p * (u[i] - self.u_tilde[i]);
            grad[n + i] = 2.0 * self.weights.c_q * u[n + i];
        }
        grad + 2.0 * self.weights.c_x * (self.b_hat.transpose() * (self.b_hat * u + self.w_hat))
    }

    fn validate(&self) -> Result<()> {
        let n = self.bus_count();
        if self.weights.c_p < 0.0 || self.weights.c_q < 0.0 || self.weights.c_x < 0.0 {
            return Err(Error::Baseline("cost weights must be nonnegative".into()));
        }
        for i in 0..2 * n {
            if self.lo[i] > self.hi[i] {
                return Err(Error::Baseline(format!(
                    "empty box at coordinate {i}: [{}, {}]",
                    self.lo[i], self.hi[i]
                )));
            }
        }
        Ok(())
    }
}

/// Uncontrolled injection: full available active power, zero reactive,
/// saturated into the box.
pub fn no_control_input(
    u_tilde: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> DVector<f64> {
    clip(u_tilde, lo, hi)
}

/// Outcome of a projected-gradient solve.
#[derive(Debug, Clone)]
pub struct DirectOptResult {
    pub u: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
}

/// Minimizes the per-step program by projected gradient with the fixed
/// step `1 / Lambda`, `Lambda = 2 max(c_p, c_q) + 2 c_x ||B^||^2`, from a
/// warm start. Terminates when the projected-gradient map norm drops
/// below `tol`; hitting `max_iter` is reported through the `converged`
/// flag, not as an error.
pub fn direct_opt_input(
    problem: &QpProblem,
    warm_start: Option<&DVector<f64>>,
    b_hat_norm: f64,
    tol: f64,
    max_iter: usize,
) -> Result<DirectOptResult> {
    if tol <= 0.0 {
        return Err(Error::Baseline(format!("tol must be positive, got {tol}")));
    }
    problem.validate()?;
    let mut recorder = |_: &DVector<f64>, _: f64| {};
    Ok(projected_gradient(
        problem,
        warm_start,
        b_hat_norm,
        tol,
        max_iter,
        &mut recorder,
    ))
}

fn projected_gradient(
    problem: &QpProblem,
    warm_start: Option<&DVector<f64>>,
    b_hat_norm: f64,
    tol: f64,
    max_iter: usize,
    per_iteration: &mut dyn FnMut(&DVector<f64>, f64),
) -> DirectOptResult {
    let lambda = 2.0 * problem.weights.c_p.max(problem.weights.c_q)
        + 2.0 * problem.weights.c_x * b_hat_norm * b_hat_norm;
    let step = if lambda > 0.0 { 1.0 / lambda } else { 1.0 };
    let mut u = match warm_start {
        Some(start) => clip(start, problem.lo, problem.hi),
        None => clip(problem.u_tilde, problem.lo, problem.hi),
    };
    let mut converged = false;
    let mut iterations = 0;
    for iter in 0..max_iter {
        iterations = iter + 1;
        let grad = problem.gradient(&u);
        let next = clip(&(&u - &grad * step), problem.lo, problem.hi);
        // Projected-gradient map norm in the raw gradient scale.
        let map_norm = (&u - &next).norm() / step;
        u = next;
        per_iteration(&u, problem.objective(&u));
        if map_norm < tol {
            converged = true;
            break;
        }
    }
    let objective = problem.objective(&u);
    DirectOptResult {
        u,
        converged,
        iterations,
        objective,
    }
}

/// Exhaustive minimizer over the discretized box. Test oracle for small
/// problems; refuses grids above 10^7 points.
pub fn qp_oracle_grid(problem: &QpProblem, resolution: f64) -> Result<DVector<f64>> {
    if resolution <= 0.0 {
        return Err(Error::Baseline("resolution must be positive".into()));
    }
    problem.validate()?;
    let dim = 2 * problem.bus_count();
    // Axis points lo, lo + r, ... plus the upper edge, so that halving the
    // resolution refines the grid into a superset.
    let mut axes: Vec<Vec<f64>> = Vec::with_capacity(dim);
    let mut total: f64 = 1.0;
    for i in 0..dim {
        let width = problem.hi[i] - problem.lo[i];
        let mut points = Vec::new();
        let mut k = 0usize;
        loop {
            let value = problem.lo[i] + k as f64 * resolution;
            if value >= problem.hi[i] {
                break;
            }
            points.push(value);
            k += 1;
        }
        points.push(problem.hi[i]);
        total *= points.len() as f64;
        if total > 1e7 {
            return Err(Error::Baseline(format!(
                "grid too large: more than 1e7 points at resolution {resolution} (width {width})"
            )));
        }
        axes.push(points);
    }
    let mut index = vec![0usize; dim];
    let mut best = DVector::from_fn(dim, |i, _| axes[i][0]);
    let mut best_value = problem.objective(&best);
    loop {
        // Advance the odometer.
        let mut carry = 0;
        loop {
            if carry == dim {
                return Ok(best);
            }
            index[carry] += 1;
            if index[carry] < axes[carry].len() {
                break;
            }
            index[carry] = 0;
            carry += 1;
        }
        let candidate = DVector::from_fn(dim, |i, _| axes[i][index[i]]);
        let value = problem.objective(&candidate);
        if value < best_value {
            best_value = value;
            best = candidate;
        }
    }
}
