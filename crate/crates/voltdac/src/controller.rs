//! The disturbance-action controller.
//!
//! The policy adds a linear function of the last `H` reconstructed
//! disturbances to the natural input and saturates into the capacity box:
//!
//! ```text
//! u_t = clip(u~_t + sum_i M_i w^_{t-i}, bounds_t)
//! ```
//!
//! After observing `x_{t+1}` the controller reconstructs the disturbance
//! with its model estimate, `w^_t = x_{t+1} - B^ u_t`, and takes one
//! gradient step on the surrogate cost evaluated at
//! `x^_{t+1} = B^ u_t(M) + w^_t`. Saturation propagates through the
//! gradient as a mask: coordinates strictly inside the box pass through,
//! everything else (clipped or at the boundary) contributes zero.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grid::SensitivityModel;
use crate::linalg::{all_finite, clip, spectral_norm};
use crate::{Error, Result};

/// Quadratic cost weights: curtailment, reactive effort, regulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub c_p: f64,
    pub c_q: f64,
    pub c_x: f64,
}

impl CostWeights {
    pub fn new(c_p: f64, c_q: f64, c_x: f64) -> Result<Self> {
        if c_p < 0.0 || c_q < 0.0 || c_x < 0.0 {
            return Err(Error::Controller(format!(
                "cost weights must be nonnegative, got c_p={c_p} c_q={c_q} c_x={c_x}"
            )));
        }
        Ok(Self { c_p, c_q, c_x })
    }

    /// Control-only cost of one step: `c_p ||p - p_bar||^2 + c_q ||q||^2`.
    pub fn control_cost(&self, u: &DVector<f64>, pv_avail: &DVector<f64>) -> (f64, f64) {
        let n = pv_avail.len();
        let mut curtail = 0.0;
        let mut reactive = 0.0;
        for i in 0..n {
            curtail += (u[i] - pv_avail[i]).powi(2);
            reactive += u[n + i].powi(2);
        }
        (self.c_p * curtail, self.c_q * reactive)
    }
}

/// Mutable controller state: parameter blocks and the disturbance buffer.
///
/// `buffer[0]` is the most recent reconstruction `w^_{t-1}`, `buffer[H-1]`
/// the oldest; it starts zero-filled, matching `w^_t = 0` for `t < 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    /// `H` parameter blocks, each `2n x n`.
    pub m: Vec<DMatrix<f64>>,
    pub buffer: VecDeque<DVector<f64>>,
    pub eta: f64,
    pub gamma: f64,
    /// Per-block norm caps from the initialization rule, when known.
    /// Used only by the optional projection in [`update_params`].
    pub caps: Option<Vec<f64>>,
}

impl ControllerState {
    /// Builds a state from explicit per-block scalars `(a, b)` replicated
    /// on identity blocks: `M_i = [a I; b I]`.
    pub fn from_scalars(
        bus_count: usize,
        horizon: usize,
        active: f64,
        reactive: f64,
        eta: f64,
        gamma: f64,
    ) -> Self {
        let blocks = (0..horizon)
            .map(|_| identity_block(bus_count, active, reactive))
            .collect();
        Self::with_blocks(bus_count, blocks, eta, gamma)
    }

    pub fn with_blocks(
        bus_count: usize,
        blocks: Vec<DMatrix<f64>>,
        eta: f64,
        gamma: f64,
    ) -> Self {
        assert!(!blocks.is_empty(), "tracing horizon must be at least 1");
        for block in &blocks {
            assert_eq!(block.nrows(), 2 * bus_count, "block must be 2n x n");
            assert_eq!(block.ncols(), bus_count, "block must be 2n x n");
        }
        let h = blocks.len();
        Self {
            m: blocks,
            buffer: VecDeque::from(vec![DVector::zeros(bus_count); h]),
            eta,
            gamma,
            caps: None,
        }
    }

    pub fn tracing_horizon(&self) -> usize {
        self.m.len()
    }

    pub fn bus_count(&self) -> usize {
        self.m[0].ncols()
    }

    /// Pushes the newest reconstruction, dropping the oldest.
    pub fn push_disturbance(&mut self, w_hat: DVector<f64>) {
        assert_eq!(w_hat.len(), self.bus_count(), "disturbance length mismatch");
        self.buffer.push_front(w_hat);
        self.buffer.pop_back();
    }

    /// Spectral norm of every parameter block.
    pub fn block_norms(&self) -> Vec<f64> {
        self.m.iter().map(spectral_norm).collect()
    }

    /// The feedback part of the input: `sum_i M_i w^_{t-i}`.
    pub fn policy_term(&self) -> DVector<f64> {
        policy_term(&self.m, &self.buffer)
    }
}

/// `M_i = [a I; b I]`, the replicated-identity block shape.
pub fn identity_block(bus_count: usize, active: f64, reactive: f64) -> DMatrix<f64> {
    let mut block = DMatrix::zeros(2 * bus_count, bus_count);
    for i in 0..bus_count {
        block[(i, i)] = active;
        block[(bus_count + i, i)] = reactive;
    }
    block
}

fn policy_term(m: &[DMatrix<f64>], buffer: &VecDeque<DVector<f64>>) -> DVector<f64> {
    assert_eq!(m.len(), buffer.len(), "parameter/buffer horizon mismatch");
    let mut term = DVector::zeros(m[0].nrows());
    for (block, w) in m.iter().zip(buffer.iter()) {
        term += block * w;
    }
    term
}

/// Computes the saturated input and the pre-clip value used for gradient
/// masking.
pub fn compute_input(
    state: &ControllerState,
    u_tilde: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let pre_clip = u_tilde + state.policy_term();
    let u = clip(&pre_clip, lo, hi);
    (u, pre_clip)
}

/// Reconstructs the disturbance from the observed next state:
/// `w^ = x_{next} - B^ u`. Equal to the true disturbance when the model
/// estimate is exact; otherwise off by `(B - B^) u`.
pub fn estimate_disturbance(
    x_next: &DVector<f64>,
    b_hat: &SensitivityModel,
    u: &DVector<f64>,
) -> DVector<f64> {
    let n = b_hat.bus_count();
    assert_eq!(x_next.len(), n, "state length mismatch");
    assert_eq!(u.len(), 2 * n, "input length mismatch");
    x_next - &b_hat.b * u
}

/// Everything the surrogate cost depends on besides the parameters.
pub struct SurrogateInputs<'a> {
    pub buffer: &'a VecDeque<DVector<f64>>,
    /// Newest reconstruction `w^_t`, the additive term of the surrogate
    /// state. Not yet part of the buffer.
    pub w_new: &'a DVector<f64>,
    pub u_tilde: &'a DVector<f64>,
    pub b_hat: &'a SensitivityModel,
    pub weights: CostWeights,
    pub lo: &'a DVector<f64>,
    pub hi: &'a DVector<f64>,
    pub pv_avail: &'a DVector<f64>,
}

/// Surrogate cost at the saturated input:
/// `c_p ||p - p_bar||^2 + c_q ||q||^2 + c_x ||B^ u(M) + w^_t||^2`.
pub fn surrogate_cost(m: &[DMatrix<f64>], inputs: &SurrogateInputs) -> f64 {
    let pre_clip = inputs.u_tilde + policy_term_slices(m, inputs.buffer);
    let u = clip(&pre_clip, inputs.lo, inputs.hi);
    let (cost_p, cost_q) = inputs.weights.control_cost(&u, inputs.pv_avail);
    let x_hat = &inputs.b_hat.b * &u + inputs.w_new;
    cost_p + cost_q + inputs.weights.c_x * x_hat.norm_squared()
}

fn policy_term_slices(m: &[DMatrix<f64>], buffer: &VecDeque<DVector<f64>>) -> DVector<f64> {
    assert_eq!(m.len(), buffer.len(), "parameter/buffer horizon mismatch");
    let mut term = DVector::zeros(m[0].nrows());
    for (block, w) in m.iter().zip(buffer.iter()) {
        term += block * w;
    }
    term
}

/// Surrogate cost and its analytic gradient with respect to every block.
///
/// The chain rule passes through the saturation as a mask: a coordinate
/// whose pre-clip value lies strictly inside the box contributes its cost
/// gradient, anything clipped or exactly at the boundary contributes
/// nothing. Buffer entries are constants with respect to `M`.
pub fn surrogate_cost_and_gradient(
    m: &[DMatrix<f64>],
    inputs: &SurrogateInputs,
) -> (f64, Vec<DMatrix<f64>>) {
    let pre_clip = inputs.u_tilde + policy_term_slices(m, inputs.buffer);
    let u = clip(&pre_clip, inputs.lo, inputs.hi);
    let (cost_p, cost_q) = inputs.weights.control_cost(&u, inputs.pv_avail);
    let x_hat = &inputs.b_hat.b * &u + inputs.w_new;
    let cost = cost_p + cost_q + inputs.weights.c_x * x_hat.norm_squared();

    let n = inputs.pv_avail.len();
    let mut cost_grad_u = DVector::zeros(2 * n);
    for i in 0..n {
        cost_grad_u[i] = 2.0 * inputs.weights.c_p * (u[i] - inputs.pv_avail[i]);
        cost_grad_u[n + i] = 2.0 * inputs.weights.c_q * u[n + i];
    }
    cost_grad_u += 2.0 * inputs.weights.c_x * (inputs.b_hat.b.transpose() * &x_hat);
    for i in 0..2 * n {
        let interior = inputs.lo[i] < pre_clip[i] && pre_clip[i] < inputs.hi[i];
        if !interior {
            cost_grad_u[i] = 0.0;
        }
    }

    let grads = inputs
        .buffer
        .iter()
        .map(|w| &cost_grad_u * w.transpose())
        .collect();
    (cost, grads)
}

/// One gradient step `M_i <- M_i - eta dC/dM_i`, with an optional radial
/// projection back onto the initialization norm ball (off by default; the
/// update rule itself has no projection step).
pub fn update_params(
    state: &mut ControllerState,
    gradient: &[DMatrix<f64>],
    eta: f64,
    project: bool,
) -> Result<()> {
    assert_eq!(gradient.len(), state.m.len(), "gradient horizon mismatch");
    if gradient.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::Controller("nonfinite gradient".into()));
    }
    for (block, grad) in state.m.iter_mut().zip(gradient) {
        *block -= grad * eta;
    }
    if project {
        if let Some(caps) = state.caps.clone() {
            for (block, cap) in state.m.iter_mut().zip(caps) {
                let norm = spectral_norm(block);
                if norm > cap && norm > 0.0 {
                    *block *= cap / norm;
                }
            }
        }
    }
    Ok(())
}

/// Result of one finite-difference comparison point.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckPoint {
    pub n: usize,
    pub h: usize,
    pub relative_error: f64,
}

/// Compares the analytic gradient against central finite differences of
/// the cost at `points` random instances whose pre-clip inputs sit
/// strictly inside the box. Returns the per-point normwise relative
/// errors, worst first. `corrupt` deliberately biases the analytic side
/// (negative-control hook).
pub fn gradient_check(
    seed: u64,
    max_n: usize,
    max_h: usize,
    points: usize,
    corrupt: bool,
) -> Vec<GradCheckPoint> {
    const FD_STEP: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::with_capacity(points);
    for _ in 0..points {
        let n = rng.gen_range(1..=max_n.max(1));
        let h = rng.gen_range(1..=max_h.max(1));
        let b = DMatrix::from_fn(n, 2 * n, |_, _| rng.gen_range(-1.0..1.0));
        let b_hat = synthetic_model(b);
        let weights = CostWeights {
            c_p: rng.gen_range(0.1..3.0),
            c_q: rng.gen_range(0.1..3.0),
            c_x: rng.gen_range(0.1..3.0),
        };
        let buffer: VecDeque<DVector<f64>> = (0..h)
            .map(|_| DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let w_new = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let u_tilde = DVector::from_fn(2 * n, |_, _| rng.gen_range(-1.0..1.0));
        let pv_avail = DVector::from_fn(n, |_, _| rng.gen_range(0.0..1.0));
        let m: Vec<DMatrix<f64>> = (0..h)
            .map(|_| DMatrix::from_fn(2 * n, n, |_, _| rng.gen_range(-0.5..0.5)))
            .collect();
        // Box strictly containing the pre-clip point, with margin well
        // above the finite-difference excursion.
        let pre_clip = &u_tilde + policy_term_slices(&m, &buffer);
        let lo = DVector::from_fn(2 * n, |i, _| pre_clip[i] - rng.gen_range(0.01..1.0));
        let hi = DVector::from_fn(2 * n, |i, _| pre_clip[i] + rng.gen_range(0.01..1.0));

        let inputs = SurrogateInputs {
            buffer: &buffer,
            w_new: &w_new,
            u_tilde: &u_tilde,
            b_hat: &b_hat,
            weights,
            lo: &lo,
            hi: &hi,
            pv_avail: &pv_avail,
        };
        let (_, mut analytic) = surrogate_cost_and_gradient(&m, &inputs);
        if corrupt {
            analytic[0] *= 1.001;
        }
        let numeric = finite_difference_gradient(&m, &inputs, FD_STEP);
        let mut diff = 0.0;
        let mut scale = 0.0;
        for (a, f) in analytic.iter().zip(&numeric) {
            diff += (a - f).norm_squared();
            scale += f.norm_squared();
        }
        let relative_error = diff.sqrt() / scale.sqrt().max(1e-12);
        results.push(GradCheckPoint {
            n,
            h,
            relative_error,
        });
    }
    results.sort_by(|a, b| b.relative_error.total_cmp(&a.relative_error));
    results
}

/// Central finite differences of [`surrogate_cost`] with respect to every
/// parameter entry. Test oracle; independent of the analytic path.
pub fn finite_difference_gradient(
    m: &[DMatrix<f64>],
    inputs: &SurrogateInputs,
    step: f64,
) -> Vec<DMatrix<f64>> {
    let mut work: Vec<DMatrix<f64>> = m.to_vec();
    let mut grads = Vec::with_capacity(m.len());
    for block_index in 0..m.len() {
        let (rows, cols) = (m[block_index].nrows(), m[block_index].ncols());
        let mut grad = DMatrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let original = work[block_index][(r, c)];
                work[block_index][(r, c)] = original + step;
                let up = surrogate_cost(&work, inputs);
                work[block_index][(r, c)] = original - step;
                let down = surrogate_cost(&work, inputs);
                work[block_index][(r, c)] = original;
                grad[(r, c)] = (up - down) / (2.0 * step);
            }
        }
        grads.push(grad);
    }
    grads
}

/// Wraps a bare dynamics matrix as a sensitivity model for harnesses that
/// do not start from a network (v0 = 1, R/X recovered from the halves).
pub fn synthetic_model(b: DMatrix<f64>) -> SensitivityModel {
    let n = b.nrows();
    assert_eq!(b.ncols(), 2 * n, "dynamics must be n x 2n");
    let kappa_b = spectral_norm(&b);
    SensitivityModel {
        r: b.view((0, 0), (n, n)).into_owned(),
        x: b.view((0, n), (n, n)).into_owned(),
        b,
        v0_kv: 1.0,
        kappa_b,
        provenance: crate::grid::Provenance::True,
    }
}

/// Convenience check used by tests and the simulator: every buffer entry
/// finite.
pub fn buffer_is_finite(state: &ControllerState) -> bool {
    state.buffer.iter().all(all_finite)
}
