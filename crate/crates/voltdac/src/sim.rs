//! Closed-loop execution against the true dynamics, with communication
//! delay, divergence detection, metrics, and parameter sweeps.
//!
//! Each step: the inverters form the natural input from the latest
//! availability, apply the controller's most recently received parameters,
//! the true plant advances `x_{t+1} = B u_t + w_t`, and the controller
//! consumes the (possibly delayed) measurement to reconstruct the
//! disturbance and take one gradient step. Runs are deterministic given
//! the scenario and perturbation seeds; the loop itself draws no
//! randomness.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::{direct_opt_input, no_control_input, QpProblem};
use crate::controller::{
    compute_input, estimate_disturbance, surrogate_cost_and_gradient, update_params,
    ControllerState, CostWeights, SurrogateInputs,
};
use crate::grid::{disturbance_from_loads, voltage_step, SensitivityModel};
use crate::linalg::{all_finite, spectral_norm};
use crate::scenario::{InputBounds, Scenario};
use crate::{Error, Result};

/// Which policy closes the loop.
#[derive(Debug, Clone)]
pub enum Policy {
    Dac {
        state: ControllerState,
        project: bool,
    },
    DirectOpt {
        tol: f64,
        max_iter: usize,
    },
    NoControl,
}

/// Everything one closed-loop run needs, fully built.
#[derive(Debug, Clone)]
pub struct RunSetup {
    /// True dynamics applied by the plant.
    pub plant: SensitivityModel,
    /// Model estimate available to the controller.
    pub estimate: SensitivityModel,
    pub scenario: Scenario,
    pub bounds: InputBounds,
    pub weights: CostWeights,
    pub policy: Policy,
    /// One-way communication delay in steps, applied in both directions.
    pub delay: usize,
    /// Voltage-deviation safety interval in kV.
    pub limit_lo: f64,
    pub limit_hi: f64,
}

/// Everything recorded about one step `t`. `x_next` is the resulting
/// deviation `x_{t+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub x_next: DVector<f64>,
    pub u: DVector<f64>,
    pub w: DVector<f64>,
    pub w_hat: DVector<f64>,
    pub u_tilde: DVector<f64>,
    /// Pre-saturation input; the policy term is `pre_clip - u_tilde`.
    /// Absent for the baselines.
    pub pre_clip: Option<DVector<f64>>,
    /// Spectral norms of the parameter blocks in effect at this step.
    pub m_norms: Vec<f64>,
    pub cost_curtail: f64,
    pub cost_reactive: f64,
    pub cost_regulation: f64,
    pub violation: bool,
}

/// Full record of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub steps: Vec<StepRecord>,
    pub diverged: bool,
    pub limit_lo: f64,
    pub limit_hi: f64,
}

impl SimulationTrace {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// Steps whose consecutive policy-term variation exceeds twice the
    /// natural-input norm — the literal stability inequality. Only
    /// meaningful for the disturbance-action policy.
    pub fn variation_violations(&self) -> Option<Vec<usize>> {
        let terms: Vec<DVector<f64>> = self
            .steps
            .iter()
            .map(|s| s.pre_clip.as_ref().map(|pre| pre - &s.u_tilde))
            .collect::<Option<Vec<_>>>()?;
        let mut violations = Vec::new();
        for t in 0..terms.len().saturating_sub(1) {
            let variation = (&terms[t + 1] - &terms[t]).norm();
            let budget = 2.0 * self.steps[t].u_tilde.norm();
            if variation > budget * (1.0 + 1e-12) {
                violations.push(t);
            }
        }
        Some(violations)
    }
}

/// Aggregate metrics over one trace.
#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    /// `(1/T) sum_t ||x_t||^2`.
    pub avg_voltage_deviation: f64,
    /// `sum_t (c_p ||p - p_bar||^2 + c_q ||q||^2)` — the control-only
    /// cost; the regulation term is reported separately.
    pub total_control_cost: f64,
    pub total_regulation_cost: f64,
    pub per_bus_mean: Vec<f64>,
    /// Per-bus standard deviation of the deviation series over time.
    pub per_bus_std: Vec<f64>,
    /// The mean-over-std fluctuation ratio, reported in both orientations
    /// next to the raw std; entries are None where the denominator
    /// vanishes.
    pub per_bus_mean_over_std: Vec<Option<f64>>,
    /// Steps with at least one coordinate outside the safety interval.
    pub violation_steps: usize,
    /// Total coordinate violations.
    pub violation_entries: usize,
    /// Largest excess beyond a limit, kV.
    pub max_violation_kv: f64,
    /// Steps violating the consecutive-variation inequality (policy runs).
    pub variation_violations: Option<usize>,
    pub diverged: bool,
    pub horizon: usize,
}

struct Measurement {
    arrival: usize,
    u: DVector<f64>,
    x_next: DVector<f64>,
    u_tilde: DVector<f64>,
    lo: DVector<f64>,
    hi: DVector<f64>,
    pv: DVector<f64>,
}

#[derive(Clone)]
struct ParamPacket {
    arrival: usize,
    m: Vec<DMatrix<f64>>,
    buffer: VecDeque<DVector<f64>>,
    m_norms: Vec<f64>,
}

/// Runs the closed loop to the scenario horizon, or until divergence.
///
/// With a one-way delay of `T_d` steps, the controller update at step `t`
/// consumes the measurement taken at `t - T_d`, and the inverters at step
/// `t` act with the parameters produced at `t - T_d`; the initial
/// parameters serve during warmup. `T_d = 0` reproduces the undelayed
/// update order exactly.
pub fn run_closed_loop(setup: &RunSetup) -> SimulationTrace {
    let scenario = &setup.scenario;
    let bus_count = setup.plant.bus_count();
    let horizon = scenario.horizon;
    let delay = setup.delay;
    let diverge_at = 100.0 * setup.limit_lo.abs().max(setup.limit_hi.abs());

    let mut controller = match &setup.policy {
        Policy::Dac { state, .. } => state.clone(),
        // The baselines keep a single-slot buffer as their persistence
        // forecast of the disturbance.
        _ => ControllerState::from_scalars(bus_count, 1, 0.0, 0.0, 0.0, 1.0),
    };
    let project = matches!(setup.policy, Policy::Dac { project: true, .. });

    let mut in_effect = ParamPacket {
        arrival: 0,
        m: controller.m.clone(),
        buffer: controller.buffer.clone(),
        m_norms: controller.m.iter().map(spectral_norm).collect(),
    };
    let mut measurements: VecDeque<Measurement> = VecDeque::new();
    let mut packets: VecDeque<ParamPacket> = VecDeque::new();
    let mut previous_u: Option<DVector<f64>> = None;

    let mut steps = Vec::with_capacity(horizon);
    let mut diverged = false;

    for t in 0..horizon {
        while packets.front().map_or(false, |p| p.arrival <= t) {
            in_effect = packets.pop_front().expect("checked front");
        }

        let u_tilde = scenario.natural_input(t);
        let lo = &setup.bounds.lo[t];
        let hi = &setup.bounds.hi[t];
        let pv = &scenario.pv_avail[t];

        let (u, pre_clip, m_norms) = match &setup.policy {
            Policy::NoControl => (no_control_input(&u_tilde, lo, hi), None, Vec::new()),
            Policy::Dac { .. } => {
                let acting = ControllerState {
                    m: in_effect.m.clone(),
                    buffer: in_effect.buffer.clone(),
                    eta: controller.eta,
                    gamma: controller.gamma,
                    caps: None,
                };
                let (u, pre) = compute_input(&acting, &u_tilde, lo, hi);
                (u, Some(pre), in_effect.m_norms.clone())
            }
            Policy::DirectOpt { tol, max_iter } => {
                let forecast = in_effect.buffer[0].clone();
                let problem = QpProblem {
                    b_hat: &setup.estimate.b,
                    w_hat: &forecast,
                    u_tilde: &u_tilde,
                    lo,
                    hi,
                    weights: setup.weights,
                };
                let solved = direct_opt_input(
                    &problem,
                    previous_u.as_ref(),
                    setup.estimate.kappa_b,
                    *tol,
                    *max_iter,
                )
                .expect("validated per-step program");
                (solved.u, None, Vec::new())
            }
        };
        previous_u = Some(u.clone());

        let w = disturbance_from_loads(&setup.plant, &scenario.p_load[t], &scenario.q_load[t]);
        let x_next = voltage_step(&setup.plant, &u, &w);
        let w_hat = estimate_disturbance(&x_next, &setup.estimate, &u);

        let (cost_curtail, cost_reactive) = setup.weights.control_cost(&u, pv);
        let cost_regulation = setup.weights.c_x * x_next.norm_squared();
        let violation = x_next
            .iter()
            .any(|&v| v < setup.limit_lo || v > setup.limit_hi);
        let blown = !all_finite(&x_next) || x_next.iter().any(|&v| v.abs() > diverge_at);

        steps.push(StepRecord {
            x_next: x_next.clone(),
            u: u.clone(),
            w,
            w_hat,
            u_tilde: u_tilde.clone(),
            pre_clip,
            m_norms,
            cost_curtail,
            cost_reactive,
            cost_regulation,
            violation,
        });
        if blown {
            diverged = true;
            break;
        }

        measurements.push_back(Measurement {
            arrival: t + delay,
            u,
            x_next,
            u_tilde,
            lo: lo.clone(),
            hi: hi.clone(),
            pv: pv.clone(),
        });

        while measurements.front().map_or(false, |m| m.arrival <= t) {
            let meas = measurements.pop_front().expect("checked front");
            let w_hat = estimate_disturbance(&meas.x_next, &setup.estimate, &meas.u);
            match &setup.policy {
                Policy::Dac { .. } => {
                    let inputs = SurrogateInputs {
                        buffer: &controller.buffer,
                        w_new: &w_hat,
                        u_tilde: &meas.u_tilde,
                        b_hat: &setup.estimate,
                        weights: setup.weights,
                        lo: &meas.lo,
                        hi: &meas.hi,
                        pv_avail: &meas.pv,
                    };
                    let (_, gradient) = surrogate_cost_and_gradient(&controller.m, &inputs);
                    controller.push_disturbance(w_hat);
                    if update_params(&mut controller, &gradient, controller.eta, project).is_err()
                    {
                        diverged = true;
                        break;
                    }
                }
                _ => controller.push_disturbance(w_hat),
            }
            packets.push_back(ParamPacket {
                arrival: t + delay,
                m: controller.m.clone(),
                buffer: controller.buffer.clone(),
                m_norms: match &setup.policy {
                    Policy::Dac { .. } => controller.m.iter().map(spectral_norm).collect(),
                    _ => Vec::new(),
                },
            });
        }
        if diverged {
            break;
        }
    }

    SimulationTrace {
        steps,
        diverged,
        limit_lo: setup.limit_lo,
        limit_hi: setup.limit_hi,
    }
}

/// Computes the evaluation metrics over a trace. Diverged traces are
/// summarized over their recorded prefix, with the flag carried through.
pub fn compute_metrics(trace: &SimulationTrace) -> Result<Metrics> {
    let horizon = trace.steps.len();
    if horizon == 0 {
        return Err(Error::Simulation("empty trace".into()));
    }
    let bus_count = trace.steps[0].x_next.len();
    let mut avg_dev = 0.0;
    let mut control_cost = 0.0;
    let mut regulation_cost = 0.0;
    let mut mean = vec![0.0; bus_count];
    let mut violation_steps = 0;
    let mut violation_entries = 0;
    let mut max_violation: f64 = 0.0;
    for step in &trace.steps {
        avg_dev += step.x_next.norm_squared();
        control_cost += step.cost_curtail + step.cost_reactive;
        regulation_cost += step.cost_regulation;
        if step.violation {
            violation_steps += 1;
        }
        for i in 0..bus_count {
            let x = step.x_next[i];
            mean[i] += x;
            if x < trace.limit_lo || x > trace.limit_hi {
                violation_entries += 1;
                max_violation = max_violation.max((x - trace.limit_hi).max(trace.limit_lo - x));
            }
        }
    }
    avg_dev /= horizon as f64;
    for m in &mut mean {
        *m /= horizon as f64;
    }
    let mut std = vec![0.0; bus_count];
    for step in &trace.steps {
        for i in 0..bus_count {
            std[i] += (step.x_next[i] - mean[i]).powi(2);
        }
    }
    let mut mean_over_std = Vec::with_capacity(bus_count);
    for i in 0..bus_count {
        std[i] = (std[i] / horizon as f64).sqrt();
        mean_over_std.push(if std[i] > 0.0 {
            Some(mean[i] / std[i])
        } else {
            None
        });
    }
    Ok(Metrics {
        avg_voltage_deviation: avg_dev,
        total_control_cost: control_cost,
        total_regulation_cost: regulation_cost,
        per_bus_mean: mean,
        per_bus_std: std,
        per_bus_mean_over_std: mean_over_std,
        violation_steps,
        violation_entries,
        max_violation_kv: max_violation,
        variation_violations: trace.variation_violations().map(|v| v.len()),
        diverged: trace.diverged,
        horizon,
    })
}

/// The quantity a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    TracingHorizon,
    Alpha,
    Eta,
    Delay,
    EpsScaling,
    Seed,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "H" | "h" => Ok(Self::TracingHorizon),
            "alpha" => Ok(Self::Alpha),
            "eta" => Ok(Self::Eta),
            "T_d" | "td" | "delay" => Ok(Self::Delay),
            "eps_scaling" => Ok(Self::EpsScaling),
            "seed" => Ok(Self::Seed),
            other => Err(Error::Config(format!(
                "unknown sweep axis '{other}' (expected H, alpha, eta, T_d, eps_scaling or seed)"
            ))),
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Self::TracingHorizon => "H",
            Self::Alpha => "alpha",
            Self::Eta => "eta",
            Self::Delay => "T_d",
            Self::EpsScaling => "eps_scaling",
            Self::Seed => "seed",
        };
        f.write_str(name)
    }
}

/// One row of a sweep table.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub metrics: Metrics,
}

/// Runs one independent simulation per axis value, sharing every other
/// setting (master-seed discipline: only the swept quantity changes).
/// Rows come back sorted by value; a diverged run is recorded in its row
/// rather than aborting the sweep. `jobs` bounds the parallelism.
pub fn sweep(
    config: &crate::config::SimulationConfig,
    base_dir: &std::path::Path,
    axis: SweepAxis,
    values: &[f64],
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep values must not be empty".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let run_one = |value: &f64| -> Result<SweepRow> {
        let varied = config.with_axis_value(axis, *value)?;
        let setup = varied.build(base_dir)?;
        let trace = run_closed_loop(&setup);
        let metrics = compute_metrics(&trace)?;
        Ok(SweepRow {
            value: *value,
            metrics,
        })
    };
    if jobs <= 1 {
        sorted.iter().map(run_one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Simulation(format!("thread pool: {e}")))?;
        pool.install(|| sorted.par_iter().map(run_one).collect())
    }
}

/// Runs the configured controller under two differently seeded model
/// perturbations of the same plant and scenario. The spread is the
/// largest per-bus trajectory difference over the common prefix.
pub fn paired_inaccuracy_run(
    config: &crate::config::SimulationConfig,
    base_dir: &std::path::Path,
    seed_one: u64,
    seed_two: u64,
) -> Result<(SimulationTrace, SimulationTrace, f64)> {
    let first = config.with_model_error_seed(seed_one);
    let second = config.with_model_error_seed(seed_two);
    let trace_one = run_closed_loop(&first.build(base_dir)?);
    let trace_two = run_closed_loop(&second.build(base_dir)?);
    let spread = trajectory_spread(&trace_one, &trace_two);
    Ok((trace_one, trace_two, spread))
}

/// `max_{t,i} |x_i^{(1)}(t) - x_i^{(2)}(t)|` over the common prefix.
pub fn trajectory_spread(a: &SimulationTrace, b: &SimulationTrace) -> f64 {
    let mut spread: f64 = 0.0;
    for (sa, sb) in a.steps.iter().zip(&b.steps) {
        for i in 0..sa.x_next.len() {
            spread = spread.max((sa.x_next[i] - sb.x_next[i]).abs());
        }
    }
    spread
}
