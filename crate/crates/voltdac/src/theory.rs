//! Executable forms of the controller's stability and robustness bounds.
//!
//! All bound calculators are pure functions of [`TheoryConstants`]; the
//! constants themselves are estimated from a concrete scenario and
//! sensitivity model by [`estimate_constants`].

use nalgebra::DVector;
use serde::Serialize;

use crate::controller::CostWeights;
use crate::grid::{disturbance_from_loads, SensitivityModel};
use crate::scenario::Scenario;
use crate::{Error, Result};

/// Problem constants feeding the bound calculators.
///
/// `dim` is the problem dimensionality `max(dim x, dim u) = 2n`;
/// `d_bound` caps the state and input norms over a run,
/// `max(2 U~, kappa_B U~ + W)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoryConstants {
    /// Largest disturbance norm over the scenario.
    pub w: f64,
    /// Largest natural-input norm over the scenario.
    pub u_tilde: f64,
    /// Spectral norm of the dynamics.
    pub kappa_b: f64,
    /// Spectral-norm bound on the model estimation error.
    pub eps_b: f64,
    /// Cost Lipschitz constant over the bounded region.
    pub l: f64,
    /// Norm bound on state and input.
    pub d_bound: f64,
    /// Problem dimensionality.
    pub dim: usize,
}

impl TheoryConstants {
    /// Reconstruction-norm bound `eps_B U~ + W`.
    pub fn disturbance_bound(&self) -> f64 {
        self.eps_b * self.u_tilde + self.w
    }
}

/// Largest learning rate with a stability guarantee:
/// `2 U~ / (L D d (1 + kappa_B) (eps_B U~ + W)^2)`.
///
/// With `eps_B = 0` this is the error-free condition. A zero denominator
/// (degenerate quiescent scenario) yields `f64::INFINITY`, the documented
/// "no constraint" sentinel.
pub fn stability_learning_rate(consts: &TheoryConstants) -> f64 {
    let denominator = consts.l
        * consts.d_bound
        * consts.dim as f64
        * (1.0 + consts.kappa_b)
        * consts.disturbance_bound().powi(2);
    if denominator == 0.0 {
        f64::INFINITY
    } else {
        2.0 * consts.u_tilde / denominator
    }
}

/// Per-block initialization caps `(2 U~ / (eps_B U~ + W)) gamma^i` for
/// `i = 1..=h`.
pub fn init_param_caps(consts: &TheoryConstants, gamma: f64, h: usize) -> Result<Vec<f64>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Theory(format!(
            "gamma must be in (0, 1], got {gamma}"
        )));
    }
    if h == 0 {
        return Err(Error::Theory("tracing horizon must be at least 1".into()));
    }
    let denominator = consts.disturbance_bound();
    if denominator == 0.0 {
        return Err(Error::Theory(
            "eps_B * U~ + W is zero; initialization caps are unbounded".into(),
        ));
    }
    let base = 2.0 * consts.u_tilde / denominator;
    Ok((1..=h).map(|i| base * gamma.powi(i as i32)).collect())
}

/// Bound on the policy-gradient norm: `L D W d (1 + kappa_B)`.
pub fn gradient_norm_bound(consts: &TheoryConstants) -> f64 {
    consts.l * consts.d_bound * consts.w * consts.dim as f64 * (1.0 + consts.kappa_b)
}

/// Per-step envelopes on the input and state discrepancy between the
/// true-model and estimated-model closed loops.
#[derive(Debug, Clone, Serialize)]
pub struct DegradationEnvelope {
    /// `Y_t` for `t = 1..=t_max`: bound on `||u_t - u'_t||`.
    pub input: Vec<f64>,
    /// `X_{t+1} = kappa_B Y_t` for `t = 1..=t_max`: bound on
    /// `||x_{t+1} - x'_{t+1}||`.
    pub state: Vec<f64>,
    /// Geometric ratio `M_bar (kappa_B + eps_B)`.
    pub ratio: f64,
}

/// Base-case bound `||Delta u_1|| <= M_bar U~ eps_B`.
pub fn delta_u1_cap(consts: &TheoryConstants, m_bar: f64) -> f64 {
    m_bar * consts.u_tilde * consts.eps_b
}

/// Builds the discrepancy envelope: geometric in the ratio
/// `M_bar (kappa_B + eps_B)` from `||Delta u_1||`, additionally capped at
/// `U~` when the ratio exceeds one (saturation keeps the gap bounded).
///
/// Requires the inaccuracy regime `eps_B <= W / U~`.
pub fn degradation_envelope(
    consts: &TheoryConstants,
    m_bar: f64,
    t_max: usize,
    delta_u1: f64,
) -> Result<DegradationEnvelope> {
    if consts.u_tilde > 0.0 && consts.eps_b > consts.w / consts.u_tilde {
        return Err(Error::Theory(format!(
            "estimation error {} exceeds W / U~ = {}",
            consts.eps_b,
            consts.w / consts.u_tilde
        )));
    }
    if m_bar < 0.0 || delta_u1 < 0.0 {
        return Err(Error::Theory(
            "M_bar and the base discrepancy must be nonnegative".into(),
        ));
    }
    let ratio = m_bar * (consts.kappa_b + consts.eps_b);
    let mut input = Vec::with_capacity(t_max);
    let mut state = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        let geometric = ratio.powi(t as i32 - 1) * delta_u1;
        let y = if ratio <= 1.0 {
            geometric
        } else {
            geometric.min(consts.u_tilde)
        };
        input.push(y);
        state.push(consts.kappa_b * y);
    }
    Ok(DegradationEnvelope {
        input,
        state,
        ratio,
    })
}

/// Estimates the constants from a concrete scenario and model.
///
/// `W` and `U~` are exact maxima over the generated series; the Lipschitz
/// constant is the closed-form maximum gradient norm of the quadratic
/// cost over the region `||x||, ||u|| <= D`, divided by `D`:
/// `L = max(2 c_x, 2 max(c_p, c_q) (D + U~) / D)`.
pub fn estimate_constants(
    scenario: &Scenario,
    model: &SensitivityModel,
    weights: &CostWeights,
    eps_b: f64,
) -> Result<TheoryConstants> {
    if scenario.horizon == 0 {
        return Err(Error::Theory("scenario horizon is empty".into()));
    }
    let mut w_max = 0.0_f64;
    let mut u_max = 0.0_f64;
    for t in 0..scenario.horizon {
        let w_t: DVector<f64> =
            disturbance_from_loads(model, &scenario.p_load[t], &scenario.q_load[t]);
        w_max = w_max.max(w_t.norm());
        u_max = u_max.max(scenario.pv_avail[t].norm());
    }
    let kappa_b = model.kappa_b;
    let d_bound = (2.0 * u_max).max(kappa_b * u_max + w_max);
    let l = if d_bound > 0.0 {
        (2.0 * weights.c_x).max(2.0 * weights.c_p.max(weights.c_q) * (d_bound + u_max) / d_bound)
    } else {
        0.0
    };
    Ok(TheoryConstants {
        w: w_max,
        u_tilde: u_max,
        kappa_b,
        eps_b,
        l,
        d_bound,
        dim: 2 * model.bus_count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn consts(
        w: f64,
        u_tilde: f64,
        kappa_b: f64,
        eps_b: f64,
        l: f64,
        d_bound: f64,
        dim: usize,
    ) -> TheoryConstants {
        TheoryConstants {
            w,
            u_tilde,
            kappa_b,
            eps_b,
            l,
            d_bound,
            dim,
        }
    }

    #[test]
    fn learning_rate_error_free_substitution() {
        let c = consts(0.5, 1.0, 1.0, 0.0, 1.0, 2.0, 2);
        assert_relative_eq!(stability_learning_rate(&c), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn learning_rate_with_model_error_substitution() {
        let c = consts(0.5, 1.0, 1.0, 0.5, 1.0, 2.0, 2);
        assert_relative_eq!(stability_learning_rate(&c), 0.25, max_relative = 1e-12);
    }

    #[test]
    fn learning_rate_shrinks_with_model_error() {
        for eps in [0.01, 0.1, 0.5, 1.0] {
            let clean = consts(0.5, 1.0, 1.3, 0.0, 2.0, 2.6, 4);
            let noisy = consts(0.5, 1.0, 1.3, eps, 2.0, 2.6, 4);
            assert!(stability_learning_rate(&clean) >= stability_learning_rate(&noisy));
        }
    }

    #[test]
    fn learning_rate_degenerate_is_infinite() {
        let c = consts(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2);
        assert!(stability_learning_rate(&c).is_infinite());
    }

    #[test]
    fn init_caps_theorem_form() {
        let c = consts(1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2);
        let caps = init_param_caps(&c, 1.0, 1).unwrap();
        assert_eq!(caps.len(), 1);
        assert_relative_eq!(caps[0], 2.0, max_relative = 1e-12);
    }

    #[test]
    fn init_caps_substitution_with_decay() {
        let c = consts(0.5, 1.0, 0.0, 0.5, 0.0, 0.0, 2);
        let caps = init_param_caps(&c, 0.5, 2).unwrap();
        assert_relative_eq!(caps[0], 1.0, max_relative = 1e-12);
        assert_relative_eq!(caps[1], 0.5, max_relative = 1e-12);
    }

    #[test]
    fn smaller_gamma_shrinks_later_caps() {
        let c = consts(1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2);
        let wide = init_param_caps(&c, 0.9, 4).unwrap();
        let tight = init_param_caps(&c, 0.5, 4).unwrap();
        for (w, t) in wide.iter().zip(&tight) {
            assert!(t <= w);
        }
        assert!(tight.windows(2).all(|p| p[1] < p[0]));
    }

    #[test]
    fn init_caps_reject_zero_denominator_and_bad_gamma() {
        let c = consts(0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2);
        assert!(init_param_caps(&c, 0.5, 1).is_err());
        let c = consts(1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2);
        assert!(init_param_caps(&c, 0.0, 1).is_err());
        assert!(init_param_caps(&c, 1.1, 1).is_err());
        assert!(init_param_caps(&c, 0.5, 0).is_err());
    }

    #[test]
    fn gradient_bound_substitution() {
        let c = consts(0.5, 0.0, 1.0, 0.0, 1.0, 2.0, 2);
        assert_relative_eq!(gradient_norm_bound(&c), 4.0, max_relative = 1e-12);
        let flat = consts(0.5, 0.0, 0.0, 0.0, 1.0, 2.0, 2);
        assert_relative_eq!(gradient_norm_bound(&flat), 2.0, max_relative = 1e-12);
    }

    #[test]
    fn envelope_base_case_substitution() {
        let c = consts(1.0, 1.0, 0.4, 0.1, 0.0, 0.0, 2);
        assert_relative_eq!(delta_u1_cap(&c, 1.0), 0.1, max_relative = 1e-12);
    }

    #[test]
    fn envelope_contracts_geometrically() {
        let c = consts(1.0, 1.0, 0.4, 0.1, 0.0, 0.0, 2);
        let envelope = degradation_envelope(&c, 1.0, 5, 0.1).unwrap();
        assert_relative_eq!(envelope.ratio, 0.5, max_relative = 1e-12);
        for (t, y) in envelope.input.iter().enumerate() {
            assert_relative_eq!(*y, 0.5f64.powi(t as i32) * 0.1, max_relative = 1e-12);
            assert_relative_eq!(envelope.state[t], 0.4 * y, max_relative = 1e-12);
        }
    }

    #[test]
    fn envelope_caps_at_u_tilde_in_expansion() {
        let c = consts(1.0, 1.0, 1.5, 0.5, 0.0, 0.0, 2);
        let envelope = degradation_envelope(&c, 1.0, 6, 0.5).unwrap();
        assert!(envelope.ratio > 1.0);
        assert!(envelope.input.iter().all(|&y| y <= 1.0 + 1e-12));
        assert_relative_eq!(envelope.input[5], 1.0, max_relative = 1e-12);
    }

    #[test]
    fn envelope_rejects_violated_precondition() {
        let c = consts(0.5, 1.0, 0.4, 0.6, 0.0, 0.0, 2);
        assert!(degradation_envelope(&c, 1.0, 3, 0.1).is_err());
    }

    #[test]
    fn constants_from_quiescent_scenario_are_zero() {
        use std::collections::BTreeSet;
        let net = crate::grid::NetworkModel::new(
            1,
            vec![crate::grid::Line {
                from: 0,
                to: 1,
                r_ohm: 0.5,
                x_ohm: 1.0,
            }],
            11.0,
            BTreeSet::new(),
        )
        .unwrap();
        let model = crate::grid::compute_sensitivity(&net).unwrap();
        let zero = DVector::zeros(1);
        let scenario = Scenario::generate(
            1,
            10,
            0.0,
            0.0,
            &zero,
            &zero,
            &BTreeSet::new(),
            &[0.0],
            &[],
            0,
        )
        .unwrap();
        let weights = CostWeights {
            c_p: 3.0,
            c_q: 1.0,
            c_x: 0.5,
        };
        let consts = estimate_constants(&scenario, &model, &weights, 0.0).unwrap();
        assert_eq!(consts.w, 0.0);
        assert_eq!(consts.u_tilde, 0.0);
        assert_eq!(consts.dim, 2);
        assert!(stability_learning_rate(&consts).is_infinite());
    }

    #[test]
    fn constants_single_bus_constant_availability() {
        use std::collections::BTreeSet;
        let net = crate::grid::NetworkModel::new(
            1,
            vec![crate::grid::Line {
                from: 0,
                to: 1,
                r_ohm: 0.5,
                x_ohm: 1.0,
            }],
            11.0,
            [1].into_iter().collect(),
        )
        .unwrap();
        let model = crate::grid::compute_sensitivity(&net).unwrap();
        let zero = DVector::zeros(1);
        let sites: BTreeSet<usize> = [1].into_iter().collect();
        let mut scenario =
            Scenario::generate(1, 5, 0.0, 0.0, &zero, &zero, &sites, &[1.0], &[], 0).unwrap();
        // Pin availability to exactly 1.0 to make U~ transparent.
        for avail in &mut scenario.pv_avail {
            avail[0] = 1.0;
        }
        let weights = CostWeights {
            c_p: 3.0,
            c_q: 1.0,
            c_x: 0.5,
        };
        let consts = estimate_constants(&scenario, &model, &weights, 0.0).unwrap();
        assert_relative_eq!(consts.u_tilde, 1.0, max_relative = 1e-12);
        assert_eq!(consts.w, 0.0);
        assert_relative_eq!(consts.d_bound, 2.0, max_relative = 1e-12);
    }
}
