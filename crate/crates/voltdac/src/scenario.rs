//! Scenario generation: correlated load series, solar availability with
//! sudden drops, and the per-step inverter capacity box.

use std::collections::BTreeSet;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::linalg::all_finite;
use crate::{Error, Result};

/// A sharp availability drop (cloud front): output is multiplied by
/// `1 - depth` for `duration` steps starting at `start`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropEvent {
    pub start: usize,
    pub duration: usize,
    /// Fraction of output lost, in (0, 1].
    pub depth: f64,
}

/// Generated time series driving one simulation.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub horizon: usize,
    /// Uncontrollable active loads per step, MW.
    pub p_load: Vec<DVector<f64>>,
    /// Uncontrollable reactive loads per step, MVar.
    pub q_load: Vec<DVector<f64>>,
    /// Available solar active power per step, MW; zero off the PV sites.
    pub pv_avail: Vec<DVector<f64>>,
    pub alpha: f64,
    pub sigma: f64,
    pub seed: u64,
    /// Fraction of steps at which the load recursion was clipped at zero.
    pub clip_rate: f64,
}

/// Per-step input box `[u_lo, u_hi]` for the stacked `[p; q]` input.
#[derive(Debug, Clone)]
pub struct InputBounds {
    pub lo: Vec<DVector<f64>>,
    pub hi: Vec<DVector<f64>>,
    pub reactive_fraction: f64,
}

impl InputBounds {
    pub fn horizon(&self) -> usize {
        self.lo.len()
    }
}

/// Raw AR(1) recursion `s_{t+1} = sqrt(1-alpha) s_t + sqrt(alpha) eta_t`
/// with `eta_t ~ N(0, sigma^2)`, no clipping. Exposed for statistical
/// checks; load generation clips this at zero.
pub fn ar1_series(
    length: usize,
    alpha: f64,
    sigma: f64,
    start: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let keep = (1.0 - alpha).sqrt();
    let mix = alpha.sqrt();
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("sigma must be nonnegative");
    let mut series = Vec::with_capacity(length);
    let mut value = start;
    for _ in 0..length {
        series.push(value);
        value = keep * value + mix * noise.sample(rng);
    }
    series
}

/// Generates the load series: independent AR(1) per bus for both `p` and
/// `q`, seeded, with the `t = 0` row pinned to the base loads and the
/// result clipped at zero from below.
///
/// Per-bus noise is `sigma` scaled by the bus's base load relative to the
/// mean base load, so heavier buses fluctuate proportionally more; with
/// uniform bases every bus gets exactly `sigma`.
pub fn generate_loads(
    bus_count: usize,
    horizon: usize,
    alpha: f64,
    sigma: f64,
    base_p: &DVector<f64>,
    base_q: &DVector<f64>,
    seed: u64,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>, f64)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Scenario(format!(
            "alpha must be in [0, 1], got {alpha}"
        )));
    }
    if sigma < 0.0 {
        return Err(Error::Scenario(format!(
            "sigma must be nonnegative, got {sigma}"
        )));
    }
    if horizon == 0 {
        return Err(Error::Scenario("horizon must be at least 1".into()));
    }
    assert_eq!(base_p.len(), bus_count, "base_p length mismatch");
    assert_eq!(base_q.len(), bus_count, "base_q length mismatch");

    let mean_base = base_p.iter().sum::<f64>() / bus_count.max(1) as f64;
    let scale = |base: f64| {
        if mean_base > 0.0 {
            sigma * base / mean_base
        } else {
            sigma
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = vec![DVector::zeros(bus_count); horizon];
    let mut q = vec![DVector::zeros(bus_count); horizon];
    let mut clipped = 0usize;
    let mut total = 0usize;
    for bus in 0..bus_count {
        for (series, base) in [(&mut p, base_p), (&mut q, base_q)] {
            let raw = ar1_series(horizon, alpha, scale(base_p[bus]), base[bus], &mut rng);
            for (t, value) in raw.into_iter().enumerate() {
                total += 1;
                if value < 0.0 {
                    clipped += 1;
                }
                series[t][bus] = value.max(0.0);
            }
        }
    }
    let clip_rate = clipped as f64 / total.max(1) as f64;
    Ok((p, q, clip_rate))
}

/// Smooth base availability shape over the horizon, in (0, 1]. A raised
/// bell: full output mid-horizon, 60% at the edges, never zero, so the
/// natural input stays well defined at every step.
pub fn base_pv_profile(t: usize, horizon: usize) -> f64 {
    if horizon <= 1 {
        return 1.0;
    }
    let phase = std::f64::consts::PI * t as f64 / (horizon - 1) as f64;
    0.6 + 0.4 * phase.sin().powi(2)
}

/// Generates per-site availability: each site gets one of the rated
/// `sizes` (seeded uniform assignment), scaled by the smooth base profile
/// and cut by `1 - depth` during drop events. Zero at non-PV buses.
pub fn generate_pv(
    bus_count: usize,
    horizon: usize,
    pv_sites: &BTreeSet<usize>,
    sizes: &[f64],
    events: &[DropEvent],
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    if sizes.is_empty() {
        return Err(Error::Scenario("pv sizes list must not be empty".into()));
    }
    if sizes.iter().any(|&s| !(s.is_finite() && s >= 0.0)) {
        return Err(Error::Scenario("pv sizes must be nonnegative".into()));
    }
    for event in events {
        if event.start + event.duration > horizon {
            return Err(Error::Scenario(format!(
                "pv event [{}, {}) extends past the horizon {horizon}",
                event.start,
                event.start + event.duration
            )));
        }
        if !(event.depth > 0.0 && event.depth <= 1.0) {
            return Err(Error::Scenario(format!(
                "pv event depth must be in (0, 1], got {}",
                event.depth
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rated = DVector::zeros(bus_count);
    for &site in pv_sites {
        assert!(site >= 1 && site <= bus_count, "pv site out of range");
        rated[site - 1] = sizes[rng.gen_range(0..sizes.len())];
    }
    let mut avail = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let mut factor = base_pv_profile(t, horizon);
        for event in events {
            if t >= event.start && t < event.start + event.duration {
                factor *= 1.0 - event.depth;
            }
        }
        avail.push(&rated * factor);
    }
    Ok(avail)
}

/// Builds the per-step capacity box from availability: active injection in
/// `[0, p̄]`, reactive within `±reactive_fraction · p̄`. Buses without
/// availability get zero-width bounds.
pub fn capacity_bounds(pv_avail: &[DVector<f64>], reactive_fraction: f64) -> Result<InputBounds> {
    if reactive_fraction < 0.0 {
        return Err(Error::Scenario(format!(
            "reactive fraction must be nonnegative, got {reactive_fraction}"
        )));
    }
    let mut lo = Vec::with_capacity(pv_avail.len());
    let mut hi = Vec::with_capacity(pv_avail.len());
    for avail in pv_avail {
        let n = avail.len();
        debug_assert!(avail.iter().all(|&a| a >= 0.0), "availability must be >= 0");
        let mut lo_t = DVector::zeros(2 * n);
        let mut hi_t = DVector::zeros(2 * n);
        for i in 0..n {
            hi_t[i] = avail[i];
            lo_t[n + i] = -reactive_fraction * avail[i];
            hi_t[n + i] = reactive_fraction * avail[i];
        }
        lo.push(lo_t);
        hi.push(hi_t);
    }
    Ok(InputBounds {
        lo,
        hi,
        reactive_fraction,
    })
}

impl Scenario {
    /// Assembles a full scenario from generator settings.
    #[allow(clippy::too_many_arguments)]
    pub fn generate(
        bus_count: usize,
        horizon: usize,
        alpha: f64,
        sigma: f64,
        base_p: &DVector<f64>,
        base_q: &DVector<f64>,
        pv_sites: &BTreeSet<usize>,
        pv_sizes: &[f64],
        pv_events: &[DropEvent],
        seed: u64,
    ) -> Result<Self> {
        let (p_load, q_load, clip_rate) =
            generate_loads(bus_count, horizon, alpha, sigma, base_p, base_q, seed)?;
        // Decorrelate the PV size assignment from the load noise stream.
        let pv_avail = generate_pv(
            bus_count,
            horizon,
            pv_sites,
            pv_sizes,
            pv_events,
            seed.wrapping_add(0x9e37_79b9),
        )?;
        let scenario = Self {
            horizon,
            p_load,
            q_load,
            pv_avail,
            alpha,
            sigma,
            seed,
            clip_rate,
        };
        debug_assert!(scenario.is_finite());
        Ok(scenario)
    }

    /// Natural (uncontrolled) input at step `t`: full available active
    /// power, zero reactive.
    pub fn natural_input(&self, t: usize) -> DVector<f64> {
        let avail = &self.pv_avail[t];
        let n = avail.len();
        let mut u = DVector::zeros(2 * n);
        u.rows_mut(0, n).copy_from(avail);
        u
    }

    pub fn is_finite(&self) -> bool {
        self.p_load.iter().all(all_finite)
            && self.q_load.iter().all(all_finite)
            && self.pv_avail.iter().all(all_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn uniform(n: usize, value: f64) -> DVector<f64> {
        DVector::from_element(n, value)
    }

    fn lag1_autocorrelation(series: &[f64]) -> f64 {
        let len = series.len();
        let mean = series.iter().sum::<f64>() / len as f64;
        let mut num = 0.0;
        let mut den = 0.0;
        for t in 0..len {
            let d = series[t] - mean;
            den += d * d;
            if t + 1 < len {
                num += d * (series[t + 1] - mean);
            }
        }
        num / den
    }

    #[test]
    fn alpha_zero_freezes_loads_at_base() {
        let base = uniform(3, 0.4);
        let (p, q, clip) = generate_loads(3, 50, 0.0, 0.5, &base, &base, 1).unwrap();
        for t in 0..50 {
            assert_eq!(p[t], base);
            assert_eq!(q[t], base);
        }
        assert_eq!(clip, 0.0);
    }

    #[test]
    fn alpha_one_series_is_uncorrelated() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let series = ar1_series(10_000, 1.0, 1.0, 0.0, &mut rng);
        assert!(lag1_autocorrelation(&series).abs() < 0.05);
    }

    #[test]
    fn stationary_variance_matches_sigma_squared() {
        let sigma = 0.06;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let series = ar1_series(100_000, 0.1, sigma, 0.0, &mut rng);
        // Skip the burn-in from the deterministic start.
        let tail = &series[1000..];
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        let var = tail.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / tail.len() as f64;
        assert_relative_eq!(var, sigma * sigma, max_relative = 0.1);
    }

    #[test]
    fn loads_are_nonnegative_and_deterministic() {
        let base = uniform(4, 0.05);
        let (p1, q1, _) = generate_loads(4, 300, 0.1, 0.06, &base, &base, 9).unwrap();
        let (p2, q2, _) = generate_loads(4, 300, 0.1, 0.06, &base, &base, 9).unwrap();
        for t in 0..300 {
            assert_eq!(p1[t], p2[t]);
            assert_eq!(q1[t], q2[t]);
            assert!(p1[t].iter().all(|&v| v >= 0.0 && v.is_finite()));
            assert!(q1[t].iter().all(|&v| v >= 0.0 && v.is_finite()));
        }
    }

    #[test]
    fn rejects_alpha_outside_unit_interval() {
        let base = uniform(1, 0.1);
        assert!(generate_loads(1, 10, 1.5, 0.1, &base, &base, 0).is_err());
        assert!(generate_loads(1, 10, -0.1, 0.1, &base, &base, 0).is_err());
    }

    #[test]
    fn pv_without_events_is_positive_base_profile() {
        let sites: BTreeSet<usize> = [1, 3].into_iter().collect();
        let avail = generate_pv(3, 100, &sites, &[0.5], &[], 4).unwrap();
        for t in 0..100 {
            assert!(avail[t][0] > 0.0);
            assert_eq!(avail[t][1], 0.0);
            assert!(avail[t][2] > 0.0);
            assert_relative_eq!(avail[t][0], 0.5 * base_pv_profile(t, 100), epsilon = 1e-15);
        }
    }

    #[test]
    fn pv_event_cuts_exactly_by_depth() {
        let sites: BTreeSet<usize> = [1].into_iter().collect();
        let event = DropEvent {
            start: 20,
            duration: 10,
            depth: 0.8,
        };
        let clean = generate_pv(1, 60, &sites, &[1.0], &[], 5).unwrap();
        let dropped = generate_pv(1, 60, &sites, &[1.0], &[event], 5).unwrap();
        for t in 0..60 {
            if (20..30).contains(&t) {
                assert_relative_eq!(dropped[t][0], 0.2 * clean[t][0], max_relative = 1e-12);
            } else {
                assert_eq!(dropped[t][0], clean[t][0]);
            }
        }
    }

    #[test]
    fn pv_is_deterministic_per_seed() {
        let sites: BTreeSet<usize> = [1, 2, 3].into_iter().collect();
        let a = generate_pv(3, 50, &sites, &[0.2, 0.3, 0.45], &[], 6).unwrap();
        let b = generate_pv(3, 50, &sites, &[0.2, 0.3, 0.45], &[], 6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pv_rejects_bad_events() {
        let sites: BTreeSet<usize> = [1].into_iter().collect();
        let past_end = DropEvent {
            start: 55,
            duration: 10,
            depth: 0.5,
        };
        assert!(generate_pv(1, 60, &sites, &[1.0], &[past_end], 0).is_err());
        let bad_depth = DropEvent {
            start: 0,
            duration: 5,
            depth: 1.5,
        };
        assert!(generate_pv(1, 60, &sites, &[1.0], &[bad_depth], 0).is_err());
    }

    #[test]
    fn bounds_zero_width_without_availability() {
        let avail = vec![DVector::from_vec(vec![0.0, 1.0])];
        let bounds = capacity_bounds(&avail, 0.4).unwrap();
        assert_eq!(bounds.lo[0][0], 0.0);
        assert_eq!(bounds.hi[0][0], 0.0);
        assert_eq!(bounds.lo[0][2], 0.0);
        assert_eq!(bounds.hi[0][2], 0.0);
        assert_eq!(bounds.hi[0][1], 1.0);
        assert_relative_eq!(bounds.lo[0][3], -0.4, max_relative = 1e-12);
        assert_relative_eq!(bounds.hi[0][3], 0.4, max_relative = 1e-12);
    }

    #[test]
    fn zero_reactive_fraction_pins_q_to_zero() {
        let avail = vec![DVector::from_vec(vec![1.0])];
        let bounds = capacity_bounds(&avail, 0.0).unwrap();
        assert_eq!(bounds.lo[0][1], 0.0);
        assert_eq!(bounds.hi[0][1], 0.0);
    }

    #[test]
    fn rejects_negative_reactive_fraction() {
        let avail = vec![DVector::from_vec(vec![1.0])];
        assert!(capacity_bounds(&avail, -0.1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn ar1_autocorrelation_matches_theory(alpha in 0.05f64..0.95, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let series = ar1_series(100_000, alpha, 1.0, 0.0, &mut rng);
            let expected = (1.0 - alpha).sqrt();
            prop_assert!((lag1_autocorrelation(&series) - expected).abs() < 0.05);
        }

        #[test]
        fn bounds_are_ordered_and_contain_clips(
            avail0 in proptest::collection::vec(0.0f64..2.0, 1..6),
            fraction in 0.0f64..1.0,
            raw in proptest::collection::vec(-3.0f64..3.0, 1..6),
        ) {
            let n = avail0.len();
            let avail = vec![DVector::from_vec(avail0)];
            let bounds = capacity_bounds(&avail, fraction).unwrap();
            for i in 0..2 * n {
                prop_assert!(bounds.lo[0][i] <= bounds.hi[0][i]);
            }
            let mut candidate = DVector::zeros(2 * n);
            for i in 0..n.min(raw.len()) {
                candidate[i] = raw[i];
                candidate[n + i] = -raw[i];
            }
            let clipped = crate::linalg::clip(&candidate, &bounds.lo[0], &bounds.hi[0]);
            for i in 0..2 * n {
                prop_assert!(clipped[i] >= bounds.lo[0][i] && clipped[i] <= bounds.hi[0][i]);
            }
        }
    }
}
