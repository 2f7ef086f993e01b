//! Radial network model and its linearized voltage-sensitivity form.
//!
//! A feeder is a tree rooted at the slack bus 0. Reducing the complex nodal
//! admittance matrix over the non-slack buses and inverting it yields
//! `Z = R + jX`; voltage-magnitude deviations then follow the one-step
//! linear dynamics `x = B u + w` with `B = [R, X] / v0`, powers in MW/MVar
//! and voltages in kV.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{Complex, DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::spectral_norm;
use crate::{Error, Result};

/// One line segment with series impedance in ohms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r_ohm: f64,
    pub x_ohm: f64,
}

/// Validated radial network: `n` non-slack buses `1..=n` plus the slack
/// bus 0 holding the reference voltage.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    pub bus_count: usize,
    pub lines: Vec<Line>,
    pub slack_voltage_kv: f64,
    pub pv_sites: BTreeSet<usize>,
}

/// On-disk schema of a network file. Unknown fields are rejected.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkFile {
    v0_kv: f64,
    buses: Vec<usize>,
    lines: Vec<Line>,
    pv_sites: Vec<usize>,
}

impl NetworkModel {
    /// Builds and validates a network from its raw parts.
    ///
    /// Rejects duplicate lines, self-loops, out-of-range bus ids,
    /// nonpositive impedances (`r + x` must be > 0, both nonnegative) and
    /// any topology that is not a tree spanning buses `0..=n`.
    pub fn new(
        bus_count: usize,
        lines: Vec<Line>,
        slack_voltage_kv: f64,
        pv_sites: BTreeSet<usize>,
    ) -> Result<Self> {
        let n = bus_count;
        if n == 0 {
            return Err(Error::Network("bus_count must be positive".into()));
        }
        if !(slack_voltage_kv.is_finite() && slack_voltage_kv > 0.0) {
            return Err(Error::Network(format!(
                "slack voltage must be positive, got {slack_voltage_kv}"
            )));
        }
        if lines.len() != n {
            return Err(Error::Network(format!(
                "a tree over {} buses needs exactly {} lines, got {}",
                n + 1,
                n,
                lines.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for line in &lines {
            if line.from > n || line.to > n {
                return Err(Error::Network(format!(
                    "line {}-{} references a bus outside 0..={n}",
                    line.from, line.to
                )));
            }
            if line.from == line.to {
                return Err(Error::Network(format!("self-loop at bus {}", line.from)));
            }
            if !(line.r_ohm.is_finite() && line.x_ohm.is_finite())
                || line.r_ohm < 0.0
                || line.x_ohm < 0.0
                || line.r_ohm + line.x_ohm <= 0.0
            {
                return Err(Error::Network(format!(
                    "line {}-{} has invalid impedance r={} x={}",
                    line.from, line.to, line.r_ohm, line.x_ohm
                )));
            }
            let key = (line.from.min(line.to), line.from.max(line.to));
            if !seen.insert(key) {
                return Err(Error::Network(format!(
                    "duplicate line between buses {} and {}",
                    key.0, key.1
                )));
            }
        }
        // n lines over n+1 buses form a tree iff connected from the root.
        let mut adjacency = vec![Vec::new(); n + 1];
        for line in &lines {
            adjacency[line.from].push(line.to);
            adjacency[line.to].push(line.from);
        }
        let mut reached = vec![false; n + 1];
        let mut stack = vec![0usize];
        reached[0] = true;
        while let Some(bus) = stack.pop() {
            for &next in &adjacency[bus] {
                if !reached[next] {
                    reached[next] = true;
                    stack.push(next);
                }
            }
        }
        if let Some(bus) = reached.iter().position(|&r| !r) {
            return Err(Error::Network(format!(
                "bus {bus} is not connected to the slack bus (cycle elsewhere)"
            )));
        }
        for &site in &pv_sites {
            if site == 0 || site > n {
                return Err(Error::Network(format!(
                    "pv site {site} is not a non-slack bus in 1..={n}"
                )));
            }
        }
        Ok(Self {
            bus_count: n,
            lines,
            slack_voltage_kv,
            pv_sites,
        })
    }

    /// Parses a network file (TOML, fields `v0_kv`, `buses`, `lines`,
    /// `pv_sites`) and validates it.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: NetworkFile =
            toml::from_str(text).map_err(|e| Error::Network(format!("parse: {e}")))?;
        let n = file.buses.len();
        let expected: Vec<usize> = (1..=n).collect();
        if file.buses != expected {
            return Err(Error::Network(
                "buses must list the non-slack ids 1..=n in order".into(),
            ));
        }
        Self::new(
            n,
            file.lines,
            file.v0_kv,
            file.pv_sites.into_iter().collect(),
        )
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Network(format!("read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    fn with_scaled_lines(&self, factors: &[f64]) -> Self {
        let lines = self
            .lines
            .iter()
            .zip(factors)
            .map(|(line, &s)| Line {
                from: line.from,
                to: line.to,
                r_ohm: line.r_ohm * s,
                x_ohm: line.x_ohm * s,
            })
            .collect();
        Self {
            bus_count: self.bus_count,
            lines,
            slack_voltage_kv: self.slack_voltage_kv,
            pv_sites: self.pv_sites.clone(),
        }
    }
}

/// How a sensitivity model was obtained.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Provenance {
    /// Computed from the network's nominal line data.
    True,
    /// Rebuilt from scaled impedances with some bus labels permuted.
    Perturbed {
        seed: u64,
        scaling_range: (f64, f64),
        permuted_buses: Vec<usize>,
        /// Spectral-norm relative error against the nominal model.
        relative_error: f64,
    },
}

/// Sensitivity matrices mapping power injections to voltage deviations.
///
/// `R` and `X` are in ohms; `B = [R, X] / v0` maps `[p; q]` in MW/MVar to
/// kV. On a radial network both are symmetric positive definite with
/// entry `(i, j)` equal to the impedance of the shared path from buses
/// `i` and `j` to the slack bus.
#[derive(Debug, Clone)]
pub struct SensitivityModel {
    pub r: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub v0_kv: f64,
    /// Spectral norm of `B`.
    pub kappa_b: f64,
    pub provenance: Provenance,
}

impl SensitivityModel {
    pub fn bus_count(&self) -> usize {
        self.r.nrows()
    }

    /// Spectral-norm relative model error `‖B − B̂‖ / ‖B‖` against another
    /// model of the same network.
    pub fn relative_error(&self, other: &SensitivityModel) -> f64 {
        spectral_norm(&(&self.b - &other.b)) / spectral_norm(&self.b)
    }
}

/// Derives the sensitivity model: reduced nodal admittance over the
/// non-slack buses, inverted to `Z = R + jX`, then `B = [R, X] / v0`.
pub fn compute_sensitivity(net: &NetworkModel) -> Result<SensitivityModel> {
    let z = invert_reduced_admittance(net)?;
    build_model(net, z, Provenance::True)
}

fn invert_reduced_admittance(net: &NetworkModel) -> Result<DMatrix<Complex<f64>>> {
    let n = net.bus_count;
    let mut y = DMatrix::<Complex<f64>>::zeros(n, n);
    for line in &net.lines {
        let admittance = Complex::new(1.0, 0.0) / Complex::new(line.r_ohm, line.x_ohm);
        for &bus in &[line.from, line.to] {
            if bus > 0 {
                y[(bus - 1, bus - 1)] += admittance;
            }
        }
        if line.from > 0 && line.to > 0 {
            y[(line.from - 1, line.to - 1)] -= admittance;
            y[(line.to - 1, line.from - 1)] -= admittance;
        }
    }
    y.try_inverse()
        .ok_or_else(|| Error::Network("reduced admittance matrix is singular".into()))
}

fn build_model(
    net: &NetworkModel,
    z: DMatrix<Complex<f64>>,
    provenance: Provenance,
) -> Result<SensitivityModel> {
    let n = net.bus_count;
    // Z of a valid tree is symmetric; fold back the rounding noise from LU.
    let zt = z.transpose();
    let z = (&z + &zt) * Complex::new(0.5, 0.0);
    let r = z.map(|c| c.re);
    let x = z.map(|c| c.im);
    let mut b = DMatrix::zeros(n, 2 * n);
    b.view_mut((0, 0), (n, n)).copy_from(&r);
    b.view_mut((0, n), (n, n)).copy_from(&x);
    b /= net.slack_voltage_kv;
    let kappa_b = spectral_norm(&b);
    Ok(SensitivityModel {
        r,
        x,
        b,
        v0_kv: net.slack_voltage_kv,
        kappa_b,
        provenance,
    })
}

/// One step of the voltage dynamics: `x = B u + w`.
///
/// Panics on dimension mismatch.
pub fn voltage_step(model: &SensitivityModel, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
    let n = model.bus_count();
    assert_eq!(u.len(), 2 * n, "voltage_step: input must have length 2n");
    assert_eq!(w.len(), n, "voltage_step: disturbance must have length n");
    &model.b * u + w
}

/// Voltage drop induced by uncontrollable loads:
/// `w = −(R p_l + X q_l) / v0`.
///
/// Panics on dimension mismatch.
pub fn disturbance_from_loads(
    model: &SensitivityModel,
    p_load: &DVector<f64>,
    q_load: &DVector<f64>,
) -> DVector<f64> {
    let n = model.bus_count();
    assert_eq!(p_load.len(), n, "disturbance: p_l must have length n");
    assert_eq!(q_load.len(), n, "disturbance: q_l must have length n");
    -(&model.r * p_load + &model.x * q_load) / model.v0_kv
}

/// Builds an inaccurate model estimate: every line impedance is scaled by
/// an independent factor drawn uniformly from `scaling_range`, the
/// sensitivity is recomputed, and then the labels of `n_permuted`
/// uniformly chosen non-slack buses are permuted (simultaneous row and
/// column permutation, which preserves symmetry). Deterministic per seed.
pub fn perturb_model(
    net: &NetworkModel,
    scaling_range: (f64, f64),
    n_permuted: usize,
    seed: u64,
) -> Result<SensitivityModel> {
    let (lo, hi) = scaling_range;
    if !(lo.is_finite() && hi.is_finite()) || lo <= 0.0 || lo > hi {
        return Err(Error::Network(format!(
            "scaling range must satisfy 0 < lo <= hi, got [{lo}, {hi}]"
        )));
    }
    let n = net.bus_count;
    if n_permuted > n {
        return Err(Error::Network(format!(
            "cannot permute {n_permuted} of {n} buses"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors: Vec<f64> = net
        .lines
        .iter()
        .map(|_| if lo == hi { lo } else { rng.gen_range(lo..hi) })
        .collect();
    let scaled = net.with_scaled_lines(&factors);
    let z = invert_reduced_admittance(&scaled)?;

    // Pick the buses, then relabel them by a random permutation of the
    // chosen set. Matrix indices are bus id − 1.
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(&mut rng);
    let chosen: Vec<usize> = all.into_iter().take(n_permuted).collect();
    let mut target = chosen.clone();
    target.shuffle(&mut rng);
    let mut index_map: Vec<usize> = (0..n).collect();
    for (&src, &dst) in chosen.iter().zip(&target) {
        index_map[src] = dst;
    }
    let permuted = DMatrix::from_fn(n, n, |i, j| z[(index_map[i], index_map[j])]);

    let perturbed = build_model(
        &scaled,
        permuted,
        Provenance::Perturbed {
            seed,
            scaling_range,
            permuted_buses: chosen.iter().map(|&i| i + 1).collect(),
            relative_error: 0.0,
        },
    )?;
    let base = compute_sensitivity(net)?;
    let relative_error = base.relative_error(&perturbed);
    let provenance = match perturbed.provenance {
        Provenance::Perturbed {
            seed,
            scaling_range,
            permuted_buses,
            ..
        } => Provenance::Perturbed {
            seed,
            scaling_range,
            permuted_buses,
            relative_error,
        },
        p => p,
    };
    Ok(SensitivityModel {
        provenance,
        ..perturbed
    })
}
