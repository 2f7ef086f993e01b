//! Run configuration: one TOML file per run with network, scenario,
//! controller and simulation sections. Scalar fields can be overridden
//! from the command line; everything random is seeded from here.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::{identity_block, ControllerState, CostWeights};
use crate::grid::{compute_sensitivity, perturb_model, NetworkModel};
use crate::scenario::{capacity_bounds, DropEvent, Scenario};
use crate::sim::{Policy, RunSetup, SweepAxis};
use crate::theory::{estimate_constants, init_param_caps};
use crate::{Error, Result};

const SCENARIO_SEED_SALT: u64 = 0x5ca1_ab1e;
const MODEL_SEED_SALT: u64 = 0x0dd_ba11;

fn default_reactive_fraction() -> f64 {
    0.4
}
fn default_gamma() -> f64 {
    0.5
}
fn default_h() -> usize {
    1
}
fn default_true() -> bool {
    false
}
fn default_direct_opt_tol() -> f64 {
    1e-8
}
fn default_direct_opt_max_iter() -> usize {
    5_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    /// Path to the network file, relative to the config file.
    pub path: String,
}

/// Scalar applied to every bus, or one value per bus.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerBus {
    Uniform(f64),
    Each(Vec<f64>),
}

impl PerBus {
    fn resolve(&self, bus_count: usize, field: &str) -> Result<DVector<f64>> {
        match self {
            PerBus::Uniform(v) => Ok(DVector::from_element(bus_count, *v)),
            PerBus::Each(values) => {
                if values.len() != bus_count {
                    return Err(Error::Config(format!(
                        "{field}: expected {bus_count} entries, got {}",
                        values.len()
                    )));
                }
                Ok(DVector::from_vec(values.clone()))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PvSection {
    /// Bus ids hosting inverters; defaults to the network's sites.
    pub sites: Option<Vec<usize>>,
    /// Rated capacities assigned to sites (seeded choice), MW.
    pub sizes: Vec<f64>,
    #[serde(default)]
    pub events: Vec<DropEvent>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub horizon: usize,
    pub alpha: f64,
    /// Load-noise standard deviation, MW; scaled per bus in proportion
    /// to its base load.
    pub sigma: f64,
    /// Defaults to a value derived from the master seed.
    pub seed: Option<u64>,
    pub base_load_mw: PerBus,
    /// Defaults to half the active base load.
    pub base_load_mvar: Option<PerBus>,
    #[serde(default = "default_reactive_fraction")]
    pub reactive_fraction: f64,
    pub pv: PvSection,
}

/// Initial parameter blocks: explicit `[active, reactive]` scalars on
/// identity blocks, or "auto" for the initialization-cap values.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialParams {
    Auto(String),
    Scalars([f64; 2]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyChoice {
    Dac,
    DirectOpt,
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    #[serde(default = "default_policy")]
    pub kind: PolicyChoice,
    #[serde(default = "default_h")]
    pub h: usize,
    pub eta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub m0: InitialParams,
    pub c_p: f64,
    pub c_q: f64,
    pub c_x: f64,
    #[serde(default = "default_true")]
    pub project: bool,
    #[serde(default = "default_direct_opt_tol")]
    pub direct_opt_tol: f64,
    #[serde(default = "default_direct_opt_max_iter")]
    pub direct_opt_max_iter: usize,
}

fn default_policy() -> PolicyChoice {
    PolicyChoice::Dac
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelErrorSection {
    /// Uniform per-line impedance scaling range `[lo, hi]`.
    pub scaling: [f64; 2],
    /// Number of bus labels permuted in the estimate.
    pub n_permuted: usize,
    /// Defaults to a value derived from the master seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default)]
    pub delay: usize,
    /// Voltage-deviation safety interval `[lo, hi]`, kV.
    pub limits: [f64; 2],
    pub master_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub network: NetworkSection,
    pub scenario: ScenarioSection,
    pub controller: ControllerSection,
    pub model_error: Option<ModelErrorSection>,
    pub sim: SimSection,
}

impl SimulationConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: SimulationConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scenario;
        if s.horizon == 0 {
            return Err(Error::Config("scenario.horizon: must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&s.alpha) {
            return Err(Error::Config(format!(
                "scenario.alpha: must be in [0, 1], got {}",
                s.alpha
            )));
        }
        if s.sigma < 0.0 {
            return Err(Error::Config(format!(
                "scenario.sigma: must be nonnegative, got {}",
                s.sigma
            )));
        }
        if s.reactive_fraction < 0.0 {
            return Err(Error::Config(format!(
                "scenario.reactive_fraction: must be nonnegative, got {}",
                s.reactive_fraction
            )));
        }
        if s.pv.sizes.is_empty() {
            return Err(Error::Config("scenario.pv.sizes: must not be empty".into()));
        }
        let c = &self.controller;
        if c.h == 0 {
            return Err(Error::Config("controller.h: must be at least 1".into()));
        }
        if !(c.eta.is_finite() && c.eta >= 0.0) {
            return Err(Error::Config(format!(
                "controller.eta: must be a nonnegative number, got {}",
                c.eta
            )));
        }
        if !(c.gamma > 0.0 && c.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "controller.gamma: must be in (0, 1], got {}",
                c.gamma
            )));
        }
        if c.c_p < 0.0 || c.c_q < 0.0 || c.c_x < 0.0 {
            return Err(Error::Config(
                "controller.c_p/c_q/c_x: must be nonnegative".into(),
            ));
        }
        if let InitialParams::Auto(tag) = &c.m0 {
            if tag != "auto" {
                return Err(Error::Config(format!(
                    "controller.m0: expected \"auto\" or two scalars, got \"{tag}\""
                )));
            }
        }
        if let Some(me) = &self.model_error {
            if !(me.scaling[0] > 0.0 && me.scaling[0] <= me.scaling[1]) {
                return Err(Error::Config(format!(
                    "model_error.scaling: must satisfy 0 < lo <= hi, got [{}, {}]",
                    me.scaling[0], me.scaling[1]
                )));
            }
        }
        if self.sim.limits[0] >= self.sim.limits[1] {
            return Err(Error::Config(format!(
                "sim.limits: lower bound must be below upper, got [{}, {}]",
                self.sim.limits[0], self.sim.limits[1]
            )));
        }
        Ok(())
    }

    pub fn scenario_seed(&self) -> u64 {
        self.scenario
            .seed
            .unwrap_or(self.sim.master_seed ^ SCENARIO_SEED_SALT)
    }

    pub fn model_error_seed(&self) -> Option<u64> {
        self.model_error
            .as_ref()
            .map(|me| me.seed.unwrap_or(self.sim.master_seed ^ MODEL_SEED_SALT))
    }

    /// SHA-256 of the canonical serialized form; identifies a run.
    pub fn digest(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        format!("{:x}", hasher.finalize())
    }

    /// Copy with one swept quantity changed; per-section seeds are reset
    /// to derived values when the master seed is swept.
    pub fn with_axis_value(&self, axis: SweepAxis, value: f64) -> Result<Self> {
        let mut varied = self.clone();
        let as_count = |value: f64, field: &str| -> Result<usize> {
            if value < 0.0 || value.fract() != 0.0 || value > u32::MAX as f64 {
                return Err(Error::Config(format!(
                    "{field}: sweep value must be a nonnegative integer, got {value}"
                )));
            }
            Ok(value as usize)
        };
        match axis {
            SweepAxis::TracingHorizon => {
                varied.controller.h = as_count(value, "controller.h")?;
                if varied.controller.h == 0 {
                    return Err(Error::Config("controller.h: must be at least 1".into()));
                }
            }
            SweepAxis::Alpha => varied.scenario.alpha = value,
            SweepAxis::Eta => varied.controller.eta = value,
            SweepAxis::Delay => varied.sim.delay = as_count(value, "sim.delay")?,
            SweepAxis::EpsScaling => {
                if !(0.0..1.0).contains(&value) {
                    return Err(Error::Config(format!(
                        "model_error.scaling: eps_scaling must be in [0, 1), got {value}"
                    )));
                }
                let seed = self.model_error.as_ref().and_then(|me| me.seed);
                let n_permuted = self.model_error.as_ref().map_or(0, |me| me.n_permuted);
                varied.model_error = Some(ModelErrorSection {
                    scaling: [1.0 - value, 1.0 + value],
                    n_permuted,
                    seed,
                });
            }
            SweepAxis::Seed => {
                varied.sim.master_seed = as_count(value, "sim.master_seed")? as u64;
                varied.scenario.seed = None;
                if let Some(me) = &mut varied.model_error {
                    me.seed = None;
                }
            }
        }
        varied.validate()?;
        Ok(varied)
    }

    /// Copy with the model perturbation reseeded (paired-model runs).
    pub fn with_model_error_seed(&self, seed: u64) -> Self {
        let mut varied = self.clone();
        match &mut varied.model_error {
            Some(me) => me.seed = Some(seed),
            None => {
                varied.model_error = Some(ModelErrorSection {
                    scaling: [0.8, 1.2],
                    n_permuted: 4,
                    seed: Some(seed),
                })
            }
        }
        varied
    }

    /// Resolves paths, generates the scenario, derives the true and
    /// estimated models, and assembles the controller.
    pub fn build(&self, base_dir: &Path) -> Result<RunSetup> {
        self.validate()?;
        let network_path = base_dir.join(&self.network.path);
        let net = NetworkModel::from_path(&network_path)?;
        let n = net.bus_count;

        let base_p = self.scenario.base_load_mw.resolve(n, "scenario.base_load_mw")?;
        let base_q = match &self.scenario.base_load_mvar {
            Some(per_bus) => per_bus.resolve(n, "scenario.base_load_mvar")?,
            None => &base_p * 0.5,
        };
        let pv_sites = match &self.scenario.pv.sites {
            Some(sites) => {
                let set: std::collections::BTreeSet<usize> = sites.iter().copied().collect();
                for &site in &set {
                    if site == 0 || site > n {
                        return Err(Error::Config(format!(
                            "scenario.pv.sites: bus {site} outside 1..={n}"
                        )));
                    }
                }
                set
            }
            None => net.pv_sites.clone(),
        };
        let scenario = Scenario::generate(
            n,
            self.scenario.horizon,
            self.scenario.alpha,
            self.scenario.sigma,
            &base_p,
            &base_q,
            &pv_sites,
            &self.scenario.pv.sizes,
            &self.scenario.pv.events,
            self.scenario_seed(),
        )?;
        let bounds = capacity_bounds(&scenario.pv_avail, self.scenario.reactive_fraction)?;

        let plant = compute_sensitivity(&net)?;
        let estimate = match &self.model_error {
            Some(me) => perturb_model(
                &net,
                (me.scaling[0], me.scaling[1]),
                me.n_permuted,
                self.model_error_seed().expect("section present"),
            )?,
            None => plant.clone(),
        };

        let weights = CostWeights::new(self.controller.c_p, self.controller.c_q, self.controller.c_x)?;
        let policy = match self.controller.kind {
            PolicyChoice::None => Policy::NoControl,
            PolicyChoice::DirectOpt => Policy::DirectOpt {
                tol: self.controller.direct_opt_tol,
                max_iter: self.controller.direct_opt_max_iter,
            },
            PolicyChoice::Dac => {
                let h = self.controller.h;
                let caps = {
                    let eps_b = crate::linalg::spectral_norm(&(&plant.b - &estimate.b));
                    let consts = estimate_constants(&scenario, &estimate, &weights, eps_b)?;
                    init_param_caps(&consts, self.controller.gamma, h).ok()
                };
                let blocks = match &self.controller.m0 {
                    InitialParams::Scalars([active, reactive]) => (0..h)
                        .map(|_| identity_block(n, *active, *reactive))
                        .collect(),
                    InitialParams::Auto(_) => {
                        let caps = caps.clone().ok_or_else(|| {
                            Error::Config(
                                "controller.m0: auto initialization needs a nondegenerate \
                                 scenario (W + eps_B U~ > 0)"
                                    .into(),
                            )
                        })?;
                        caps.iter()
                            .map(|cap| {
                                let scalar = cap / std::f64::consts::SQRT_2;
                                identity_block(n, scalar, scalar)
                            })
                            .collect()
                    }
                };
                let mut state = ControllerState::with_blocks(
                    n,
                    blocks,
                    self.controller.eta,
                    self.controller.gamma,
                );
                state.caps = caps;
                Policy::Dac {
                    state,
                    project: self.controller.project,
                }
            }
        };

        Ok(RunSetup {
            plant,
            estimate,
            scenario,
            bounds,
            weights,
            policy,
            delay: self.sim.delay,
            limit_lo: self.sim.limits[0],
            limit_hi: self.sim.limits[1],
        })
    }
}

/// Locates a config-relative path for outputs and inputs.
pub fn config_base_dir(config_path: &Path) -> PathBuf {
    config_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_config_text() -> String {
        r#"
[network]
path = "net.toml"

[scenario]
horizon = 50
alpha = 0.1
sigma = 0.02
base_load_mw = 0.1

[scenario.pv]
sizes = [0.3, 0.4]

[controller]
eta = 5e-4
m0 = [0.05, 0.1]
c_p = 3.0
c_q = 1.0
c_x = 0.5

[sim]
limits = [-0.55, 0.55]
master_seed = 7
"#
        .to_string()
    }

    fn write_net(dir: &Path) {
        let net = r#"
v0_kv = 11.0
buses = [1, 2]
pv_sites = [1, 2]

[[lines]]
from = 0
to = 1
r_ohm = 0.4
x_ohm = 0.2

[[lines]]
from = 1
to = 2
r_ohm = 0.3
x_ohm = 0.15
"#;
        std::fs::write(dir.join("net.toml"), net).unwrap();
    }

    #[test]
    fn parses_and_builds_minimal_config() {
        let dir = tempfile::tempdir().unwrap();
        write_net(dir.path());
        let config = SimulationConfig::from_toml_str(&minimal_config_text()).unwrap();
        let setup = config.build(dir.path()).unwrap();
        assert_eq!(setup.plant.bus_count(), 2);
        assert_eq!(setup.scenario.horizon, 50);
        assert!(matches!(setup.policy, Policy::Dac { .. }));
    }

    #[test]
    fn rejects_alpha_out_of_range_naming_the_field() {
        let text = minimal_config_text().replace("alpha = 0.1", "alpha = 1.5");
        let err = SimulationConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("scenario.alpha"));
    }

    #[test]
    fn rejects_unknown_fields() {
        let text = minimal_config_text().replace("master_seed = 7", "master_seed = 7\nfoo = 1");
        assert!(SimulationConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn rejects_inverted_limits() {
        let text = minimal_config_text().replace("limits = [-0.55, 0.55]", "limits = [0.55, -0.55]");
        let err = SimulationConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("sim.limits"));
    }

    #[test]
    fn seed_discipline_derives_from_master() {
        let config = SimulationConfig::from_toml_str(&minimal_config_text()).unwrap();
        assert_eq!(config.scenario_seed(), 7 ^ SCENARIO_SEED_SALT);
        assert_eq!(config.model_error_seed(), None);
        let swept = config.with_axis_value(SweepAxis::Seed, 9.0).unwrap();
        assert_eq!(swept.scenario_seed(), 9 ^ SCENARIO_SEED_SALT);
    }

    #[test]
    fn axis_application_changes_only_the_swept_field() {
        let config = SimulationConfig::from_toml_str(&minimal_config_text()).unwrap();
        let varied = config.with_axis_value(SweepAxis::TracingHorizon, 5.0).unwrap();
        assert_eq!(varied.controller.h, 5);
        assert_eq!(varied.scenario.alpha, config.scenario.alpha);
        let varied = config.with_axis_value(SweepAxis::Delay, 10.0).unwrap();
        assert_eq!(varied.sim.delay, 10);
        let varied = config.with_axis_value(SweepAxis::EpsScaling, 0.2).unwrap();
        let me = varied.model_error.unwrap();
        assert_eq!(me.scaling, [0.8, 1.2]);
        assert!(config.with_axis_value(SweepAxis::TracingHorizon, 2.5).is_err());
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let config = SimulationConfig::from_toml_str(&minimal_config_text()).unwrap();
        assert_eq!(config.digest(), config.digest());
        let varied = config.with_axis_value(SweepAxis::Eta, 1e-3).unwrap();
        assert_ne!(config.digest(), varied.digest());
    }

    #[test]
    fn auto_initialization_respects_caps() {
        let dir = tempfile::tempdir().unwrap();
        write_net(dir.path());
        let text = minimal_config_text().replace("m0 = [0.05, 0.1]", "m0 = \"auto\"");
        let config = SimulationConfig::from_toml_str(&text).unwrap();
        let setup = config.build(dir.path()).unwrap();
        let Policy::Dac { state, .. } = &setup.policy else {
            panic!("expected policy controller");
        };
        let caps = state.caps.clone().expect("caps computed");
        for (block, cap) in state.m.iter().zip(caps) {
            assert!(crate::linalg::spectral_norm(block) <= cap * (1.0 + 1e-9));
        }
    }
}
