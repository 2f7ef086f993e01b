//! Simulation toolkit for online voltage regulation on radial distribution
//! feeders with inverter-based resources.
//!
//! The crate builds a linearized voltage-sensitivity model of a radial
//! network, generates correlated load and solar-availability scenarios, and
//! runs a disturbance-action controller in closed loop against the true
//! dynamics while the controller only sees an (optionally inaccurate)
//! estimate of them. Executable forms of the stability and robustness
//! bounds, per-step optimization baselines, metrics, and parameter sweeps
//! round out the toolkit.
//!
//! Start with the runnable programs under `examples/` — one per major
//! capability — or the `voltdac` binary for config-driven runs.

pub mod baselines;
pub mod cli;
pub mod config;
pub mod controller;
pub mod grid;
pub mod linalg;
pub mod report;
pub mod scenario;
pub mod sim;
pub mod theory;

pub use config::SimulationConfig;
pub use controller::{ControllerState, CostWeights};
pub use grid::{NetworkModel, SensitivityModel};
pub use scenario::{InputBounds, Scenario};
pub use sim::{Metrics, SimulationTrace};
pub use theory::TheoryConstants;

/// Crate-wide error type for construction and validation failures.
///
/// Numeric kernels (matrix-vector products, controller arithmetic) treat
/// dimension mismatches as programmer errors and panic instead.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("network: {0}")]
    Network(String),
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("controller: {0}")]
    Controller(String),
    #[error("config: {0}")]
    Config(String),
    #[error("simulation: {0}")]
    Simulation(String),
    #[error("baseline: {0}")]
    Baseline(String),
    #[error("theory: {0}")]
    Theory(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
