//! Experiment configuration: a TOML file with a fixed schema.
//!
//! Unknown keys are rejected and every physical parameter is range checked;
//! errors name the offending key path (`simulation.epsilon`, ...).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mechanism::{BranchingMechanism, DensityTable, JumpMeasure};
use crate::motion::{spectral_for_example, ExampleId, MotionKind, MotionModel, SpectralData};
use crate::testfn::TestFunction;
use crate::{AtomicMeasure, Point};

#[derive(Debug, Error, PartialEq)]
#[error("{path}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

fn err(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub mechanism: MechanismConfig,
    pub motion: MotionConfig,
    #[serde(default)]
    pub spectral: SpectralConfig,
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub test: TestConfig,
    #[serde(default)]
    pub initial: InitialConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MechanismConfig {
    pub beta: f64,
    pub alpha: f64,
    /// `[y, mass]` pairs.
    #[serde(default)]
    pub jump_atoms: Vec<[f64; 2]>,
    #[serde(default)]
    pub jump_density_table: Option<DensityTableConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityTableConfig {
    pub nodes: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionConfig {
    pub kind: MotionKind,
    pub c: f64,
    #[serde(default = "one")]
    pub d: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralConfig {
    #[serde(default)]
    pub example: Option<ExampleId>,
    /// Overrides `w ≡ z_ψ`.
    #[serde(default)]
    pub w: Option<f64>,
}

/// How the skeleton is started.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Start {
    /// Poisson random measure with intensity `w μ`.
    #[default]
    Poisson,
    /// One particle at the first atom of `μ`.
    Single,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub record_times: Vec<f64>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub replicas: usize,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default = "default_population_cap")]
    pub population_cap: usize,
    #[serde(default = "default_atom_cap")]
    pub atom_cap: usize,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub start: Start,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestConfig {
    #[serde(default = "default_functions")]
    pub functions: Vec<TestFunction>,
    #[serde(default)]
    pub lln_phi: Option<TestFunction>,
    #[serde(default = "default_significance")]
    pub significance: f64,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self {
            functions: default_functions(),
            lln_phi: None,
            significance: default_significance(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    /// Atoms of `μ`; empty means `δ_0`.
    #[serde(default)]
    pub atoms: Vec<InitialAtom>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialAtom {
    pub x: Vec<f64>,
    pub mass: f64,
}

fn default_seed() -> u64 {
    7
}
fn one() -> usize {
    1
}
fn default_epsilon() -> f64 {
    0.05
}
fn default_population_cap() -> usize {
    crate::skeleton::DEFAULT_POPULATION_CAP
}
fn default_atom_cap() -> usize {
    crate::superfield::DEFAULT_ATOM_CAP
}
fn default_k_max() -> usize {
    64
}
fn default_dt() -> f64 {
    1e-3
}
fn default_functions() -> Vec<TestFunction> {
    vec![TestFunction::One]
}
fn default_significance() -> f64 {
    0.01
}

/// Documented ranges for the physical parameters.
pub mod limits {
    pub const RATE_MAX: f64 = 1e3;
    pub const C_MAX: f64 = 100.0;
    pub const DIM_MAX: usize = 8;
    pub const HORIZON_MAX: f64 = 50.0;
    pub const REPLICAS_MAX: usize = 10_000_000;
    pub const DT_MAX: f64 = 0.1;
}

impl ExperimentConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let de = toml::de::Deserializer::parse(text).map_err(|e| err("<document>", e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            err(&path, e.into_inner().message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| err(&path.display().to_string(), e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        use limits::*;
        let m = &self.mechanism;
        let finite_in = |path: &str, v: f64, lo: f64, hi: f64| {
            if v.is_finite() && v >= lo && v <= hi {
                Ok(())
            } else {
                Err(err(path, format!("{v} is outside [{lo}, {hi}]")))
            }
        };
        finite_in("mechanism.beta", m.beta, -RATE_MAX, RATE_MAX)?;
        finite_in("mechanism.alpha", m.alpha, 0.0, RATE_MAX)?;
        for (i, [y, w]) in m.jump_atoms.iter().enumerate() {
            if !(*y > 0.0 && y.is_finite()) {
                return Err(err(&format!("mechanism.jump_atoms[{i}]"), "atom location must be positive"));
            }
            finite_in(&format!("mechanism.jump_atoms[{i}]"), *w, 0.0, RATE_MAX)?;
        }
        finite_in("motion.c", self.motion.c, f64::MIN_POSITIVE, C_MAX)?;
        if self.motion.d == 0 || self.motion.d > DIM_MAX {
            return Err(err("motion.d", format!("must lie in 1..={DIM_MAX}")));
        }
        if let Some(w) = self.spectral.w {
            finite_in("spectral.w", w, f64::MIN_POSITIVE, RATE_MAX)?;
        }
        let s = &self.simulation;
        finite_in("simulation.T", s.horizon, 0.0, HORIZON_MAX)?;
        if s.record_times.windows(2).any(|p| p[1] < p[0]) {
            return Err(err("simulation.record_times", "must be nondecreasing"));
        }
        for (i, &t) in s.record_times.iter().enumerate() {
            finite_in(&format!("simulation.record_times[{i}]"), t, 0.0, s.horizon)?;
        }
        finite_in("simulation.epsilon", s.epsilon, f64::MIN_POSITIVE, 1.0)?;
        if s.replicas == 0 || s.replicas > REPLICAS_MAX {
            return Err(err("simulation.replicas", format!("must lie in 1..={REPLICAS_MAX}")));
        }
        if s.workers == 0 {
            return Err(err("simulation.workers", "must be at least 1"));
        }
        if s.k_max < 2 {
            return Err(err("simulation.k_max", "must be at least 2"));
        }
        finite_in("simulation.dt", s.dt, f64::MIN_POSITIVE, DT_MAX)?;
        finite_in("test.significance", self.test.significance, f64::MIN_POSITIVE, 0.5)?;
        for (i, f) in self.test.functions.iter().enumerate() {
            check_function(&format!("test.functions[{i}]"), f)?;
        }
        if let Some(f) = &self.test.lln_phi {
            check_function("test.lln_phi", f)?;
        }
        for (i, a) in self.initial.atoms.iter().enumerate() {
            if a.x.len() != self.motion.d {
                return Err(err(
                    &format!("initial.atoms[{i}].x"),
                    format!("has {} coordinates but motion.d = {}", a.x.len(), self.motion.d),
                ));
            }
            if a.x.iter().any(|v| !v.is_finite()) {
                return Err(err(&format!("initial.atoms[{i}].x"), "coordinates must be finite"));
            }
            finite_in(&format!("initial.atoms[{i}].mass"), a.mass, 0.0, 1e6)?;
        }
        Ok(())
    }

    pub fn mechanism(&self) -> Result<BranchingMechanism, ConfigError> {
        let m = &self.mechanism;
        let density = match &m.jump_density_table {
            Some(t) => Some(
                DensityTable::from_table(t.nodes.clone(), t.values.clone())
                    .map_err(|e| err("mechanism.jump_density_table", e.to_string()))?,
            ),
            None => None,
        };
        let atoms = m.jump_atoms.iter().map(|&[y, w]| (y, w)).collect();
        let eta = JumpMeasure::new(atoms, density).map_err(|e| err("mechanism.jump_atoms", e.to_string()))?;
        BranchingMechanism::constant(m.beta, m.alpha, eta).map_err(|e| err("mechanism", e.to_string()))
    }

    pub fn motion(&self) -> Result<MotionModel, ConfigError> {
        MotionModel::new(self.motion.kind, self.motion.c, self.motion.d).map_err(|e| err("motion", e.to_string()))
    }

    /// Spectral data of the configured example, with the `w` override applied.
    pub fn spectral(&self) -> Result<SpectralData, ConfigError> {
        let example = self
            .spectral
            .example
            .ok_or_else(|| err("spectral.example", "required for this experiment"))?;
        if example.motion_kind() != self.motion.kind {
            return Err(err(
                "spectral.example",
                format!("example {} does not use motion {:?}", example.label(), self.motion.kind),
            ));
        }
        let mut s = spectral_for_example(example, self.motion.c, self.motion.d, &self.mechanism()?)
            .map_err(|e| err("spectral", e.to_string()))?;
        if let Some(w) = self.spectral.w {
            s.w = w;
        }
        Ok(s)
    }

    /// The initial measure `μ`.
    pub fn initial_measure(&self) -> AtomicMeasure {
        if self.initial.atoms.is_empty() {
            return AtomicMeasure::dirac(crate::origin(self.motion.d), 1.0);
        }
        AtomicMeasure {
            atoms: self
                .initial
                .atoms
                .iter()
                .map(|a| (a.x.iter().copied().collect::<Point>(), a.mass))
                .collect(),
        }
    }
}

fn check_function(path: &str, f: &TestFunction) -> Result<(), ConfigError> {
    let ok = match f {
        TestFunction::One => true,
        TestFunction::Constant { value } => value.is_finite(),
        TestFunction::Gaussian { a } => a.is_finite() && *a >= 0.0,
        TestFunction::Box { r } => r.is_finite() && *r > 0.0,
    };
    if ok {
        Ok(())
    } else {
        Err(err(path, format!("invalid parameters in {f:?}")))
    }
}
