//! Experiment orchestration: specs, dataset splits, manifests, single
//! cells (simulate, train, evaluate) and γ sweeps.

mod cell;
mod sweep;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cell::{evaluate_model, load_branches, load_dataset, run_cell, train_and_evaluate, write_training_log, CellData, CellOutput};
pub use sweep::{gamma_dir_name, sweep, SweepOutcome};

use crate::data::{DataError, Trajectory};
use crate::eval::EvalError;
use crate::models::{ModelError, ModelKind};
use crate::sim::{generate_all_counterfactuals, simulate_patients, CounterfactualBranchSet, SimConfig, SimError, SimulatedPatient};
use crate::train::{ModelSettings, TrainError};

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl ExperimentError {
    /// Whether the failure is a bad configuration rather than a run-time
    /// numerical problem.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            ExperimentError::Config(_)
                | ExperimentError::Sim(SimError::Config { .. })
                | ExperimentError::Train(TrainError::Config(_))
        )
    }

    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            ExperimentError::Numerical(_)
                | ExperimentError::Train(TrainError::NonFiniteLoss { .. })
                | ExperimentError::Model(ModelError::Singular { .. })
        )
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Patients per split. Each split is simulated from its own block of
/// patient ids, so the three sets never share a random stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitSizes {
    /// 1000 / 200 / 200.
    pub fn desk() -> Self {
        Self {
            train: 1000,
            validation: 200,
            test: 200,
        }
    }

    /// 10000 / 1000 / 1000.
    pub fn paper() -> Self {
        Self {
            train: 10000,
            validation: 1000,
            test: 1000,
        }
    }
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ID_BLOCK: u64 = 1_000_000;

    pub fn first_patient_id(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Validation => Self::ID_BLOCK,
            Split::Test => 2 * Self::ID_BLOCK,
        }
    }
}

/// `base` restricted to one split.
pub fn split_config(base: &SimConfig, split: Split, n_patients: usize) -> SimConfig {
    SimConfig {
        n_patients,
        first_patient_id: split.first_patient_id(),
        ..base.clone()
    }
}

fn default_taus() -> Vec<usize> {
    vec![1]
}

/// Everything a train/evaluate/sweep run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    /// Simulation settings; `gamma_c`, `gamma_r` and `n_patients` are
    /// replaced per split and per sweep cell.
    pub sim: SimConfig,
    #[serde(default)]
    pub splits: SplitSizes,
    #[serde(default = "default_model")]
    pub model: ModelKind,
    /// Models of a sweep; defaults to `[model]`.
    #[serde(default)]
    pub models: Vec<ModelKind>,
    #[serde(default)]
    pub settings: ModelSettings,
    /// Evaluation horizons. Horizons above 1 also report selection
    /// accuracy.
    #[serde(default = "default_taus")]
    pub taus: Vec<usize>,
    /// `(gamma_c, gamma_r)` pairs of a sweep; defaults to the sim's pair.
    #[serde(default)]
    pub gammas: Vec<(f64, f64)>,
    /// Seed for training; the simulation seed lives in `sim`.
    #[serde(default)]
    pub seed: u64,
}

fn default_model() -> ModelKind {
    ModelKind::Crn
}

impl ExperimentSpec {
    pub fn new(sim: SimConfig, model: ModelKind) -> Self {
        Self {
            sim,
            splits: SplitSizes::desk(),
            model,
            models: Vec::new(),
            settings: ModelSettings::default(),
            taus: default_taus(),
            gammas: Vec::new(),
            seed: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let spec: Self = serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::from_json(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.sim.validate()?;
        self.settings.validate()?;
        if self.splits.train == 0 {
            return Err(ExperimentError::Config("splits.train must be positive".into()));
        }
        if self.taus.is_empty() || self.taus.contains(&0) {
            return Err(ExperimentError::Config("taus must be a non-empty list of positive horizons".into()));
        }
        if let Some(&t) = self.taus.iter().find(|&&t| t > self.sim.max_timesteps) {
            return Err(ExperimentError::Config(format!(
                "tau {t} exceeds sim.max_timesteps {}",
                self.sim.max_timesteps
            )));
        }
        if self.gammas.iter().any(|&(c, r)| !(c >= 0.0 && r >= 0.0)) {
            return Err(ExperimentError::Config("gammas must be non-negative".into()));
        }
        Ok(())
    }

    pub fn sweep_models(&self) -> Vec<ModelKind> {
        if self.models.is_empty() {
            vec![self.model]
        } else {
            self.models.clone()
        }
    }

    pub fn sweep_gammas(&self) -> Vec<(f64, f64)> {
        if self.gammas.is_empty() {
            vec![(self.sim.gamma_c, self.sim.gamma_r)]
        } else {
            self.gammas.clone()
        }
    }

    /// Training settings with the spec seed and the largest multi-step
    /// horizon applied.
    pub fn resolved_settings(&self) -> ModelSettings {
        let mut s = self.settings.clone().with_seed(self.seed);
        s.tau_max = s.tau_max.max(self.taus.iter().copied().max().unwrap_or(1));
        s
    }

    pub fn with_gamma(&self, gamma: (f64, f64)) -> Self {
        let mut spec = self.clone();
        spec.sim.gamma_c = gamma.0;
        spec.sim.gamma_r = gamma.1;
        spec
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }
}

/// Simulated patients of the three splits.
#[derive(Clone, Debug)]
pub struct SimulatedSplits {
    pub train: Vec<SimulatedPatient>,
    pub validation: Vec<SimulatedPatient>,
    pub test: Vec<SimulatedPatient>,
    pub test_config: SimConfig,
}

impl SimulatedSplits {
    pub fn trajectories(patients: &[SimulatedPatient]) -> Vec<Trajectory> {
        patients.iter().map(|p| p.trajectory.clone()).collect()
    }

    /// Counterfactual branch sets of the test split for one horizon.
    pub fn test_branches(&self, tau: usize) -> Result<Vec<CounterfactualBranchSet>, ExperimentError> {
        Ok(generate_all_counterfactuals(&self.test, tau, &self.test_config)?)
    }
}

pub fn simulate_splits(sim: &SimConfig, sizes: SplitSizes) -> Result<SimulatedSplits, ExperimentError> {
    sim.validate()?;
    let test_config = split_config(sim, Split::Test, sizes.test);
    Ok(SimulatedSplits {
        train: simulate_patients(&split_config(sim, Split::Train, sizes.train))?,
        validation: simulate_patients(&split_config(sim, Split::Validation, sizes.validation))?,
        test: simulate_patients(&test_config)?,
        test_config,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// A record sufficient to re-run whatever produced a directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub code_version: String,
    pub command: String,
    pub seed: u64,
    pub gamma_c: f64,
    pub gamma_r: f64,
    pub config_sha256: String,
    /// The resolved configuration, as hashed.
    pub config: serde_json::Value,
    /// `(file name, sha256)` of every file written next to the manifest.
    pub files: Vec<(String, String)>,
}

impl Manifest {
    pub fn new<C: Serialize>(command: &str, seed: u64, gamma: (f64, f64), config: &C) -> Self {
        let config = serde_json::to_value(config).expect("config serializes");
        let text = serde_json::to_string(&config).expect("value serializes");
        Self {
            code_version: CODE_VERSION.into(),
            command: command.into(),
            seed,
            gamma_c: gamma.0,
            gamma_r: gamma.1,
            config_sha256: sha256_hex(text.as_bytes()),
            config,
            files: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))
    }

    /// Writes `bytes` to `dir/name` and records its hash.
    pub fn write_file(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<(), ExperimentError> {
        write_atomic(&dir.join(name), bytes)?;
        self.files.retain(|(n, _)| n != name);
        self.files.push((name.into(), sha256_hex(bytes)));
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<(), ExperimentError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(&dir.join("manifest.json"), text.as_bytes())
    }

    /// Hash recorded for `name`, if any.
    pub fn file_hash(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, h)| h.as_str())
    }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let tmp = path.with_extension("partial");
    {
        let mut f = BufWriter::new(fs::File::create(&tmp).map_err(io_err(&tmp))?);
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.flush().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn branches_file_name(tau: usize) -> String {
    format!("branches_tau{tau}.csv")
}

/// `config.json` and `priors.json` next to a dataset.
pub(crate) fn write_sim_files(manifest: &mut Manifest, dir: &Path, config: &SimConfig) -> Result<(), ExperimentError> {
    let config_json = serde_json::to_string_pretty(config).expect("config serializes");
    manifest.write_file(dir, "config.json", config_json.as_bytes())?;
    let priors_json = serde_json::to_string_pretty(&config.priors).expect("priors serialize");
    manifest.write_file(dir, "priors.json", priors_json.as_bytes())
}

/// Simulates one dataset (the patients of `config`) and writes
/// `data.csv`, `config.json`, `priors.json`, one branch file per horizon
/// and `manifest.json` into `dir`.
pub fn write_dataset(config: &SimConfig, taus: &[usize], dir: &Path) -> Result<Manifest, ExperimentError> {
    config.validate()?;
    if let Some(&t) = taus.iter().find(|&&t| t == 0 || t > config.max_timesteps) {
        return Err(ExperimentError::Config(format!("tau {t} outside 1..={}", config.max_timesteps)));
    }
    let patients = simulate_patients(config)?;
    let mut manifest = Manifest::new("simulate", config.seed, (config.gamma_c, config.gamma_r), config);
    let mut buf = Vec::new();
    crate::data::write_csv(&SimulatedSplits::trajectories(&patients), &mut buf)?;
    manifest.write_file(dir, "data.csv", &buf)?;
    write_sim_files(&mut manifest, dir, config)?;
    for &tau in taus {
        let sets = generate_all_counterfactuals(&patients, tau, config)?;
        let mut buf = Vec::new();
        crate::sim::write_branches_csv(&sets, &mut buf)?;
        manifest.write_file(dir, &branches_file_name(tau), &buf)?;
    }
    manifest.save(dir)?;
    Ok(manifest)
}
