use std::fs;
use std::path::Path;

use log::{info, warn};

use super::{branches_file_name, io_err, ExperimentError, ExperimentSpec, Manifest, SimulatedSplits, Split};
use crate::data::{read_csv, write_csv, Trajectory};
use crate::eval::{evaluate_branches, selection_accuracy, MetricsReport, EPSILON};
use crate::models::{ModelKind, OutcomeModel, TrainedModel};
use crate::sim::{read_branches_csv, write_branches_csv, CounterfactualBranchSet};
use crate::train::{fit_model, PhaseResult};

/// Trajectories of the three splits plus test branch sets per horizon.
#[derive(Clone, Debug)]
pub struct CellData {
    pub gamma: (f64, f64),
    pub train: Vec<Trajectory>,
    pub validation: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    pub branches: Vec<(usize, Vec<CounterfactualBranchSet>)>,
}

impl CellData {
    pub fn simulate(spec: &ExperimentSpec) -> Result<Self, ExperimentError> {
        spec.validate()?;
        let splits = super::simulate_splits(&spec.sim, spec.splits)?;
        let mut branches = Vec::new();
        for &tau in &spec.taus {
            branches.push((tau, splits.test_branches(tau)?));
        }
        Ok(Self {
            gamma: (spec.sim.gamma_c, spec.sim.gamma_r),
            train: SimulatedSplits::trajectories(&splits.train),
            validation: SimulatedSplits::trajectories(&splits.validation),
            test: SimulatedSplits::trajectories(&splits.test),
            branches,
        })
    }

    /// Writes `train/`, `validation/` and `test/` dataset directories
    /// under `dir`; the test directory also holds the branch files.
    pub fn save(&self, spec: &ExperimentSpec, dir: &Path) -> Result<(), ExperimentError> {
        for (split, name, trajs, n) in [
            (Split::Train, "train", &self.train, spec.splits.train),
            (Split::Validation, "validation", &self.validation, spec.splits.validation),
            (Split::Test, "test", &self.test, spec.splits.test),
        ] {
            let config = super::split_config(&spec.sim, split, n);
            let sub = dir.join(name);
            let mut manifest = Manifest::new("simulate", config.seed, self.gamma, &config);
            let mut buf = Vec::new();
            write_csv(trajs, &mut buf)?;
            manifest.write_file(&sub, "data.csv", &buf)?;
            super::write_sim_files(&mut manifest, &sub, &config)?;
            if split == Split::Test {
                for (tau, sets) in &self.branches {
                    let mut buf = Vec::new();
                    write_branches_csv(sets, &mut buf)?;
                    manifest.write_file(&sub, &branches_file_name(*tau), &buf)?;
                }
            }
            manifest.save(&sub)?;
        }
        Ok(())
    }

    /// Reads back a directory written by [`CellData::save`], loading the
    /// test branch files for `taus`.
    pub fn load(dir: &Path, taus: &[usize]) -> Result<Self, ExperimentError> {
        let (train, manifest) = load_dataset(&dir.join("train"))?;
        let (validation, _) = load_dataset(&dir.join("validation"))?;
        let (test, _) = load_dataset(&dir.join("test"))?;
        let gamma = manifest.map(|m| (m.gamma_c, m.gamma_r)).unwrap_or((f64::NAN, f64::NAN));
        let branches = taus
            .iter()
            .map(|&tau| Ok((tau, load_branches(&dir.join("test"), tau)?)))
            .collect::<Result<Vec<_>, ExperimentError>>()?;
        Ok(Self {
            gamma,
            train,
            validation,
            test,
            branches,
        })
    }
}

/// Reads `data.csv` from a dataset directory, checking it against the
/// manifest's hash when one is present (mismatch only warns).
pub fn load_dataset(dir: &Path) -> Result<(Vec<Trajectory>, Option<Manifest>), ExperimentError> {
    let path = dir.join("data.csv");
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let manifest_path = dir.join("manifest.json");
    let manifest = if manifest_path.exists() {
        let m = Manifest::load(&manifest_path)?;
        check_hash(&m, "data.csv", &bytes, dir);
        Some(m)
    } else {
        warn!("{}: no manifest.json", dir.display());
        None
    };
    Ok((read_csv(bytes.as_slice())?, manifest))
}

/// Reads `branches_tau{tau}.csv` from a dataset directory.
pub fn load_branches(dir: &Path, tau: usize) -> Result<Vec<CounterfactualBranchSet>, ExperimentError> {
    let name = branches_file_name(tau);
    let path = dir.join(&name);
    if !path.exists() {
        return Err(ExperimentError::Config(format!(
            "horizon {tau} requested but {} does not exist",
            path.display()
        )));
    }
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    if let Ok(m) = Manifest::load(&dir.join("manifest.json")) {
        check_hash(&m, &name, &bytes, dir);
    }
    let sets = read_branches_csv(bytes.as_slice())?;
    if let Some(b) = sets.iter().find(|b| b.tau != tau) {
        return Err(ExperimentError::Config(format!(
            "{} holds horizon {} rows",
            path.display(),
            b.tau
        )));
    }
    Ok(sets)
}

fn check_hash(manifest: &Manifest, name: &str, bytes: &[u8], dir: &Path) {
    match manifest.file_hash(name) {
        Some(h) if h == super::sha256_hex(bytes) => {}
        Some(_) => warn!("{}/{name}: hash differs from manifest", dir.display()),
        None => warn!("{}/{name}: not listed in manifest", dir.display()),
    }
}

/// RMSE rows for every horizon the model supports and, from τ = 2 on,
/// treatment/timing selection accuracy rows. NaN values are kept; callers
/// decide whether they are fatal.
pub fn evaluate_model(
    model: &dyn OutcomeModel,
    name: &str,
    gamma: (f64, f64),
    test: &[Trajectory],
    branches: &[(usize, Vec<CounterfactualBranchSet>)],
) -> Result<MetricsReport, ExperimentError> {
    let mut report = MetricsReport::default();
    for (tau, sets) in branches {
        let tau = *tau;
        if tau > model.max_horizon() {
            info!("{name}: skipping tau {tau} (model horizon {})", model.max_horizon());
            continue;
        }
        let n: usize = sets.iter().map(|s| s.plans.len()).sum();
        report.push(gamma, name, tau, "rmse", evaluate_branches(model, test, sets)?, n);
        if tau >= 2 {
            let acc = selection_accuracy(model, test, sets, EPSILON)?;
            report.push(gamma, name, tau, "treatment_accuracy", acc.treatment, acc.anchors);
            report.push(gamma, name, tau, "timing_accuracy", acc.timing, acc.anchors);
            let conditional = acc.outcomes.iter().filter(|o| o.treatment_correct()).count();
            report.push(gamma, name, tau, "timing_accuracy_conditional", acc.timing_given_treatment, conditional);
        }
    }
    Ok(report)
}

pub struct CellOutput {
    pub model: TrainedModel,
    pub phases: Vec<PhaseResult>,
    pub report: MetricsReport,
}

/// Trains `kind` on the data's train/validation splits and evaluates it
/// on the test branches.
pub fn train_and_evaluate(spec: &ExperimentSpec, kind: ModelKind, data: &CellData) -> Result<CellOutput, ExperimentError> {
    let settings = spec.resolved_settings();
    let (model, phases) = fit_model(kind, &data.train, &data.validation, &settings)?;
    let report = evaluate_model(model.as_model(), kind.name(), data.gamma, &data.test, &data.branches)?;
    if report.has_nan() {
        return Err(ExperimentError::Numerical(format!("{kind}: NaN metric")));
    }
    Ok(CellOutput { model, phases, report })
}

/// Training log rows of every phase: `phase,epoch,outcome_loss,...`.
pub fn write_training_log(phases: &[PhaseResult]) -> Vec<u8> {
    let mut out = String::from("phase,epoch,outcome_loss,treatment_loss,lambda,validation_rmse\n");
    for p in phases {
        for e in &p.history.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.phase, e.epoch, e.outcome_loss, e.treatment_loss, e.lambda, e.validation_rmse
            ));
        }
    }
    out.into_bytes()
}

/// One sweep cell: trains and evaluates, then writes `model.json`,
/// `train_log.csv`, `metrics.csv`, `metrics.json` and `manifest.json`
/// into `dir`.
pub fn run_cell(spec: &ExperimentSpec, kind: ModelKind, data: &CellData, dir: &Path) -> Result<CellOutput, ExperimentError> {
    let out = train_and_evaluate(spec, kind, data)?;
    let mut manifest = cell_manifest(&cell_spec(spec, kind, data.gamma));
    manifest.write_file(dir, "model.json", out.model.to_json().as_bytes())?;
    manifest.write_file(dir, "train_log.csv", &write_training_log(&out.phases))?;
    let mut buf = Vec::new();
    out.report.write_csv(&mut buf)?;
    manifest.write_file(dir, "metrics.csv", &buf)?;
    manifest.write_file(dir, "metrics.json", out.report.to_json().as_bytes())?;
    manifest.save(dir)?;
    Ok(out)
}

/// The spec of a single (γ, model) cell, as recorded in its manifest.
pub(crate) fn cell_spec(spec: &ExperimentSpec, kind: ModelKind, gamma: (f64, f64)) -> ExperimentSpec {
    let mut s = spec.with_gamma(gamma);
    s.model = kind;
    s.models.clear();
    s.gammas = vec![gamma];
    s
}

pub(crate) fn cell_manifest(cell_spec: &ExperimentSpec) -> Manifest {
    Manifest::new(
        "train",
        cell_spec.seed,
        (cell_spec.sim.gamma_c, cell_spec.sim.gamma_r),
        cell_spec,
    )
}
