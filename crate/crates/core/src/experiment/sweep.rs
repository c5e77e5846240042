use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;

use super::cell::{cell_manifest, cell_spec, run_cell, CellData};
use super::{io_err, write_atomic, ExperimentError, ExperimentSpec, Manifest};
use crate::eval::MetricsReport;
use crate::models::ModelKind;

pub struct SweepOutcome {
    pub results: MetricsReport,
    /// `(gamma, model, error message)` of failed cells.
    pub failures: Vec<((f64, f64), ModelKind, String)>,
    /// Cells taken from a previous run.
    pub reused: usize,
    pub results_path: PathBuf,
}

pub fn gamma_dir_name(gamma: (f64, f64)) -> String {
    format!("gc{}_gr{}", gamma.0, gamma.1)
}

/// Previously completed cell whose manifest matches `expected`.
fn completed_cell(dir: &Path, expected: &Manifest) -> Option<MetricsReport> {
    let manifest = Manifest::load(&dir.join("manifest.json")).ok()?;
    if manifest.config_sha256 != expected.config_sha256 {
        return None;
    }
    let bytes = fs::read(dir.join("metrics.csv")).ok()?;
    if manifest.file_hash("metrics.csv") != Some(&super::sha256_hex(&bytes)) {
        return None;
    }
    MetricsReport::read_csv(bytes.as_slice()).ok()
}

/// Simulate, train and evaluate every `(γ, model)` cell of `spec`.
///
/// Layout under `out`: `datasets/<γ>/{train,validation,test}/`,
/// `cells/<γ>/<model>/`, `results.csv`, `failures.csv`, `manifest.json`.
/// With `resume`, cells whose manifest hash matches and whose metrics file
/// is intact are read back instead of retrained. A failed cell is logged
/// in `failures.csv` and the sweep continues. At most `workers` cells
/// train at once.
pub fn sweep(spec: &ExperimentSpec, out: &Path, resume: bool, workers: usize) -> Result<SweepOutcome, ExperimentError> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let gammas = spec.sweep_gammas();
    let models = spec.sweep_models();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| ExperimentError::Config(e.to_string()))?;

    let mut results = MetricsReport::default();
    let mut failures = Vec::new();
    let mut reused = 0;
    for &gamma in &gammas {
        let gspec = spec.with_gamma(gamma);
        let gname = gamma_dir_name(gamma);
        let cells: Vec<(ModelKind, PathBuf, Manifest)> = models
            .iter()
            .map(|&k| {
                let dir = out.join("cells").join(&gname).join(k.name());
                (k, dir, cell_manifest(&cell_spec(spec, k, gamma)))
            })
            .collect();
        let mut done: Vec<Option<MetricsReport>> = cells
            .iter()
            .map(|(_, dir, m)| if resume { completed_cell(dir, m) } else { None })
            .collect();
        reused += done.iter().filter(|d| d.is_some()).count();
        if done.iter().any(Option::is_none) {
            let data_dir = out.join("datasets").join(&gname);
            let data = match CellData::simulate(&gspec) {
                Ok(d) => d,
                Err(e) if e.is_config() => return Err(e),
                Err(e) => {
                    warn!("{gname}: simulation failed: {e}");
                    for (k, _, _) in &cells {
                        failures.push((gamma, *k, format!("simulation: {e}")));
                    }
                    continue;
                }
            };
            data.save(&gspec, &data_dir)?;
            let todo: Vec<usize> = (0..cells.len()).filter(|&i| done[i].is_none()).collect();
            let ran: Vec<(usize, Result<MetricsReport, ExperimentError>)> = pool.install(|| {
                todo.par_iter()
                    .map(|&i| {
                        let (kind, dir, _) = &cells[i];
                        info!("{gname} {kind}: training");
                        (i, run_cell(&gspec, *kind, &data, dir).map(|o| o.report))
                    })
                    .collect()
            });
            for (i, r) in ran {
                match r {
                    Ok(report) => done[i] = Some(report),
                    Err(e) => {
                        let (kind, dir, _) = &cells[i];
                        warn!("{gname} {kind}: {e}");
                        let _ = write_atomic(&dir.join("error.txt"), format!("{e}\n").as_bytes());
                        failures.push((gamma, *kind, e.to_string()));
                    }
                }
            }
        }
        for report in done.into_iter().flatten() {
            results.extend(report);
        }
    }

    let results_path = out.join("results.csv");
    let mut buf = Vec::new();
    results.write_csv(&mut buf)?;
    let mut manifest = Manifest::new("sweep", spec.seed, (spec.sim.gamma_c, spec.sim.gamma_r), spec);
    manifest.write_file(out, "results.csv", &buf)?;
    let mut fail = csv::Writer::from_writer(Vec::new());
    fail.write_record(["gamma_c", "gamma_r", "model", "tag", "message"])
        .map_err(crate::eval::EvalError::from)?;
    for ((c, r), k, msg) in &failures {
        fail.write_record([c.to_string(), r.to_string(), k.name().to_string(), "error".into(), msg.clone()])
            .map_err(crate::eval::EvalError::from)?;
    }
    let fail = fail.into_inner().map_err(|e| ExperimentError::Numerical(e.to_string()))?;
    manifest.write_file(out, "failures.csv", &fail)?;
    manifest.save(out)?;
    Ok(SweepOutcome {
        results,
        failures,
        reused,
        results_path,
    })
}
