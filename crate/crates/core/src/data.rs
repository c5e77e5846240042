//! Observational patient records and their CSV form.
//!
//! Time is indexed from zero throughout: step `t` of a trajectory holds the
//! tumour volume `V(t)`, the chemotherapy concentration `C(t)` after the
//! dosing decision at `t`, the treatment `A(t)`, and the outcome
//! `Y(t+1) = V(t+1)`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("patient {patient_id}: {message}")]
    Malformed { patient_id: u64, message: String },
}

/// The four treatment options at one timestep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Treatment {
    None = 0,
    Chemo = 1,
    Radio = 2,
    Both = 3,
}

impl Treatment {
    pub const ALL: [Treatment; 4] = [Treatment::None, Treatment::Chemo, Treatment::Radio, Treatment::Both];
    pub const COUNT: usize = 4;

    pub fn from_flags(chemo: bool, radio: bool) -> Self {
        match (chemo, radio) {
            (false, false) => Treatment::None,
            (true, false) => Treatment::Chemo,
            (false, true) => Treatment::Radio,
            (true, true) => Treatment::Both,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn chemo(self) -> bool {
        matches!(self, Treatment::Chemo | Treatment::Both)
    }

    pub fn radio(self) -> bool {
        matches!(self, Treatment::Radio | Treatment::Both)
    }

    /// Two-binary encoding `[chemo, radio]`.
    pub fn flags(self) -> [f64; 2] {
        [f64::from(u8::from(self.chemo())), f64::from(u8::from(self.radio()))]
    }

    pub fn one_hot(self) -> [f64; 4] {
        let mut v = [0.0; 4];
        v[self.index()] = 1.0;
        v
    }
}

/// One patient's observed sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub patient_id: u64,
    /// Static subgroup in `1..=3`.
    pub subgroup: u8,
    pub volumes: Vec<f64>,
    pub chemo_concentration: Vec<f64>,
    pub treatments: Vec<Treatment>,
    /// `outcomes[t] = V(t+1)`.
    pub outcomes: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    /// Concentration carried into step `t` before that step's dosing.
    pub fn prior_concentration(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.chemo_concentration[t - 1]
        }
    }

    /// Treatment at `t - 1`, with "no treatment" before the first step.
    pub fn previous_treatment(&self, t: usize) -> Treatment {
        if t == 0 {
            Treatment::None
        } else {
            self.treatments[t - 1]
        }
    }

    pub fn subgroup_one_hot(&self) -> [f64; 3] {
        let mut v = [0.0; 3];
        v[usize::from(self.subgroup.clamp(1, 3)) - 1] = 1.0;
        v
    }

    /// Covariates observed at `t` before the treatment decision: volume and
    /// carried-over concentration.
    pub fn covariates(&self, t: usize) -> [f64; 2] {
        [self.volumes[t], self.prior_concentration(t)]
    }

    /// Copy truncated to the first `len` steps.
    pub fn truncated(&self, len: usize) -> Trajectory {
        let len = len.min(self.len());
        Trajectory {
            patient_id: self.patient_id,
            subgroup: self.subgroup,
            volumes: self.volumes[..len].to_vec(),
            chemo_concentration: self.chemo_concentration[..len].to_vec(),
            treatments: self.treatments[..len].to_vec(),
            outcomes: self.outcomes[..len].to_vec(),
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        let n = self.volumes.len();
        let fail = |message: &str| DataError::Malformed {
            patient_id: self.patient_id,
            message: message.to_string(),
        };
        if n == 0 {
            return Err(fail("empty trajectory"));
        }
        if self.chemo_concentration.len() != n || self.treatments.len() != n || self.outcomes.len() != n {
            return Err(fail("sequence lengths differ"));
        }
        if !(1..=3).contains(&self.subgroup) {
            return Err(fail("subgroup outside 1..=3"));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    patient_id: u64,
    t: usize,
    volume: f64,
    chemo_conc: f64,
    treatment: u8,
    outcome: f64,
    subgroup: u8,
}

/// Writes one row per (patient, timestep).
pub fn write_csv<W: Write>(trajectories: &[Trajectory], writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    for tr in trajectories {
        for t in 0..tr.len() {
            w.serialize(CsvRow {
                patient_id: tr.patient_id,
                t,
                volume: tr.volumes[t],
                chemo_conc: tr.chemo_concentration[t],
                treatment: tr.treatments[t] as u8,
                outcome: tr.outcomes[t],
                subgroup: tr.subgroup,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads rows written by [`write_csv`]; patients keep first-seen order and
/// rows must be contiguous in `t` starting from zero.
pub fn read_csv<R: Read>(reader: R) -> Result<Vec<Trajectory>, DataError> {
    let mut r = csv::Reader::from_reader(reader);
    let mut order: Vec<u64> = Vec::new();
    let mut by_id: BTreeMap<u64, Trajectory> = BTreeMap::new();
    for row in r.deserialize::<CsvRow>() {
        let row = row?;
        let tr = by_id.entry(row.patient_id).or_insert_with(|| {
            order.push(row.patient_id);
            Trajectory {
                patient_id: row.patient_id,
                subgroup: row.subgroup,
                volumes: Vec::new(),
                chemo_concentration: Vec::new(),
                treatments: Vec::new(),
                outcomes: Vec::new(),
            }
        });
        if row.t != tr.len() {
            return Err(DataError::Malformed {
                patient_id: row.patient_id,
                message: format!("expected t = {}, found {}", tr.len(), row.t),
            });
        }
        let treatment = Treatment::from_index(usize::from(row.treatment)).ok_or_else(|| DataError::Malformed {
            patient_id: row.patient_id,
            message: format!("treatment code {} outside 0..=3", row.treatment),
        })?;
        tr.volumes.push(row.volume);
        tr.chemo_concentration.push(row.chemo_conc);
        tr.treatments.push(treatment);
        tr.outcomes.push(row.outcome);
    }
    let out: Vec<Trajectory> = order.into_iter().map(|id| by_id.remove(&id).expect("seen id")).collect();
    for tr in &out {
        tr.validate()?;
    }
    Ok(out)
}

/// Mean and standard deviation of the continuous covariates, taken over all
/// training patient-timesteps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub volume_mean: f64,
    pub volume_std: f64,
    pub conc_mean: f64,
    pub conc_std: f64,
}

impl Standardizer {
    pub fn fit(trajectories: &[Trajectory]) -> Self {
        let mut vols = Vec::new();
        let mut concs = Vec::new();
        for tr in trajectories {
            for t in 0..tr.len() {
                let [v, c] = tr.covariates(t);
                vols.push(v);
                concs.push(c);
            }
        }
        let (volume_mean, volume_std) = mean_std(&vols);
        let (conc_mean, conc_std) = mean_std(&concs);
        Self {
            volume_mean,
            volume_std,
            conc_mean,
            conc_std,
        }
    }

    pub fn volume(&self, v: f64) -> f64 {
        (v - self.volume_mean) / self.volume_std
    }

    pub fn concentration(&self, c: f64) -> f64 {
        (c - self.conc_mean) / self.conc_std
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 1.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std > 1e-12 { std } else { 1.0 })
}
