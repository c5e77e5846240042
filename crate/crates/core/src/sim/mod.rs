//! Pharmacokinetic/pharmacodynamic tumour-growth simulator.
//!
//! Each day a patient's tumour volume follows a Gompertz growth term, minus
//! a chemotherapy kill proportional to drug concentration and a
//! linear-quadratic radiotherapy kill, plus Gaussian noise. Chemotherapy and
//! radiotherapy are assigned by independent coin flips whose bias grows with
//! the recent mean tumour diameter, which is what makes the treatment
//! assignment confounded in time. `gamma_c` and `gamma_r` control how strong
//! that dependence is.
//!
//! All randomness is keyed by `(seed, patient id, day)` through
//! [`crate::rng::stream`]; the noise of day `t` is the first draw of that
//! day's stream, so counterfactual branches replay the exact factual noise.

mod counterfactual;
mod dynamics;
mod priors;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use counterfactual::{
    generate_all_counterfactuals, generate_counterfactuals, read_branches_csv, roll_plan, single_step_plans, timing_plans,
    write_branches_csv, CounterfactualBranchSet,
};
pub use dynamics::{
    assignment_probability, diameter_from_volume, mean_recent, step_volume, update_chemo_concentration,
    volume_from_diameter, VOLUME_FLOOR,
};
pub use priors::{
    adjusted_means, sample_initial_volume, sample_patient_params, sample_patient_params_for, ParamPrior,
    PatientParams, PriorConfig, StagePrior,
};

use crate::data::{Trajectory, Treatment};
use crate::rng::{stream, tag};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("tumour volume must be positive, got {0}")]
    NonPositiveVolume(f64),
    #[error("anchor t={t} with horizon {tau} exceeds max_timesteps {max}")]
    HorizonOutOfRange { t: usize, tau: usize, max: usize },
    #[error("anchor t={t} outside trajectory of length {len}")]
    AnchorOutOfRange { t: usize, len: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn default_noise_std() -> f64 {
    0.01
}
fn default_d_max() -> f64 {
    13.0
}
fn default_max_timesteps() -> usize {
    60
}
fn default_window() -> usize {
    15
}
fn default_chemo_dose() -> f64 {
    5.0
}
fn default_radio_dose() -> f64 {
    2.0
}
fn default_true() -> bool {
    true
}

/// Simulation settings. Serialized as JSON; omitted fields take defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub gamma_c: f64,
    pub gamma_r: f64,
    pub n_patients: usize,
    #[serde(default = "default_max_timesteps")]
    pub max_timesteps: usize,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    #[serde(default = "default_d_max")]
    pub d_max: f64,
    /// Defaults to `d_max / 2`.
    #[serde(default)]
    pub delta_c: Option<f64>,
    /// Defaults to `d_max / 2`.
    #[serde(default)]
    pub delta_r: Option<f64>,
    #[serde(default = "default_window")]
    pub diameter_window: usize,
    #[serde(default = "default_chemo_dose")]
    pub chemo_dose: f64,
    #[serde(default = "default_radio_dose")]
    pub radio_dose: f64,
    #[serde(default)]
    pub seed: u64,
    /// Id of the first patient; ids are consecutive from here. Train,
    /// validation and test sets use disjoint ranges.
    #[serde(default)]
    pub first_patient_id: u64,
    /// End a trajectory once the tumour diameter reaches `d_max`.
    #[serde(default = "default_true")]
    pub stop_at_death: bool,
    #[serde(default)]
    pub priors: PriorConfig,
}

impl SimConfig {
    pub fn new(gamma: f64, n_patients: usize, seed: u64) -> Self {
        Self {
            gamma_c: gamma,
            gamma_r: gamma,
            n_patients,
            max_timesteps: default_max_timesteps(),
            noise_std: default_noise_std(),
            d_max: default_d_max(),
            delta_c: None,
            delta_r: None,
            diameter_window: default_window(),
            chemo_dose: default_chemo_dose(),
            radio_dose: default_radio_dose(),
            seed,
            first_patient_id: 0,
            stop_at_death: true,
            priors: PriorConfig::reference(),
        }
    }

    pub fn delta_c(&self) -> f64 {
        self.delta_c.unwrap_or(self.d_max / 2.0)
    }

    pub fn delta_r(&self) -> f64 {
        self.delta_r.unwrap_or(self.d_max / 2.0)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |field: &str, message: &str| {
            Err(SimError::Config {
                field: field.into(),
                message: message.into(),
            })
        };
        if !(self.gamma_c >= 0.0) {
            return bad("gamma_c", "must be >= 0");
        }
        if !(self.gamma_r >= 0.0) {
            return bad("gamma_r", "must be >= 0");
        }
        if self.max_timesteps == 0 {
            return bad("max_timesteps", "must be positive");
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std", "must be >= 0");
        }
        if !(self.d_max > 0.0) {
            return bad("d_max", "must be positive");
        }
        if self.diameter_window == 0 {
            return bad("diameter_window", "must be positive");
        }
        self.priors.validate()
    }

    /// Treatment probabilities `(p_c, p_r)` for a recent mean diameter.
    pub fn treatment_probabilities(&self, mean_diameter: f64) -> (f64, f64) {
        (
            assignment_probability(mean_diameter, self.gamma_c, self.d_max, self.delta_c()),
            assignment_probability(mean_diameter, self.gamma_r, self.d_max, self.delta_r()),
        )
    }

    pub fn from_json(json: &str) -> Result<Self, SimError> {
        let config: Self = serde_json::from_str(json).map_err(|e| SimError::Config {
            field: "<root>".into(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }
}

/// `(p_c, p_r)` for a recent mean diameter under `config`.
pub fn treatment_probabilities(mean_diameter: f64, config: &SimConfig) -> (f64, f64) {
    config.treatment_probabilities(mean_diameter)
}

/// Random numbers consumed on one simulated day, in draw order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDraws {
    pub noise: f64,
    pub u_chemo: f64,
    pub u_radio: f64,
}

pub fn step_draws(config: &SimConfig, patient_id: u64, t: usize) -> StepDraws {
    let mut rng = stream(config.seed, &[tag::STEP, patient_id, t as u64]);
    let noise = if config.noise_std > 0.0 {
        Normal::new(0.0, config.noise_std).expect("valid std").sample(&mut rng)
    } else {
        0.0
    };
    StepDraws {
        noise,
        u_chemo: rng.random(),
        u_radio: rng.random(),
    }
}

/// Tumour state at the start of day `t`, before that day's treatment.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientState {
    pub t: usize,
    pub volume: f64,
    /// Concentration left over from day `t - 1`.
    pub concentration: f64,
    /// Diameters of days `0..=t`.
    pub diameters: Vec<f64>,
}

impl PatientState {
    pub fn initial(volume: f64) -> Self {
        Self {
            t: 0,
            volume,
            concentration: 0.0,
            diameters: vec![diameter_from_volume(volume)],
        }
    }

    /// State at the start of day `t` of an observed trajectory.
    pub fn from_trajectory(trajectory: &Trajectory, t: usize) -> Self {
        Self {
            t,
            volume: trajectory.volumes[t],
            concentration: trajectory.prior_concentration(t),
            diameters: trajectory.volumes[..=t].iter().map(|&v| diameter_from_volume(v)).collect(),
        }
    }

    pub fn mean_diameter(&self, window: usize) -> f64 {
        mean_recent(&self.diameters, window)
    }

    /// Applies `treatment` for one day with noise `e`. Returns the
    /// concentration of the day; `self` moves to day `t + 1`.
    pub fn advance(
        &mut self,
        treatment: Treatment,
        e: f64,
        params: &PatientParams,
        config: &SimConfig,
    ) -> Result<f64, SimError> {
        let dose = treatment.chemo().then_some(config.chemo_dose);
        let c = update_chemo_concentration(self.concentration, dose);
        let d = if treatment.radio() { config.radio_dose } else { 0.0 };
        let next = step_volume(self.volume, c, d, params, e)?;
        self.t += 1;
        self.volume = next;
        self.concentration = c;
        self.diameters.push(diameter_from_volume(next));
        Ok(c)
    }
}

/// Ground-truth parameters alongside the observed trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatedPatient {
    pub params: PatientParams,
    pub trajectory: Trajectory,
}

pub fn simulate_patient(config: &SimConfig, patient_id: u64) -> Result<SimulatedPatient, SimError> {
    let mut rng = stream(config.seed, &[tag::PATIENT_PARAMS, patient_id]);
    let params = sample_patient_params(&config.priors, &mut rng);
    let v0 = sample_initial_volume(&config.priors, &mut rng);
    simulate_from(config, patient_id, params, v0)
}

/// Runs the observational policy for a patient with known parameters.
pub fn simulate_from(
    config: &SimConfig,
    patient_id: u64,
    params: PatientParams,
    initial_volume: f64,
) -> Result<SimulatedPatient, SimError> {
    let mut state = PatientState::initial(initial_volume);
    let mut tr = Trajectory {
        patient_id,
        subgroup: params.subgroup,
        volumes: Vec::with_capacity(config.max_timesteps),
        chemo_concentration: Vec::with_capacity(config.max_timesteps),
        treatments: Vec::with_capacity(config.max_timesteps),
        outcomes: Vec::with_capacity(config.max_timesteps),
    };
    for t in 0..config.max_timesteps {
        let draws = step_draws(config, patient_id, t);
        let (p_c, p_r) = config.treatment_probabilities(state.mean_diameter(config.diameter_window));
        let treatment = Treatment::from_flags(draws.u_chemo < p_c, draws.u_radio < p_r);
        tr.volumes.push(state.volume);
        let c = state.advance(treatment, draws.noise, &params, config)?;
        tr.chemo_concentration.push(c);
        tr.treatments.push(treatment);
        tr.outcomes.push(state.volume);
        if config.stop_at_death && diameter_from_volume(state.volume) >= config.d_max {
            break;
        }
    }
    Ok(SimulatedPatient { params, trajectory: tr })
}

/// Simulates `config.n_patients` patients with consecutive ids.
pub fn simulate_patients(config: &SimConfig) -> Result<Vec<SimulatedPatient>, SimError> {
    config.validate()?;
    (0..config.n_patients as u64)
        .into_par_iter()
        .map(|i| simulate_patient(config, config.first_patient_id + i))
        .collect()
}

pub fn simulate_dataset(config: &SimConfig) -> Result<Vec<Trajectory>, SimError> {
    Ok(simulate_patients(config)?.into_iter().map(|p| p.trajectory).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_deltas_are_half_dmax() {
        let c = SimConfig::new(3.0, 1, 0);
        assert_eq!(c.delta_c(), 6.5);
        assert_eq!(c.delta_r(), 6.5);
        let (pc, pr) = c.treatment_probabilities(6.5);
        assert_eq!((pc, pr), (0.5, 0.5));
    }

    #[test]
    fn config_json_defaults() {
        let c = SimConfig::from_json(r#"{"gamma_c": 2, "gamma_r": 1, "n_patients": 5}"#).unwrap();
        assert_eq!(c.max_timesteps, 60);
        assert_eq!(c.noise_std, 0.01);
        assert_eq!(c.priors, PriorConfig::reference());
        assert!(SimConfig::from_json(r#"{"gamma_c": -1, "gamma_r": 1, "n_patients": 5}"#).is_err());
    }

    #[test]
    fn simulation_is_deterministic_and_positive() {
        let c = SimConfig::new(5.0, 30, 11);
        let a = simulate_dataset(&c).unwrap();
        let b = simulate_dataset(&c).unwrap();
        assert_eq!(a, b);
        for tr in &a {
            assert!(tr.len() <= 60 && !tr.is_empty());
            for t in 0..tr.len() {
                assert!(tr.volumes[t] > 0.0 && tr.volumes[t].is_finite());
                if t + 1 < tr.len() {
                    assert_eq!(tr.outcomes[t], tr.volumes[t + 1]);
                }
            }
        }
    }

    #[test]
    fn concentration_halves_without_dosing() {
        let c = SimConfig::new(5.0, 20, 2);
        for tr in simulate_dataset(&c).unwrap() {
            for t in 1..tr.len() {
                if !tr.treatments[t].chemo() {
                    assert_eq!(tr.chemo_concentration[t], tr.chemo_concentration[t - 1] / 2.0);
                }
            }
        }
    }

    #[test]
    fn death_ends_trajectory() {
        let c = SimConfig::new(0.0, 200, 4);
        for tr in simulate_dataset(&c).unwrap() {
            let last = *tr.outcomes.last().unwrap();
            if tr.len() < c.max_timesteps {
                assert!(diameter_from_volume(last) >= c.d_max);
            }
            for t in 0..tr.len() - 1 {
                assert!(diameter_from_volume(tr.outcomes[t]) < c.d_max);
            }
        }
    }
}
