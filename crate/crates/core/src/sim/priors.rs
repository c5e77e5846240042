use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dynamics::volume_from_diameter;
use super::SimError;

const REFERENCE_PRIORS: &str = include_str!("../../assets/priors_reference.json");

/// Prior for one patient parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ParamPrior {
    Fixed { value: f64 },
    /// Normal distribution restricted to non-negative values by rejection.
    TruncatedNormal { mean: f64, std: f64 },
    /// Radio beta derived from radio alpha as `alpha / ratio`.
    AlphaRatio { ratio: f64 },
}

impl ParamPrior {
    fn mean(&self) -> f64 {
        match self {
            ParamPrior::Fixed { value } => *value,
            ParamPrior::TruncatedNormal { mean, .. } => *mean,
            ParamPrior::AlphaRatio { .. } => f64::NAN,
        }
    }

    fn std(&self) -> f64 {
        match self {
            ParamPrior::TruncatedNormal { std, .. } => *std,
            _ => 0.0,
        }
    }
}

/// Initial tumour size distribution of one cancer stage: log-normal in
/// diameter, truncated to `[min_diameter_cm, max_diameter_cm]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePrior {
    pub name: String,
    pub probability: f64,
    pub log_diameter_mean: f64,
    pub log_diameter_std: f64,
    pub min_diameter_cm: f64,
    pub max_diameter_cm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    #[serde(default)]
    pub source: String,
    pub growth_rate: ParamPrior,
    pub carrying_capacity: ParamPrior,
    pub chemo_sensitivity: ParamPrior,
    pub radio_alpha: ParamPrior,
    pub radio_beta: ParamPrior,
    /// Correlation between growth rate and radio alpha draws.
    #[serde(default)]
    pub growth_radio_correlation: f64,
    pub stages: Vec<StagePrior>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl PriorConfig {
    /// The prior file shipped with the crate (`assets/priors_reference.json`).
    pub fn reference() -> Self {
        serde_json::from_str(REFERENCE_PRIORS).expect("shipped prior file parses")
    }

    pub fn from_json(json: &str) -> Result<Self, SimError> {
        let priors: Self = serde_json::from_str(json).map_err(|e| SimError::Config {
            field: "priors".into(),
            message: e.to_string(),
        })?;
        priors.validate()?;
        Ok(priors)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |field: &str, message: String| SimError::Config {
            field: field.into(),
            message,
        };
        for (name, prior) in [
            ("growth_rate", &self.growth_rate),
            ("carrying_capacity", &self.carrying_capacity),
            ("chemo_sensitivity", &self.chemo_sensitivity),
            ("radio_alpha", &self.radio_alpha),
        ] {
            match prior {
                ParamPrior::TruncatedNormal { mean, std } if !(*std >= 0.0 && mean.is_finite()) => {
                    return Err(bad(name, format!("std must be >= 0, got {std}")));
                }
                ParamPrior::AlphaRatio { .. } => {
                    return Err(bad(name, "alpha_ratio is only valid for radio_beta".into()));
                }
                _ => {}
            }
        }
        if let ParamPrior::Fixed { value } = self.carrying_capacity {
            if value <= 0.0 {
                return Err(bad("carrying_capacity", "must be positive".into()));
            }
        }
        match self.radio_beta {
            ParamPrior::AlphaRatio { ratio } if ratio <= 0.0 => {
                return Err(bad("radio_beta", "ratio must be positive".into()));
            }
            ParamPrior::TruncatedNormal { std, .. } if std < 0.0 => {
                return Err(bad("radio_beta", "std must be >= 0".into()));
            }
            _ => {}
        }
        if !(-1.0..=1.0).contains(&self.growth_radio_correlation) {
            return Err(bad("growth_radio_correlation", "must lie in [-1, 1]".into()));
        }
        if self.stages.is_empty() {
            return Err(bad("stages", "at least one stage required".into()));
        }
        let total: f64 = self.stages.iter().map(|s| s.probability).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(bad("stages", format!("probabilities sum to {total}, expected 1")));
        }
        for s in &self.stages {
            if s.probability < 0.0 || s.log_diameter_std < 0.0 || !(0.0 < s.min_diameter_cm && s.min_diameter_cm < s.max_diameter_cm) {
                return Err(bad("stages", format!("invalid stage `{}`", s.name)));
            }
        }
        Ok(())
    }
}

/// Parameters of one simulated patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientParams {
    pub rho: f64,
    pub carrying_capacity: f64,
    pub beta_c: f64,
    pub alpha_r: f64,
    pub beta_r: f64,
    /// Static subgroup in `1..=3`.
    pub subgroup: u8,
}

impl PatientParams {
    /// Patient whose tumour ignores both treatments.
    pub fn without_treatment_response(&self) -> Self {
        Self {
            beta_c: 0.0,
            alpha_r: 0.0,
            beta_r: 0.0,
            ..self.clone()
        }
    }
}

/// Prior means after the subgroup adjustment: chemo sensitivity is raised
/// by 10% for subgroup 3 and radio alpha by 10% for subgroup 1.
pub fn adjusted_means(priors: &PriorConfig, subgroup: u8) -> (f64, f64) {
    let beta_c = priors.chemo_sensitivity.mean();
    let alpha_r = priors.radio_alpha.mean();
    let beta_c = if subgroup == 3 { 1.1 * beta_c } else { beta_c };
    let alpha_r = if subgroup == 1 { 1.1 * alpha_r } else { alpha_r };
    (beta_c, alpha_r)
}

const MAX_REJECTIONS: usize = 100_000;

fn draw_nonnegative<R: Rng + ?Sized>(rng: &mut R, mean: f64, std: f64) -> f64 {
    if std == 0.0 {
        return mean.max(0.0);
    }
    for _ in 0..MAX_REJECTIONS {
        let z: f64 = StandardNormal.sample(rng);
        let v = mean + std * z;
        if v >= 0.0 {
            return v;
        }
    }
    0.0
}

fn draw(prior: &ParamPrior, mean: f64, rng: &mut (impl Rng + ?Sized)) -> f64 {
    match prior {
        ParamPrior::Fixed { value } => *value,
        ParamPrior::TruncatedNormal { std, .. } => draw_nonnegative(rng, mean, *std),
        ParamPrior::AlphaRatio { .. } => unreachable!("validated"),
    }
}

/// Samples a subgroup uniformly from `{1, 2, 3}` and the patient's growth
/// and treatment-response parameters with subgroup-adjusted means.
pub fn sample_patient_params<R: Rng + ?Sized>(priors: &PriorConfig, rng: &mut R) -> PatientParams {
    let subgroup: u8 = rng.random_range(1..=3);
    sample_patient_params_for(priors, subgroup, rng)
}

pub fn sample_patient_params_for<R: Rng + ?Sized>(priors: &PriorConfig, subgroup: u8, rng: &mut R) -> PatientParams {
    let (beta_c_mean, alpha_mean) = adjusted_means(priors, subgroup);
    let rho_mean = priors.growth_rate.mean();

    let (rho, alpha_r) = match (&priors.growth_rate, &priors.radio_alpha) {
        (ParamPrior::TruncatedNormal { .. }, ParamPrior::TruncatedNormal { .. })
            if priors.growth_radio_correlation != 0.0 =>
        {
            // bivariate normal, both components kept non-negative by joint rejection
            let (s_rho, s_alpha) = (priors.growth_rate.std(), priors.radio_alpha.std());
            let corr = priors.growth_radio_correlation;
            let mut pair = (rho_mean.max(0.0), alpha_mean.max(0.0));
            for _ in 0..MAX_REJECTIONS {
                let z1: f64 = StandardNormal.sample(rng);
                let z2: f64 = StandardNormal.sample(rng);
                let rho = rho_mean + s_rho * z1;
                let alpha = alpha_mean + s_alpha * (corr * z1 + (1.0 - corr * corr).sqrt() * z2);
                if rho >= 0.0 && alpha >= 0.0 {
                    pair = (rho, alpha);
                    break;
                }
            }
            pair
        }
        _ => {
            let rho = draw(&priors.growth_rate, rho_mean, rng);
            let alpha = draw(&priors.radio_alpha, alpha_mean, rng);
            (rho, alpha)
        }
    };
    let beta_c = draw(&priors.chemo_sensitivity, beta_c_mean, rng);
    let beta_r = match &priors.radio_beta {
        ParamPrior::AlphaRatio { ratio } => alpha_r / ratio,
        other => draw(other, other.mean(), rng),
    };
    let carrying_capacity = draw(&priors.carrying_capacity, priors.carrying_capacity.mean(), rng);
    PatientParams {
        rho,
        carrying_capacity,
        beta_c,
        alpha_r,
        beta_r,
        subgroup,
    }
}

/// Samples a cancer stage and an initial tumour volume (cm³) for it.
pub fn sample_initial_volume<R: Rng + ?Sized>(priors: &PriorConfig, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut stage = priors.stages.last().expect("validated");
    for s in &priors.stages {
        acc += s.probability;
        if u < acc {
            stage = s;
            break;
        }
    }
    let (lo, hi) = (stage.min_diameter_cm.ln(), stage.max_diameter_cm.ln());
    let mut log_d = 0.5 * (lo + hi);
    for _ in 0..MAX_REJECTIONS {
        let z: f64 = StandardNormal.sample(rng);
        let v = stage.log_diameter_mean + stage.log_diameter_std * z;
        if (lo..=hi).contains(&v) {
            log_d = v;
            break;
        }
    }
    volume_from_diameter(log_d.exp())
}
