//! Browser bindings for the tumour simulator. Every export returns JSON
//! text; the `*_json` functions hold the logic and run natively too.
//! Seeds and patient ids are `u32` at the boundary so the page can pass
//! plain numbers.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use crn_core::eval::{select_treatment_and_timing, EPSILON};
use crn_core::sim::{diameter_from_volume, generate_counterfactuals, simulate_patient, SimConfig};

/// Longest simulation accepted from the page.
const MAX_DAYS: usize = 120;

#[derive(Serialize)]
pub struct PatientView {
    pub patient_id: u64,
    pub subgroup: u8,
    pub volume: Vec<f64>,
    pub diameter: Vec<f64>,
    pub chemo_concentration: Vec<f64>,
    pub chemo: Vec<bool>,
    pub radio: Vec<bool>,
    pub outcome: Vec<f64>,
}

#[derive(Serialize)]
pub struct PolicyCurve {
    pub mean_diameter: Vec<f64>,
    pub p_chemo: Vec<f64>,
    pub p_radio: Vec<f64>,
}

#[derive(Serialize)]
pub struct Branch {
    /// `"chemo"` or `"radio"`.
    pub arm: &'static str,
    /// Day (0-based, from the anchor) the single treatment is given.
    pub day: usize,
    /// Volume path over the horizon.
    pub volume: Vec<f64>,
}

#[derive(Serialize)]
pub struct BranchView {
    pub t: usize,
    pub tau: usize,
    pub branches: Vec<Branch>,
    /// Indices into `branches` of the arm/day choices within the tie
    /// tolerance.
    pub best: Vec<usize>,
}

fn config(gamma_c: f64, gamma_r: f64, days: usize, seed: u64) -> Result<SimConfig, String> {
    if days == 0 || days > MAX_DAYS {
        return Err(format!("days must be in 1..={MAX_DAYS}"));
    }
    let mut c = SimConfig::new(0.0, 1, seed);
    c.gamma_c = gamma_c;
    c.gamma_r = gamma_r;
    c.max_timesteps = days;
    c.validate().map_err(|e| e.to_string())?;
    Ok(c)
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("view serializes")
}

pub fn simulate_patient_json(gamma_c: f64, gamma_r: f64, days: usize, seed: u64, patient_id: u64) -> Result<String, String> {
    let c = config(gamma_c, gamma_r, days, seed)?;
    let p = simulate_patient(&c, patient_id).map_err(|e| e.to_string())?;
    let tr = &p.trajectory;
    Ok(to_json(&PatientView {
        patient_id,
        subgroup: tr.subgroup,
        diameter: tr.volumes.iter().map(|&v| diameter_from_volume(v)).collect(),
        volume: tr.volumes.clone(),
        chemo_concentration: tr.chemo_concentration.clone(),
        chemo: tr.treatments.iter().map(|a| a.chemo()).collect(),
        radio: tr.treatments.iter().map(|a| a.radio()).collect(),
        outcome: tr.outcomes.clone(),
    }))
}

pub fn treatment_probability_curve_json(gamma_c: f64, gamma_r: f64, points: usize) -> Result<String, String> {
    let c = config(gamma_c, gamma_r, 1, 0)?;
    let n = points.clamp(2, 1000);
    let diameters: Vec<f64> = (0..n).map(|i| c.d_max * i as f64 / (n - 1) as f64).collect();
    let probs: Vec<(f64, f64)> = diameters.iter().map(|&d| c.treatment_probabilities(d)).collect();
    Ok(to_json(&PolicyCurve {
        mean_diameter: diameters,
        p_chemo: probs.iter().map(|p| p.0).collect(),
        p_radio: probs.iter().map(|p| p.1).collect(),
    }))
}

pub fn counterfactual_branches_json(
    gamma_c: f64,
    gamma_r: f64,
    days: usize,
    seed: u64,
    patient_id: u64,
    t: usize,
    tau: usize,
) -> Result<String, String> {
    let c = config(gamma_c, gamma_r, days, seed)?;
    let p = simulate_patient(&c, patient_id).map_err(|e| e.to_string())?;
    if t >= p.trajectory.len() {
        return Err(format!("anchor {t} beyond the {}-day trajectory", p.trajectory.len()));
    }
    if tau < 2 {
        return Err("horizon must be at least 2 days".into());
    }
    let set = generate_counterfactuals(&p, t, tau, &c).map_err(|e| e.to_string())?;
    let branches = set
        .plans
        .iter()
        .enumerate()
        .map(|(i, plan)| {
            let volume = crn_core::sim::roll_plan(&p, t, plan, &c).map_err(|e| e.to_string())?;
            Ok(Branch {
                arm: if i < tau { "chemo" } else { "radio" },
                day: i % tau,
                volume,
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    let sel = select_treatment_and_timing(&set.true_outcomes, EPSILON).map_err(|e| e.to_string())?;
    let best = sel
        .arms
        .iter()
        .flat_map(|&arm| sel.timings[arm].iter().map(move |&day| arm * tau + day))
        .collect();
    Ok(to_json(&BranchView { t, tau, branches, best }))
}

fn js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

/// Observational trajectory of one simulated patient.
#[wasm_bindgen]
pub fn simulate(gamma_c: f64, gamma_r: f64, days: usize, seed: u32, patient_id: u32) -> Result<String, JsError> {
    js(simulate_patient_json(gamma_c, gamma_r, days, seed.into(), patient_id.into()))
}

/// Chemotherapy and radiotherapy assignment probabilities against the
/// recent mean tumour diameter.
#[wasm_bindgen]
pub fn treatment_probability_curve(gamma_c: f64, gamma_r: f64, points: usize) -> Result<String, JsError> {
    js(treatment_probability_curve_json(gamma_c, gamma_r, points))
}

/// The single-treatment timing plans from day `t` with their simulated
/// volume paths and the best choice(s).
#[wasm_bindgen]
pub fn counterfactual_branches(
    gamma_c: f64,
    gamma_r: f64,
    days: usize,
    seed: u32,
    patient_id: u32,
    t: usize,
    tau: usize,
) -> Result<String, JsError> {
    js(counterfactual_branches_json(gamma_c, gamma_r, days, seed.into(), patient_id.into(), t, tau))
}
