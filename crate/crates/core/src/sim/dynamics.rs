use std::f64::consts::PI;

use super::priors::PatientParams;
use super::SimError;
use crate::autodiff::sigmoid;

/// Smallest volume a tumour can shrink to (cm³).
pub const VOLUME_FLOOR: f64 = 1e-3;

/// One day of tumour growth under chemo concentration `c` (mg/m³) and
/// radiation dose `d` (Gy), with additive noise `e` on the growth factor.
pub fn step_volume(v: f64, c: f64, d: f64, params: &PatientParams, e: f64) -> Result<f64, SimError> {
    if !(v > 0.0) {
        return Err(SimError::NonPositiveVolume(v));
    }
    let growth = params.rho * (params.carrying_capacity / v).ln();
    let chemo = params.beta_c * c;
    let radio = params.alpha_r * d + params.beta_r * d * d;
    let next = (1.0 + growth - chemo - radio + e) * v;
    Ok(next.max(VOLUME_FLOOR))
}

/// Concentration after one day of decay (half-life one day), plus a fresh
/// dose when given.
pub fn update_chemo_concentration(c_prev: f64, dose: Option<f64>) -> f64 {
    dose.unwrap_or(0.0) + c_prev / 2.0
}

/// Diameter of a sphere with volume `v`.
pub fn diameter_from_volume(v: f64) -> f64 {
    2.0 * (3.0 * v / (4.0 * PI)).cbrt()
}

pub fn volume_from_diameter(d: f64) -> f64 {
    PI / 6.0 * d * d * d
}

/// Assignment probability `sigmoid(gamma / d_max * (mean_diameter - delta))`.
pub fn assignment_probability(mean_diameter: f64, gamma: f64, d_max: f64, delta: f64) -> f64 {
    sigmoid(gamma / d_max * (mean_diameter - delta))
}

/// Mean of the last `window` diameters (or all of them when fewer).
pub fn mean_recent(diameters: &[f64], window: usize) -> f64 {
    let n = diameters.len().min(window.max(1));
    if n == 0 {
        return 0.0;
    }
    diameters[diameters.len() - n..].iter().sum::<f64>() / n as f64
}
