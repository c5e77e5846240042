//! Network input rows built from trajectories.

use crate::data::{Standardizer, Trajectory, Treatment};

/// Outcomes are divided by this volume (cm³) before entering any loss.
pub const V_MAX: f64 = 1150.0;

/// `[z V(t), z C(t-1), A(t-1) one-hot, subgroup one-hot]`.
pub const ENCODER_INPUT: usize = 2 + Treatment::COUNT + 3;

/// `[z previous outcome, previous treatment one-hot, subgroup one-hot]`.
pub const DECODER_INPUT: usize = 1 + Treatment::COUNT + 3;

pub fn encoder_input(tr: &Trajectory, t: usize, std: &Standardizer) -> [f64; ENCODER_INPUT] {
    let mut row = [0.0; ENCODER_INPUT];
    row[0] = std.volume(tr.volumes[t]);
    row[1] = std.concentration(tr.prior_concentration(t));
    row[2..6].copy_from_slice(&tr.previous_treatment(t).one_hot());
    row[6..9].copy_from_slice(&tr.subgroup_one_hot());
    row
}

pub fn decoder_input(
    previous_outcome: f64,
    previous_treatment: Treatment,
    subgroup_one_hot: [f64; 3],
    std: &Standardizer,
) -> [f64; DECODER_INPUT] {
    let mut row = [0.0; DECODER_INPUT];
    row[0] = std.volume(previous_outcome);
    row[1..5].copy_from_slice(&previous_treatment.one_hot());
    row[5..8].copy_from_slice(&subgroup_one_hot);
    row
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_uses_no_treatment() {
        let tr = Trajectory {
            patient_id: 1,
            subgroup: 3,
            volumes: vec![2.0, 3.0],
            chemo_concentration: vec![5.0, 2.5],
            treatments: vec![Treatment::Both, Treatment::None],
            outcomes: vec![3.0, 4.0],
        };
        let std = Standardizer {
            volume_mean: 0.0,
            volume_std: 1.0,
            conc_mean: 0.0,
            conc_std: 1.0,
        };
        assert_eq!(encoder_input(&tr, 0, &std), [2.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(encoder_input(&tr, 1, &std), [3.0, 5.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    }
}
