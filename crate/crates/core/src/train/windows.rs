use crate::autodiff::Tensor;
use crate::data::{Standardizer, Trajectory, Treatment};
use crate::models::{decoder_input, encode, one_hot_rows, ModelError, SeqBatch, SeqNet, DECODER_INPUT, V_MAX};

/// One decoder training example: the encoder representation at anchor
/// `l` followed by `tau_max` factual steps starting at `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderWindow {
    /// Index of the source trajectory in the dataset.
    pub patient: usize,
    pub anchor: usize,
    pub representation: Vec<f64>,
    /// `A(l - 1)`, the treatment fed in at the first decoder step.
    pub previous_treatment: Treatment,
    /// `V(l)`.
    pub volume: f64,
    pub treatments: Vec<Treatment>,
    /// `Y(l), ..., Y(l + tau_max - 1)`.
    pub outcomes: Vec<f64>,
    pub subgroup: [f64; 3],
}

impl DecoderWindow {
    pub fn tau(&self) -> usize {
        self.treatments.len()
    }

    fn input(&self, s: usize, std: &Standardizer) -> [f64; DECODER_INPUT] {
        match s {
            0 => decoder_input(self.volume, self.previous_treatment, self.subgroup, std),
            _ => decoder_input(self.outcomes[s - 1], self.treatments[s - 1], self.subgroup, std),
        }
    }
}

/// Encoder representations for every step of every trajectory, inference
/// mode (no dropout). Entry `i` has `trajectories[i].len()` rows.
pub fn extract_representations(
    encoder: &SeqNet,
    trajectories: &[Trajectory],
    std: &Standardizer,
) -> Result<Vec<Tensor>, ModelError> {
    use rayon::prelude::*;
    trajectories.par_iter().map(|tr| encode(encoder, tr, std)).collect()
}

/// Windows `l = 0 .. T - tau_max` of every trajectory. Trajectories with
/// fewer than `tau_max + 1` steps contribute nothing; their count is
/// returned alongside.
pub fn make_decoder_windows(
    trajectories: &[Trajectory],
    representations: &[Tensor],
    tau_max: usize,
) -> (Vec<DecoderWindow>, usize) {
    let mut windows = Vec::new();
    let mut skipped = 0;
    for (i, (tr, repr)) in trajectories.iter().zip(representations).enumerate() {
        if tr.len() <= tau_max {
            skipped += 1;
            continue;
        }
        for l in 0..tr.len() - tau_max {
            windows.push(DecoderWindow {
                patient: i,
                anchor: l,
                representation: repr.row(l).to_vec(),
                previous_treatment: tr.previous_treatment(l),
                volume: tr.volumes[l],
                treatments: tr.treatments[l..l + tau_max].to_vec(),
                outcomes: tr.outcomes[l..l + tau_max].to_vec(),
                subgroup: tr.subgroup_one_hot(),
            });
        }
    }
    if windows.is_empty() {
        log::warn!("no trajectory is longer than tau_max = {tau_max}; decoder has no windows");
    }
    (windows, skipped)
}

/// Teacher-forced decoder batch over the selected windows. `weights[b][s]`
/// scales the loss of step `s` of window `b`.
pub fn decoder_batch(windows: &[&DecoderWindow], std: &Standardizer, weights: Option<&[&[f64]]>) -> SeqBatch {
    let n = windows.len();
    let steps = windows.iter().map(|w| w.tau()).max().unwrap_or(0);
    let repr = windows.first().map_or(0, |w| w.representation.len());
    let mut init = Vec::with_capacity(n * repr);
    for w in windows {
        init.extend_from_slice(&w.representation);
    }
    let mut inputs = Vec::with_capacity(steps);
    let mut current = vec![0.0; steps * n * Treatment::COUNT];
    let mut targets = vec![0.0; steps * n];
    let mut mask = vec![0.0; steps * n];
    let mut w = vec![0.0; steps * n];
    for s in 0..steps {
        let mut x = vec![0.0; n * DECODER_INPUT];
        for (b, win) in windows.iter().enumerate() {
            if s >= win.tau() {
                continue;
            }
            x[b * DECODER_INPUT..(b + 1) * DECODER_INPUT].copy_from_slice(&win.input(s, std));
            let r = s * n + b;
            current[r * Treatment::COUNT..(r + 1) * Treatment::COUNT].copy_from_slice(&win.treatments[s].one_hot());
            targets[r] = win.outcomes[s] / V_MAX;
            mask[r] = 1.0;
            w[r] = weights.map_or(1.0, |ws| ws[b][s]);
        }
        inputs.push(Tensor::matrix(n, DECODER_INPUT, x));
    }
    SeqBatch {
        batch: n,
        steps,
        inputs,
        current: Tensor::matrix(steps * n, Treatment::COUNT, current),
        targets: Tensor::matrix(steps * n, 1, targets),
        mask: Tensor::matrix(steps * n, 1, mask),
        weights: Tensor::matrix(steps * n, 1, w),
        init: Some(Tensor::matrix(n, repr, init)),
    }
}

/// Autoregressive predictions on the factual plans of `windows`, in `V_MAX`
/// units, `[window][step]`.
pub(crate) fn rollout_windows(
    decoder: &SeqNet,
    windows: &[DecoderWindow],
    std: &Standardizer,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let n = windows.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let tau = windows[0].tau();
    let repr = windows[0].representation.len();
    let mut init = Vec::with_capacity(n * repr);
    let mut first = Vec::with_capacity(n * DECODER_INPUT);
    for w in windows {
        init.extend_from_slice(&w.representation);
        first.extend_from_slice(&w.input(0, std));
    }
    let plans: Vec<Tensor> = (0..tau)
        .map(|s| one_hot_rows(&windows.iter().map(|w| w.treatments[s]).collect::<Vec<_>>()))
        .collect();
    let out = decoder.rollout(
        &Tensor::matrix(n, repr, init),
        Tensor::matrix(n, DECODER_INPUT, first),
        &plans,
        |s, y| {
            let mut x = Vec::with_capacity(n * DECODER_INPUT);
            for (w, &yw) in windows.iter().zip(y) {
                x.extend_from_slice(&decoder_input(yw * V_MAX, w.treatments[s], w.subgroup, std));
            }
            Tensor::matrix(n, DECODER_INPUT, x)
        },
    )?;
    Ok((0..n).map(|b| (0..tau).map(|s| out[s][b]).collect()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(len: usize) -> Trajectory {
        Trajectory {
            patient_id: len as u64,
            subgroup: 1,
            volumes: (0..len).map(|t| 1.0 + t as f64).collect(),
            chemo_concentration: vec![0.0; len],
            treatments: (0..len).map(|t| Treatment::from_index(t % 4).unwrap()).collect(),
            outcomes: (0..len).map(|t| 2.0 + t as f64).collect(),
        }
    }

    fn reprs(trs: &[Trajectory]) -> Vec<Tensor> {
        trs.iter()
            .map(|t| Tensor::matrix(t.len(), 2, (0..2 * t.len()).map(|v| v as f64).collect()))
            .collect()
    }

    #[test]
    fn window_counts() {
        let trs = vec![traj(10)];
        assert_eq!(make_decoder_windows(&trs, &reprs(&trs), 5).0.len(), 5);
        assert_eq!(make_decoder_windows(&trs, &reprs(&trs), 9).0.len(), 1);
        let (w, skipped) = make_decoder_windows(&trs, &reprs(&trs), 10);
        assert!(w.is_empty());
        assert_eq!(skipped, 1);
        let trs = vec![traj(3), traj(7), traj(12), traj(2)];
        let total: usize = trs.iter().map(|t| t.len().saturating_sub(3)).sum();
        assert_eq!(make_decoder_windows(&trs, &reprs(&trs), 3).0.len(), total);
    }

    #[test]
    fn teacher_forcing_feeds_previous_outcome() {
        let trs = vec![traj(6)];
        let (w, _) = make_decoder_windows(&trs, &reprs(&trs), 3);
        let std = Standardizer {
            volume_mean: 0.0,
            volume_std: 1.0,
            conc_mean: 0.0,
            conc_std: 1.0,
        };
        let b = decoder_batch(&[&w[2]], &std, None);
        assert_eq!(b.inputs[0].get(0, 0), 3.0); // V(2)
        assert_eq!(b.inputs[1].get(0, 0), 4.0); // Y(2)
        assert_eq!(b.init.as_ref().unwrap().row(0), &[4.0, 5.0]);
        assert_eq!(b.targets.get(2, 0), 6.0 / V_MAX);
    }
}
