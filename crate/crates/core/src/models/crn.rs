use serde::{Deserialize, Serialize};

use super::features::{decoder_input, encoder_input, DECODER_INPUT, ENCODER_INPUT, V_MAX};
use super::seqnet::{one_hot_rows, SeqBatch, SeqNet};
use super::{check_query, ModelError, OutcomeModel};
use crate::autodiff::Tensor;
use crate::data::{Standardizer, Trajectory, Treatment};

/// Padded step-major batch of whole trajectories. With
/// `with_current_treatment`, `A(t)` is appended to each input row (the
/// plain recurrent baseline). `weights[b][t]` scales the outcome loss.
pub fn sequence_batch(
    trajectories: &[&Trajectory],
    std: &Standardizer,
    with_current_treatment: bool,
    weights: Option<&[&[f64]]>,
) -> SeqBatch {
    let n = trajectories.len();
    let steps = trajectories.iter().map(|t| t.len()).max().unwrap_or(0);
    let width = ENCODER_INPUT + if with_current_treatment { Treatment::COUNT } else { 0 };
    let mut inputs = Vec::with_capacity(steps);
    let mut current = vec![0.0; steps * n * Treatment::COUNT];
    let mut targets = vec![0.0; steps * n];
    let mut mask = vec![0.0; steps * n];
    let mut w = vec![0.0; steps * n];
    for s in 0..steps {
        let mut x = vec![0.0; n * width];
        for (b, tr) in trajectories.iter().enumerate() {
            if s >= tr.len() {
                continue;
            }
            let row = &mut x[b * width..(b + 1) * width];
            row[..ENCODER_INPUT].copy_from_slice(&encoder_input(tr, s, std));
            if with_current_treatment {
                row[ENCODER_INPUT..].copy_from_slice(&tr.treatments[s].one_hot());
            }
            let r = s * n + b;
            current[r * Treatment::COUNT..(r + 1) * Treatment::COUNT].copy_from_slice(&tr.treatments[s].one_hot());
            targets[r] = tr.outcomes[s] / V_MAX;
            mask[r] = 1.0;
            w[r] = weights.map_or(1.0, |ws| ws[b][s]);
        }
        inputs.push(Tensor::matrix(n, width, x));
    }
    SeqBatch {
        batch: n,
        steps,
        inputs,
        current: Tensor::matrix(steps * n, Treatment::COUNT, current),
        targets: Tensor::matrix(steps * n, 1, targets),
        mask: Tensor::matrix(steps * n, 1, mask),
        weights: Tensor::matrix(steps * n, 1, w),
        init: None,
    }
}

pub fn encoder_batch(trajectories: &[&Trajectory], std: &Standardizer, weights: Option<&[&[f64]]>) -> SeqBatch {
    sequence_batch(trajectories, std, false, weights)
}

/// Representation `Phi(t)` of one trajectory at every step, row `t`.
pub fn encode(encoder: &SeqNet, trajectory: &Trajectory, std: &Standardizer) -> Result<Tensor, ModelError> {
    let batch = encoder_batch(&[trajectory], std, None);
    Ok(encoder.infer(&batch)?.0)
}

/// Encoder-decoder predictions shared by CRN and RMSN: one-step plans go
/// through the encoder's outcome head, longer plans through the decoder
/// started from the encoder representation at the anchor.
pub(crate) fn predict_seq2seq(
    encoder: &SeqNet,
    decoder: Option<&SeqNet>,
    std: &Standardizer,
    trajectory: &Trajectory,
    anchors: &[usize],
    plans: &[Vec<Treatment>],
    max_horizon: usize,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let tau = check_query(trajectory, anchors, plans, max_horizon)?;
    let phi = encode(encoder, trajectory, std)?;
    let repr = phi.cols();
    let rows = anchors.len() * plans.len();
    let mut init = Vec::with_capacity(rows * repr);
    for &t in anchors {
        for _ in plans {
            init.extend_from_slice(phi.row(t));
        }
    }
    let init = Tensor::matrix(rows, repr, init);
    let flat = if tau == 1 {
        let treatments: Vec<Treatment> = anchors.iter().flat_map(|_| plans.iter().map(|p| p[0])).collect();
        encoder
            .predict_rows(&init, &one_hot_rows(&treatments))?
            .into_data()
            .into_iter()
            .map(|y| y * V_MAX)
            .collect::<Vec<_>>()
    } else {
        let decoder = decoder.ok_or(ModelError::Horizon { tau, max: 1 })?;
        let sub = trajectory.subgroup_one_hot();
        let mut first = Vec::with_capacity(rows * DECODER_INPUT);
        for &t in anchors {
            let x = decoder_input(trajectory.volumes[t], trajectory.previous_treatment(t), sub, std);
            for _ in plans {
                first.extend_from_slice(&x);
            }
        }
        let step_plans: Vec<Tensor> = (0..tau)
            .map(|s| {
                let a: Vec<Treatment> = anchors.iter().flat_map(|_| plans.iter().map(move |p| p[s])).collect();
                one_hot_rows(&a)
            })
            .collect();
        let outputs = decoder.rollout(&init, Tensor::matrix(rows, DECODER_INPUT, first), &step_plans, |s, y| {
            let mut x = Vec::with_capacity(rows * DECODER_INPUT);
            for (r, &yr) in y.iter().enumerate() {
                let plan = &plans[r % plans.len()];
                x.extend_from_slice(&decoder_input(yr * V_MAX, plan[s], sub, std));
            }
            Tensor::matrix(rows, DECODER_INPUT, x)
        })?;
        outputs[tau - 1].iter().map(|y| y * V_MAX).collect()
    };
    Ok(flat.chunks(plans.len()).map(<[f64]>::to_vec).collect())
}

/// Counterfactual recurrent network: adversarially balanced encoder plus an
/// optional decoder for multi-step plans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrnModel {
    pub encoder: SeqNet,
    pub decoder: Option<SeqNet>,
    pub standardizer: Standardizer,
    /// Horizon the decoder was trained for.
    pub tau_max: usize,
}

impl CrnModel {
    pub fn representations(&self, trajectory: &Trajectory) -> Result<Tensor, ModelError> {
        encode(&self.encoder, trajectory, &self.standardizer)
    }
}

impl OutcomeModel for CrnModel {
    fn name(&self) -> String {
        "crn".into()
    }

    fn max_horizon(&self) -> usize {
        if self.decoder.is_some() {
            self.tau_max
        } else {
            1
        }
    }

    fn predict(
        &self,
        trajectory: &Trajectory,
        anchors: &[usize],
        plans: &[Vec<Treatment>],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        predict_seq2seq(
            &self.encoder,
            self.decoder.as_ref(),
            &self.standardizer,
            trajectory,
            anchors,
            plans,
            self.max_horizon(),
        )
    }
}

/// Plain recurrent one-step predictor: LSTM over `[X(t), A(t-1), V, A(t)]`,
/// an ELU layer and an output head, no classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RnnModel {
    pub net: SeqNet,
    pub standardizer: Standardizer,
}

impl OutcomeModel for RnnModel {
    fn name(&self) -> String {
        "rnn".into()
    }

    fn max_horizon(&self) -> usize {
        1
    }

    fn predict(
        &self,
        trajectory: &Trajectory,
        anchors: &[usize],
        plans: &[Vec<Treatment>],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        check_query(trajectory, anchors, plans, 1)?;
        // states before each anchor come from the factual history; only the
        // anchor step itself is replayed with each option
        let batch = sequence_batch(&[trajectory], &self.standardizer, true, None);
        let states = self.net.infer_states(&batch)?;
        let hidden = self.net.layout.hyper.hidden;
        let rows = anchors.len() * plans.len();
        let width = ENCODER_INPUT + Treatment::COUNT;
        let (mut h, mut c, mut x) = (Vec::new(), Vec::new(), Vec::new());
        let mut current = Vec::with_capacity(rows);
        for &t in anchors {
            let base = encoder_input(trajectory, t, &self.standardizer);
            for plan in plans {
                match t {
                    0 => {
                        h.extend(std::iter::repeat_n(0.0, hidden));
                        c.extend(std::iter::repeat_n(0.0, hidden));
                    }
                    _ => {
                        h.extend_from_slice(states[t - 1].0.row(0));
                        c.extend_from_slice(states[t - 1].1.row(0));
                    }
                }
                x.extend_from_slice(&base);
                x.extend_from_slice(&plan[0].one_hot());
                current.push(plan[0]);
            }
        }
        let y = self.net.step_predict(
            &Tensor::matrix(rows, hidden, h),
            &Tensor::matrix(rows, hidden, c),
            &Tensor::matrix(rows, width, x),
            &one_hot_rows(&current),
        )?;
        Ok(y.data().chunks(plans.len()).map(|r| r.iter().map(|v| v * V_MAX).collect()).collect())
    }
}
