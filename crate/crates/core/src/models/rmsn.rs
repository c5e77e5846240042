use rand::Rng;
use serde::{Deserialize, Serialize};

use super::crn::predict_seq2seq;
use super::layers::{Dense, Lstm};
use super::{ModelError, OutcomeModel, SeqNet};
use crate::autodiff::{variational_dropout_mask, AutodiffError, Checkpoint, ParamSet, Tape, Tensor, Var};
use crate::data::{Standardizer, Trajectory, Treatment};

/// Recurrent propensity model: an LSTM whose output at `t` gives the
/// probabilities of chemotherapy and of radiotherapy on day `t`.
///
/// The numerator model only sees the previous treatment at each step; the
/// denominator model also sees the covariates and the subgroup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "PropensityState", try_from = "PropensityState")]
pub struct PropensityNet {
    pub full_history: bool,
    pub hidden: usize,
    pub dropout: f64,
    lstm: Lstm,
    out: Dense,
    pub params: ParamSet,
}

#[derive(Serialize, Deserialize)]
struct PropensityState {
    full_history: bool,
    hidden: usize,
    dropout: f64,
    params: Checkpoint,
}

impl From<PropensityNet> for PropensityState {
    fn from(n: PropensityNet) -> Self {
        Self {
            full_history: n.full_history,
            hidden: n.hidden,
            dropout: n.dropout,
            params: n.params.to_checkpoint(),
        }
    }
}

impl TryFrom<PropensityState> for PropensityNet {
    type Error = AutodiffError;

    fn try_from(s: PropensityState) -> Result<Self, Self::Error> {
        let mut net = PropensityNet::new(s.full_history, s.hidden, s.dropout, &mut crate::rng::stream(0, &[]));
        net.params.load_checkpoint(&s.params)?;
        Ok(net)
    }
}

/// Padded step-major batch for propensity training.
pub struct PropensityBatch {
    pub batch: usize,
    pub inputs: Vec<Tensor>,
    /// `[1 - chemo, chemo, 1 - radio, radio]` per row, zero on padding.
    pub labels: Tensor,
    pub count: f64,
}

impl PropensityNet {
    pub fn new<R: Rng + ?Sized>(full_history: bool, hidden: usize, dropout: f64, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let lstm = Lstm::new(&mut params, "lstm", Self::input_size(full_history), hidden, rng);
        let out = Dense::new(&mut params, "out", hidden, 4, rng);
        Self {
            full_history,
            hidden,
            dropout,
            lstm,
            out,
            params,
        }
    }

    pub fn input_size(full_history: bool) -> usize {
        if full_history {
            2 + 2 + 3
        } else {
            2
        }
    }

    fn input_row(&self, tr: &Trajectory, t: usize, std: &Standardizer) -> Vec<f64> {
        let mut row = tr.previous_treatment(t).flags().to_vec();
        if self.full_history {
            row.push(std.volume(tr.volumes[t]));
            row.push(std.concentration(tr.prior_concentration(t)));
            row.extend_from_slice(&tr.subgroup_one_hot());
        }
        row
    }

    pub fn batch(&self, trajectories: &[&Trajectory], std: &Standardizer) -> PropensityBatch {
        let n = trajectories.len();
        let steps = trajectories.iter().map(|t| t.len()).max().unwrap_or(0);
        let width = Self::input_size(self.full_history);
        let mut inputs = Vec::with_capacity(steps);
        let mut labels = vec![0.0; steps * n * 4];
        let mut count = 0.0;
        for s in 0..steps {
            let mut x = vec![0.0; n * width];
            for (b, tr) in trajectories.iter().enumerate() {
                if s < tr.len() {
                    x[b * width..(b + 1) * width].copy_from_slice(&self.input_row(tr, s, std));
                    let [c, r] = tr.treatments[s].flags();
                    let row = (s * n + b) * 4;
                    labels[row..row + 4].copy_from_slice(&[1.0 - c, c, 1.0 - r, r]);
                    count += 1.0;
                }
            }
            inputs.push(Tensor::matrix(n, width, x));
        }
        PropensityBatch {
            batch: n,
            inputs,
            labels: Tensor::matrix(steps * n, 4, labels),
            count,
        }
    }

    /// Log-probabilities `[steps * batch, 4]` (two 2-way softmaxes).
    pub fn log_probs<'t, R: Rng + ?Sized>(
        &self,
        tape: &'t Tape,
        p: &[Var<'t>],
        batch: &PropensityBatch,
        dropout_rng: Option<&mut R>,
    ) -> Result<Var<'t>, AutodiffError> {
        let width = Self::input_size(self.full_history);
        let masks = dropout_rng.map(|rng| {
            (
                tape.constant(variational_dropout_mask(batch.batch, width, self.dropout, rng)),
                tape.constant(variational_dropout_mask(batch.batch, self.hidden, self.dropout, rng)),
            )
        });
        let mut h = tape.constant(Tensor::zeros(&[batch.batch, self.hidden]));
        let mut c = h;
        let mut hs = Vec::with_capacity(batch.inputs.len());
        for x in &batch.inputs {
            let mut x = tape.constant(x.clone());
            let mut h_in = h;
            if let Some((mx, mh)) = masks {
                x = x.mul(mx)?;
                h_in = h.mul(mh)?;
            }
            (h, c) = self.lstm.step(p, x, h_in, c)?;
            hs.push(h);
        }
        let logits = self.out.forward(p, Var::concat_rows(&hs)?)?;
        Var::concat(&[
            logits.slice_cols(0, 2)?.log_softmax(),
            logits.slice_cols(2, 4)?.log_softmax(),
        ])
    }

    pub fn loss<'t>(&self, log_probs: Var<'t>, batch: &PropensityBatch) -> Result<Var<'t>, AutodiffError> {
        Ok(log_probs.masked_sum(&batch.labels)?.scale(-1.0 / batch.count.max(1.0)))
    }

    /// `[P(chemo), P(radio)]` for every day of a trajectory.
    pub fn probabilities(&self, tr: &Trajectory, std: &Standardizer) -> Result<Vec<[f64; 2]>, AutodiffError> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let batch = self.batch(&[tr], std);
        let lp = self.log_probs::<rand_chacha::ChaCha8Rng>(&tape, &p, &batch, None)?.value();
        Ok((0..tr.len()).map(|t| [lp.get(t, 1).exp(), lp.get(t, 3).exp()]).collect())
    }
}

/// Per-day stabilized weight factors from numerator and denominator
/// propensities.
pub fn propensity_factors(tr: &Trajectory, numerator: &[[f64; 2]], denominator: &[[f64; 2]]) -> Vec<f64> {
    (0..tr.len())
        .map(|t| {
            let flags = tr.treatments[t].flags();
            (0..2)
                .map(|k| {
                    let (pn, pd) = (numerator[t][k], denominator[t][k]);
                    if flags[k] == 1.0 {
                        pn / pd
                    } else {
                        (1.0 - pn) / (1.0 - pd)
                    }
                })
                .product()
        })
        .collect()
}

/// Recurrent marginal structural network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsnModel {
    pub numerator: PropensityNet,
    pub denominator: PropensityNet,
    pub encoder: SeqNet,
    pub decoder: Option<SeqNet>,
    pub standardizer: Standardizer,
    pub tau_max: usize,
}

impl RmsnModel {
    pub fn step_factors(&self, tr: &Trajectory) -> Result<Vec<f64>, ModelError> {
        let num = self.numerator.probabilities(tr, &self.standardizer)?;
        let den = self.denominator.probabilities(tr, &self.standardizer)?;
        Ok(propensity_factors(tr, &num, &den))
    }
}

impl OutcomeModel for RmsnModel {
    fn name(&self) -> String {
        "rmsn".into()
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
