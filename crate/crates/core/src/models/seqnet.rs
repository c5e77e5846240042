//! Recurrent network with a representation head, an outcome head and an
//! optional adversarial treatment classifier. The CRN encoder and decoder,
//! and the RMSN encoder and decoder (classifier removed), are all instances.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Dense, Lstm, Mlp};
use crate::autodiff::{variational_dropout_mask, AutodiffError, Checkpoint, ParamSet, Tape, Tensor, Var};
use crate::data::Treatment;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqHyper {
    /// LSTM state size.
    pub hidden: usize,
    /// Size of the representation `Phi`.
    pub repr: usize,
    /// Hidden width of the outcome and treatment heads.
    pub fc_hidden: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqLayout {
    pub hyper: SeqHyper,
    pub input: usize,
    lstm: Lstm,
    phi: Dense,
    outcome: Mlp,
    classifier: Option<Mlp>,
}

/// A padded minibatch of sequences, stored step-major: row `s * batch + b`
/// of every stacked tensor belongs to sequence `b` at step `s`.
#[derive(Clone, Debug)]
pub struct SeqBatch {
    pub batch: usize,
    pub steps: usize,
    /// Per step, `[batch, input]`.
    pub inputs: Vec<Tensor>,
    /// Treatment applied at each step, one-hot `[steps * batch, 4]`.
    pub current: Tensor,
    /// Outcome after each step divided by `V_MAX`, `[steps * batch, 1]`.
    pub targets: Tensor,
    /// 1 for real steps, 0 for padding, `[steps * batch, 1]`.
    pub mask: Tensor,
    /// Per-step sample weights for the outcome loss (0 on padding).
    pub weights: Tensor,
    /// Initial `h = c`, `[batch, hidden]`; zeros when absent.
    pub init: Option<Tensor>,
}

pub struct SeqOutput<'t> {
    /// Stacked representations `[steps * batch, repr]`.
    pub phi: Var<'t>,
    pub outcome: Var<'t>,
    pub logits: Option<Var<'t>>,
}

pub struct BatchLoss<'t> {
    pub total: Var<'t>,
    pub outcome: f64,
    pub treatment: f64,
}

/// Dropout masks of one sequence batch, reused at every step.
pub struct DropoutMasks {
    input: Tensor,
    recurrent: Tensor,
}

impl SeqLayout {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        input: usize,
        hyper: SeqHyper,
        adversarial: bool,
        rng: &mut R,
    ) -> Self {
        let lstm = Lstm::new(params, "lstm", input, hyper.hidden, rng);
        let phi = Dense::new(params, "phi", hyper.hidden, hyper.repr, rng);
        let outcome = Mlp::new(params, "gy", hyper.repr + Treatment::COUNT, hyper.fc_hidden, 1, rng);
        let classifier =
            adversarial.then(|| Mlp::new(params, "ga", hyper.repr, hyper.fc_hidden, Treatment::COUNT, rng));
        Self {
            hyper,
            input,
            lstm,
            phi,
            outcome,
            classifier,
        }
    }

    pub fn has_classifier(&self) -> bool {
        self.classifier.is_some()
    }

    pub fn num_params(&self) -> usize {
        self.lstm.num_params()
            + self.phi.num_params()
            + self.outcome.num_params()
            + self.classifier.as_ref().map_or(0, Mlp::num_params)
    }

    pub fn sample_masks<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> DropoutMasks {
        DropoutMasks {
            input: variational_dropout_mask(batch, self.input, self.hyper.dropout, rng),
            recurrent: variational_dropout_mask(batch, self.hyper.hidden, self.hyper.dropout, rng),
        }
    }

    pub fn step<'t>(
        &self,
        p: &[Var<'t>],
        x: Var<'t>,
        h: Var<'t>,
        c: Var<'t>,
        masks: Option<&DropoutMasks>,
    ) -> Result<(Var<'t>, Var<'t>), AutodiffError> {
        let tape = x.tape();
        let (x, h_in) = match masks {
            Some(m) => (
                x.mul(tape.constant(m.input.clone()))?,
                h.mul(tape.constant(m.recurrent.clone()))?,
            ),
            None => (x, h),
        };
        self.lstm.step(p, x, h_in, c)
    }

    pub fn representation<'t>(&self, p: &[Var<'t>], h: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        Ok(self.phi.forward(p, h)?.elu())
    }

    /// Outcome head on `[Phi, treatment one-hot]`.
    pub fn predict<'t>(&self, p: &[Var<'t>], phi: Var<'t>, treatment: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.outcome.forward(p, Var::concat(&[phi, treatment])?)
    }

    /// Treatment logits; `Phi` passes through gradient reversal with `lambda`.
    pub fn classify<'t>(&self, p: &[Var<'t>], phi: Var<'t>, lambda: f64) -> Result<Option<Var<'t>>, AutodiffError> {
        match &self.classifier {
            Some(ga) => Ok(Some(ga.forward(p, phi.reverse_grad(lambda))?)),
            None => Ok(None),
        }
    }

    /// Teacher-forced pass over a whole batch.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        p: &[Var<'t>],
        batch: &SeqBatch,
        lambda: f64,
        masks: Option<&DropoutMasks>,
    ) -> Result<SeqOutput<'t>, AutodiffError> {
        let zeros = Tensor::zeros(&[batch.batch, self.hyper.hidden]);
        let init = batch.init.clone().unwrap_or(zeros);
        let mut h = tape.constant(init.clone());
        let mut c = tape.constant(init);
        let mut hs = Vec::with_capacity(batch.steps);
        for x in &batch.inputs {
            let x = tape.constant(x.clone());
            (h, c) = self.step(p, x, h, c, masks)?;
            hs.push(h);
        }
        let h_all = Var::concat_rows(&hs)?;
        let phi = self.representation(p, h_all)?;
        let outcome = self.predict(p, phi, tape.constant(batch.current.clone()))?;
        let logits = self.classify(p, phi, lambda)?;
        Ok(SeqOutput { phi, outcome, logits })
    }

    /// Mean weighted squared error over real steps plus, when the network
    /// has a classifier, the mean treatment cross-entropy.
    pub fn loss<'t>(&self, out: &SeqOutput<'t>, batch: &SeqBatch) -> Result<BatchLoss<'t>, AutodiffError> {
        let tape = out.outcome.tape();
        let count = batch.mask.data().iter().sum::<f64>().max(1.0);
        let err = out.outcome.sub(tape.constant(batch.targets.clone()))?;
        let outcome = err.square().masked_sum(&batch.weights)?.scale(1.0 / count);
        let Some(logits) = out.logits else {
            let value = outcome.item();
            return Ok(BatchLoss {
                total: outcome,
                outcome: value,
                treatment: 0.0,
            });
        };
        let mut target = batch.current.clone();
        for (row, m) in target.data_mut().chunks_mut(Treatment::COUNT).zip(batch.mask.data()) {
            for v in row {
                *v *= m;
            }
        }
        let ce = logits.log_softmax().masked_sum(&target)?.scale(-1.0 / count);
        let (o, t) = (outcome.item(), ce.item());
        Ok(BatchLoss {
            total: outcome.add(ce)?,
            outcome: o,
            treatment: t,
        })
    }
}

/// Layout plus weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "SeqNetState", try_from = "SeqNetState")]
pub struct SeqNet {
    pub layout: SeqLayout,
    pub params: ParamSet,
}

#[derive(Serialize, Deserialize)]
struct SeqNetState {
    input: usize,
    hyper: SeqHyper,
    adversarial: bool,
    params: Checkpoint,
}

impl From<SeqNet> for SeqNetState {
    fn from(net: SeqNet) -> Self {
        Self {
            input: net.layout.input,
            adversarial: net.layout.has_classifier(),
            params: net.params.to_checkpoint(),
            hyper: net.layout.hyper,
        }
    }
}

impl TryFrom<SeqNetState> for SeqNet {
    type Error = AutodiffError;

    fn try_from(state: SeqNetState) -> Result<Self, Self::Error> {
        // rebuild the layout so parameter order matches, then overwrite
        let mut net = SeqNet::new(state.input, state.hyper, state.adversarial, &mut crate::rng::stream(0, &[]));
        net.params.load_checkpoint(&state.params)?;
        Ok(net)
    }
}

impl SeqNet {
    pub fn new<R: Rng + ?Sized>(input: usize, hyper: SeqHyper, adversarial: bool, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let layout = SeqLayout::new(&mut params, input, hyper, adversarial, rng);
        Self { layout, params }
    }

    /// Inference pass (no dropout) returning `[steps * batch, repr]`
    /// representations and `[steps * batch, 1]` predictions.
    pub fn infer(&self, batch: &SeqBatch) -> Result<(Tensor, Tensor), AutodiffError> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let out = self.layout.forward(&tape, &p, batch, 0.0, None)?;
        Ok((out.phi.value(), out.outcome.value()))
    }

    /// LSTM state `(h, c)` after every step of an inference pass.
    pub fn infer_states(&self, batch: &SeqBatch) -> Result<Vec<(Tensor, Tensor)>, AutodiffError> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let init = batch
            .init
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&[batch.batch, self.layout.hyper.hidden]));
        let mut h = tape.constant(init.clone());
        let mut c = tape.constant(init);
        let mut out = Vec::with_capacity(batch.steps);
        for x in &batch.inputs {
            (h, c) = self.layout.step(&p, tape.constant(x.clone()), h, c, None)?;
            out.push((h.value(), c.value()));
        }
        Ok(out)
    }

    /// One inference step from explicit states, returning predictions.
    pub fn step_predict(&self, h: &Tensor, c: &Tensor, x: &Tensor, current: &Tensor) -> Result<Tensor, AutodiffError> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let (h, _) = self
            .layout
            .step(&p, tape.constant(x.clone()), tape.constant(h.clone()), tape.constant(c.clone()), None)?;
        let phi = self.layout.representation(&p, h)?;
        Ok(self.layout.predict(&p, phi, tape.constant(current.clone()))?.value())
    }

    /// Outcome head applied to precomputed representation rows.
    pub fn predict_rows(&self, phi: &Tensor, treatments: &Tensor) -> Result<Tensor, AutodiffError> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let y = self
            .layout
            .predict(&p, tape.constant(phi.clone()), tape.constant(treatments.clone()))?;
        Ok(y.value())
    }

    /// Treatment probabilities from representation rows.
    pub fn classify_rows(&self, phi: &Tensor) -> Result<Option<Tensor>, AutodiffError> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        Ok(self
            .layout
            .classify(&p, tape.constant(phi.clone()), 0.0)?
            .map(|l| l.softmax().value()))
    }

    /// Autoregressive rollout: `init` is `[n, hidden]`; `first_inputs` the
    /// step-one inputs `[n, input]`; `plans[s]` the one-hot treatments of
    /// step `s`. `next_input(s, predictions)` builds the inputs of step
    /// `s + 1` from the predictions of step `s` (in `V_MAX` units).
    /// Returns the predictions of every step.
    pub fn rollout(
        &self,
        init: &Tensor,
        first_inputs: Tensor,
        plans: &[Tensor],
        mut next_input: impl FnMut(usize, &[f64]) -> Tensor,
    ) -> Result<Vec<Vec<f64>>, AutodiffError> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let mut h = tape.constant(init.clone());
        let mut c = tape.constant(init.clone());
        let mut x = first_inputs;
        let mut out = Vec::with_capacity(plans.len());
        for (s, plan) in plans.iter().enumerate() {
            (h, c) = self.layout.step(&p, tape.constant(x), h, c, None)?;
            let phi = self.layout.representation(&p, h)?;
            let y = self.layout.predict(&p, phi, tape.constant(plan.clone()))?.value().into_data();
            x = next_input(s, &y);
            out.push(y);
        }
        Ok(out)
    }
}

/// Row-stacked one-hot encoding of a treatment list.
pub fn one_hot_rows(treatments: &[Treatment]) -> Tensor {
    let mut data = Vec::with_capacity(treatments.len() * Treatment::COUNT);
    for a in treatments {
        data.extend_from_slice(&a.one_hot());
    }
    Tensor::matrix(treatments.len(), Treatment::COUNT, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn hyper() -> SeqHyper {
        SeqHyper {
            hidden: 6,
            repr: 4,
            fc_hidden: 5,
            dropout: 0.2,
        }
    }

    fn batch(steps: usize) -> SeqBatch {
        let mut rng = stream(1, &[]);
        SeqBatch {
            batch: 2,
            steps,
            inputs: (0..steps)
                .map(|_| Tensor::matrix(2, 3, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()))
                .collect(),
            current: one_hot_rows(&vec![Treatment::Chemo; 2 * steps]),
            targets: Tensor::full(&[2 * steps, 1], 0.3),
            mask: Tensor::ones(&[2 * steps, 1]),
            weights: Tensor::ones(&[2 * steps, 1]),
            init: None,
        }
    }

    #[test]
    fn one_step_gives_one_triple() {
        let net = SeqNet::new(3, hyper(), true, &mut stream(2, &[]));
        let tape = Tape::new();
        let p = net.params.bind(&tape);
        let out = net.layout.forward(&tape, &p, &batch(1), 1.0, None).unwrap();
        assert_eq!(out.phi.shape(), vec![2, 4]);
        assert_eq!(out.outcome.shape(), vec![2, 1]);
        let probs = out.logits.unwrap().softmax().value();
        for r in 0..2 {
            let row = probs.row(r);
            assert!(row.iter().all(|&q| q > 0.0 && q < 1.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn inference_is_deterministic() {
        let net = SeqNet::new(3, hyper(), true, &mut stream(2, &[]));
        let b = batch(4);
        assert_eq!(net.infer(&b).unwrap(), net.infer(&b).unwrap());
    }

    #[test]
    fn classifier_gradient_vanishes_at_zero_lambda() {
        let net = SeqNet::new(3, hyper(), true, &mut stream(2, &[]));
        let b = batch(3);
        let tape = Tape::new();
        let p = net.params.bind(&tape);
        let out = net.layout.forward(&tape, &p, &b, 0.0, None).unwrap();
        let loss = out.logits.unwrap().log_softmax().masked_sum(&b.current).unwrap();
        let g = tape.backward(loss).unwrap();
        let lstm_wx = net.params.position("lstm.wx").unwrap();
        assert!(g.get_or_zeros(p[lstm_wx]).data().iter().all(|v| *v == 0.0));
        let ga = net.params.position("ga.1.w").unwrap();
        assert!(g.get_or_zeros(p[ga]).squared_norm() > 0.0);
    }

    #[test]
    fn padding_does_not_change_gradients() {
        let net = SeqNet::new(3, hyper(), true, &mut stream(4, &[]));
        let grads = |b: &SeqBatch| {
            let tape = Tape::new();
            let p = net.params.bind(&tape);
            let out = net.layout.forward(&tape, &p, b, 0.7, None).unwrap();
            let loss = net.layout.loss(&out, b).unwrap();
            let g = tape.backward(loss.total).unwrap();
            ParamSet::collect_grads(&g, &p)
        };
        let short = batch(3);
        let mut long = batch(3);
        long.steps = 5;
        long.inputs.push(Tensor::full(&[2, 3], 9.0));
        long.inputs.push(Tensor::full(&[2, 3], -9.0));
        let pad = |t: &Tensor, v: f64, cols: usize| {
            let mut d = t.data().to_vec();
            d.extend(std::iter::repeat_n(v, 4 * cols));
            Tensor::matrix(10, cols, d)
        };
        long.current = pad(&short.current, 0.25, 4);
        long.targets = pad(&short.targets, 5.0, 1);
        long.mask = pad(&short.mask, 0.0, 1);
        long.weights = pad(&short.weights, 0.0, 1);
        for (a, b) in grads(&short).iter().zip(grads(&long)) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn json_round_trip_preserves_outputs() {
        let net = SeqNet::new(3, hyper(), true, &mut stream(9, &[]));
        let json = serde_json::to_string(&net).unwrap();
        let back: SeqNet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.infer(&batch(2)).unwrap(), net.infer(&batch(2)).unwrap());
    }

    #[test]
    fn rmsn_variant_has_no_classifier() {
        let with = SeqNet::new(3, hyper(), true, &mut stream(2, &[]));
        let without = SeqNet::new(3, hyper(), false, &mut stream(2, &[]));
        assert!(without.layout.num_params() < with.layout.num_params());
        assert_eq!(without.params.num_scalars(), without.layout.num_params());
    }
}
