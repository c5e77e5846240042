use serde::{Deserialize, Serialize};

use super::windows::{decoder_batch, extract_representations, make_decoder_windows, rollout_windows, DecoderWindow};
use super::{phase, run_epochs, TrainConfig, TrainError, TrainHistory};
use crate::autodiff::Tape;
use crate::data::{Standardizer, Trajectory};
use crate::models::{
    clip_weights, sequence_batch, BatchLoss, CrnModel, LinearModel, ModelKind, MsmModel, PropensityNet, RmsnModel,
    RnnModel, SeqBatch, SeqHyper, SeqNet, TrainedModel, WeightClip, DECODER_INPUT, ENCODER_INPUT, V_MAX,
};
use crate::rng::{stream, tag};
use crate::data::Treatment;

/// Everything needed to train any model family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub encoder: SeqHyper,
    pub encoder_train: TrainConfig,
    /// The decoder's LSTM state is initialized from the encoder
    /// representation, so `decoder.hidden` is forced to `encoder.repr`.
    pub decoder: SeqHyper,
    pub decoder_train: TrainConfig,
    pub propensity_hidden: usize,
    pub propensity_dropout: f64,
    pub propensity_train: TrainConfig,
    /// Longest plan multi-step models are trained for; 1 skips the decoder.
    pub tau_max: usize,
    /// Stabilized-weight truncation for the marginal structural models.
    pub clip: Option<WeightClip>,
    /// Multiply `lambda_max` by the variance of the scaled training
    /// outcomes `Y / V_MAX`. The outcome loss is then weighted against the
    /// treatment loss as if targets were standardized.
    #[serde(default = "crate::train::default_true")]
    pub lambda_outcome_variance: bool,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            encoder: SeqHyper {
                hidden: 24,
                repr: 16,
                fc_hidden: 16,
                dropout: 0.0,
            },
            encoder_train: TrainConfig {
                epochs: 80,
                learning_rate: 0.01,
                batch_size: 32,
                ..TrainConfig::default()
            },
            decoder: SeqHyper {
                hidden: 16,
                repr: 16,
                fc_hidden: 16,
                dropout: 0.0,
            },
            decoder_train: TrainConfig {
                epochs: 40,
                learning_rate: 0.01,
                batch_size: 64,
                ..TrainConfig::default()
            },
            propensity_hidden: 8,
            propensity_dropout: 0.1,
            propensity_train: TrainConfig {
                epochs: 10,
                learning_rate: 0.01,
                batch_size: 64,
                lambda_max: 0.0,
                ..TrainConfig::default()
            },
            tau_max: 1,
            clip: Some(WeightClip::default()),
            lambda_outcome_variance: true,
        }
    }
}

impl ModelSettings {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.tau_max == 0 {
            return Err(TrainError::Config("tau_max must be >= 1".into()));
        }
        for (name, h) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            if h.hidden == 0 || h.repr == 0 || h.fc_hidden == 0 {
                return Err(TrainError::Config(format!("{name} sizes must be >= 1")));
            }
            if !(0.0..1.0).contains(&h.dropout) {
                return Err(TrainError::Config(format!("{name} dropout must be in [0, 1)")));
            }
        }
        self.encoder_train.validate()?;
        self.decoder_train.validate()?;
        self.propensity_train.validate()
    }

    /// Same settings with every seed replaced by `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.encoder_train.seed = seed;
        self.decoder_train.seed = seed;
        self.propensity_train.seed = seed;
        self
    }
}

/// Training log of one phase of a model's training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseResult {
    pub phase: String,
    pub history: TrainHistory,
}

fn phase_result(name: &str, history: TrainHistory) -> PhaseResult {
    PhaseResult {
        phase: name.into(),
        history,
    }
}

/// Normalized factual RMSE (percent of `V_MAX`) of a batch under inference.
fn factual_rmse(net: &SeqNet, batch: &SeqBatch) -> Result<f64, TrainError> {
    let (_, pred) = net.infer(batch)?;
    let mut sse = 0.0;
    for ((p, y), m) in pred.data().iter().zip(batch.targets.data()).zip(batch.mask.data()) {
        sse += m * (p - y) * (p - y);
    }
    let count = batch.mask.data().iter().sum::<f64>().max(1.0);
    Ok(100.0 * (sse / count).sqrt())
}

/// Trains a sequence network on whole trajectories (the CRN encoder, the
/// RMSN encoder or the plain recurrent baseline).
///
/// `with_current_treatment` appends `A(t)` to the inputs; `adversarial`
/// adds the treatment classifier; `weights[i][t]` scales the outcome loss.
#[allow(clippy::too_many_arguments)]
pub fn train_encoder(
    train: &[Trajectory],
    validation: &[Trajectory],
    std: &Standardizer,
    hyper: &SeqHyper,
    config: &TrainConfig,
    adversarial: bool,
    with_current_treatment: bool,
    weights: Option<&[Vec<f64>]>,
    phase_id: u64,
) -> Result<(SeqNet, TrainHistory), TrainError> {
    if train.is_empty() {
        return Err(TrainError::Empty("training set is empty".into()));
    }
    let input = ENCODER_INPUT + if with_current_treatment { Treatment::COUNT } else { 0 };
    let mut net = SeqNet::new(input, hyper.clone(), adversarial, &mut stream(config.seed, &[tag::INIT, phase_id]));
    let val_refs: Vec<&Trajectory> = validation.iter().collect();
    let val_batch = (!val_refs.is_empty()).then(|| sequence_batch(&val_refs, std, with_current_treatment, None));
    let SeqNet { layout, params } = &mut net;
    let history = run_epochs(
        params,
        train.len(),
        config,
        phase_id,
        |tape: &Tape, p, idx, lambda, rng| {
            let refs: Vec<&Trajectory> = idx.iter().map(|&i| &train[i]).collect();
            let w: Option<Vec<&[f64]>> = weights.map(|ws| idx.iter().map(|&i| ws[i].as_slice()).collect());
            let batch = sequence_batch(&refs, std, with_current_treatment, w.as_deref());
            let masks = (layout.hyper.dropout > 0.0).then(|| layout.sample_masks(batch.batch, rng));
            let out = layout.forward(tape, p, &batch, lambda, masks.as_ref())?;
            Ok(layout.loss(&out, &batch)?)
        },
        |params| match &val_batch {
            Some(b) => {
                let probe = SeqNet {
                    layout: layout.clone(),
                    params: params.clone(),
                };
                factual_rmse(&probe, b)
            }
            None => Ok(f64::NAN),
        },
    )?;
    Ok((net, history))
}

/// Trains a decoder on windows. `weights[b][s]` scales the loss of step
/// `s` of window `b`.
#[allow(clippy::too_many_arguments)]
pub fn train_decoder(
    train: &[DecoderWindow],
    validation: &[DecoderWindow],
    std: &Standardizer,
    hyper: &SeqHyper,
    config: &TrainConfig,
    adversarial: bool,
    weights: Option<&[Vec<f64>]>,
    phase_id: u64,
) -> Result<(SeqNet, TrainHistory), TrainError> {
    let Some(first) = train.first() else {
        return Err(TrainError::Empty("no decoder windows".into()));
    };
    let hyper = SeqHyper {
        hidden: first.representation.len(),
        ..hyper.clone()
    };
    let mut net = SeqNet::new(DECODER_INPUT, hyper, adversarial, &mut stream(config.seed, &[tag::INIT, phase_id]));
    let SeqNet { layout, params } = &mut net;
    let history = run_epochs(
        params,
        train.len(),
        config,
        phase_id,
        |tape: &Tape, p, idx, lambda, rng| {
            let refs: Vec<&DecoderWindow> = idx.iter().map(|&i| &train[i]).collect();
            let w: Option<Vec<&[f64]>> = weights.map(|ws| idx.iter().map(|&i| ws[i].as_slice()).collect());
            let batch = decoder_batch(&refs, std, w.as_deref());
            let masks = (layout.hyper.dropout > 0.0).then(|| layout.sample_masks(batch.batch, rng));
            let out = layout.forward(tape, p, &batch, lambda, masks.as_ref())?;
            Ok(layout.loss(&out, &batch)?)
        },
        |params| {
            if validation.is_empty() {
                return Ok(f64::NAN);
            }
            let probe = SeqNet {
                layout: layout.clone(),
                params: params.clone(),
            };
            let preds = rollout_windows(&probe, validation, std)?;
            let (mut sse, mut n) = (0.0, 0.0);
            for (w, p) in validation.iter().zip(&preds) {
                for (y, yhat) in w.outcomes.iter().zip(p) {
                    let e = y / V_MAX - yhat;
                    sse += e * e;
                    n += 1.0;
                }
            }
            Ok(100.0 * (sse / n).sqrt())
        },
    )?;
    Ok((net, history))
}

/// Trains a recurrent propensity network; the logged validation metric is
/// the mean negative log-likelihood per treatment decision.
pub fn train_propensity(
    train: &[Trajectory],
    validation: &[Trajectory],
    std: &Standardizer,
    full_history: bool,
    hidden: usize,
    dropout: f64,
    config: &TrainConfig,
) -> Result<(PropensityNet, TrainHistory), TrainError> {
    let phase_id = if full_history {
        phase::PROPENSITY_DENOMINATOR
    } else {
        phase::PROPENSITY_NUMERATOR
    };
    let mut net = PropensityNet::new(full_history, hidden, dropout, &mut stream(config.seed, &[tag::INIT, phase_id]));
    let mut params = std::mem::take(&mut net.params);
    let val_refs: Vec<&Trajectory> = validation.iter().collect();
    let val_batch = (!val_refs.is_empty()).then(|| net.batch(&val_refs, std));
    let history = run_epochs(
        &mut params,
        train.len(),
        config,
        phase_id,
        |tape: &Tape, p, idx, _lambda, rng| {
            let refs: Vec<&Trajectory> = idx.iter().map(|&i| &train[i]).collect();
            let batch = net.batch(&refs, std);
            let lp = net.log_probs(tape, p, &batch, (dropout > 0.0).then_some(rng))?;
            let loss = net.loss(lp, &batch)?;
            let value = loss.item();
            Ok(BatchLoss {
                total: loss,
                outcome: 0.0,
                treatment: value / 2.0,
            })
        },
        |params| match &val_batch {
            Some(b) => {
                let tape = Tape::new();
                let p = params.bind_frozen(&tape);
                let lp = net.log_probs::<rand_chacha::ChaCha8Rng>(&tape, &p, b, None)?;
                Ok(net.loss(lp, b)?.item() / 2.0)
            }
            None => Ok(f64::NAN),
        },
    )?;
    net.params = params;
    Ok((net, history))
}

/// Counterfactual recurrent network. With `lambda0` the gradient reversal
/// is switched off in both phases (the unbalanced ablation); everything
/// else, including random streams, is shared with the balanced model.
pub fn train_crn(
    train: &[Trajectory],
    validation: &[Trajectory],
    settings: &ModelSettings,
    lambda0: bool,
) -> Result<(CrnModel, Vec<PhaseResult>), TrainError> {
    settings.validate()?;
    let std = Standardizer::fit(train);
    let mut enc_cfg = settings.encoder_train.clone();
    let mut dec_cfg = settings.decoder_train.clone();
    if lambda0 {
        enc_cfg.lambda_max = 0.0;
        dec_cfg.lambda_max = 0.0;
    } else if settings.lambda_outcome_variance {
        let v = scaled_outcome_variance(train);
        enc_cfg.lambda_max *= v;
        dec_cfg.lambda_max *= v;
    }
    let (encoder, enc_hist) = train_encoder(
        train,
        validation,
        &std,
        &settings.encoder,
        &enc_cfg,
        true,
        false,
        None,
        phase::ENCODER,
    )?;
    let mut log = vec![phase_result("encoder", enc_hist)];
    let decoder = if settings.tau_max > 1 {
        let (train_w, val_w) = windows_for(&encoder, train, validation, &std, settings.tau_max)?;
        let (decoder, dec_hist) = train_decoder(
            &train_w,
            &val_w,
            &std,
            &settings.decoder,
            &dec_cfg,
            true,
            None,
            phase::DECODER,
        )?;
        log.push(phase_result("decoder", dec_hist));
        Some(decoder)
    } else {
        None
    };
    Ok((
        CrnModel {
            encoder,
            decoder,
            standardizer: std,
            tau_max: settings.tau_max,
        },
        log,
    ))
}

/// Variance of `Y / V_MAX` over every training step.
pub fn scaled_outcome_variance(trajectories: &[Trajectory]) -> f64 {
    let ys: Vec<f64> = trajectories.iter().flat_map(|t| t.outcomes.iter().map(|y| y / V_MAX)).collect();
    if ys.is_empty() {
        return 1.0;
    }
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n
}

fn windows_for(
    encoder: &SeqNet,
    train: &[Trajectory],
    validation: &[Trajectory],
    std: &Standardizer,
    tau_max: usize,
) -> Result<(Vec<DecoderWindow>, Vec<DecoderWindow>), TrainError> {
    let tr = extract_representations(encoder, train, std)?;
    let va = extract_representations(encoder, validation, std)?;
    let (train_w, skipped) = make_decoder_windows(train, &tr, tau_max);
    if skipped > 0 {
        log::info!("{skipped} training trajectories shorter than {} steps skipped", tau_max + 1);
    }
    Ok((train_w, make_decoder_windows(validation, &va, tau_max).0))
}

/// Plain recurrent one-step baseline.
pub fn train_rnn(
    train: &[Trajectory],
    validation: &[Trajectory],
    settings: &ModelSettings,
) -> Result<(RnnModel, Vec<PhaseResult>), TrainError> {
    settings.validate()?;
    let std = Standardizer::fit(train);
    let mut cfg = settings.encoder_train.clone();
    cfg.lambda_max = 0.0;
    let (net, hist) = train_encoder(train, validation, &std, &settings.encoder, &cfg, false, true, None, phase::RNN)?;
    Ok((RnnModel { net, standardizer: std }, vec![phase_result("rnn", hist)]))
}

fn clip_all(weights: &mut [Vec<f64>], clip: Option<WeightClip>) {
    let Some(clip) = clip else { return };
    let mut flat: Vec<f64> = weights.iter().flatten().copied().collect();
    if flat.is_empty() {
        return;
    }
    let (lo, hi) = clip_weights(&mut flat, clip);
    for w in weights.iter_mut().flatten() {
        *w = w.clamp(lo, hi);
    }
}

/// Recurrent marginal structural network: propensity networks, then an
/// IPTW-weighted encoder and decoder without adversarial heads.
pub fn train_rmsn(
    train: &[Trajectory],
    validation: &[Trajectory],
    settings: &ModelSettings,
) -> Result<(RmsnModel, Vec<PhaseResult>), TrainError> {
    settings.validate()?;
    let std = Standardizer::fit(train);
    let pcfg = &settings.propensity_train;
    let (h, d) = (settings.propensity_hidden, settings.propensity_dropout);
    let (numerator, num_hist) = train_propensity(train, validation, &std, false, h, d, pcfg)?;
    let (denominator, den_hist) = train_propensity(train, validation, &std, true, h, d, pcfg)?;
    let mut log = vec![
        phase_result("propensity_numerator", num_hist),
        phase_result("propensity_denominator", den_hist),
    ];
    let mut model = RmsnModel {
        numerator,
        denominator,
        encoder: SeqNet::new(ENCODER_INPUT, settings.encoder.clone(), false, &mut stream(0, &[])),
        decoder: None,
        standardizer: std,
        tau_max: settings.tau_max,
    };
    let factors: Vec<Vec<f64>> = train
        .iter()
        .map(|tr| model.step_factors(tr))
        .collect::<Result<_, _>>()?;
    let mut enc_weights = factors.clone();
    clip_all(&mut enc_weights, settings.clip);
    let mut cfg = settings.encoder_train.clone();
    cfg.lambda_max = 0.0;
    let (encoder, enc_hist) = train_encoder(
        train,
        validation,
        &std,
        &settings.encoder,
        &cfg,
        false,
        false,
        Some(&enc_weights),
        phase::RMSN_ENCODER,
    )?;
    log.push(phase_result("encoder", enc_hist));
    if settings.tau_max > 1 {
        let (train_w, val_w) = windows_for(&encoder, train, validation, &std, settings.tau_max)?;
        // weight of step s: product of the factors from the anchor to s,
        // truncated per step
        let mut dec_weights: Vec<Vec<f64>> = train_w
            .iter()
            .map(|w| {
                let f = &factors[w.patient][w.anchor..w.anchor + w.tau()];
                f.iter()
                    .scan(1.0, |acc, x| {
                        *acc *= x;
                        Some(*acc)
                    })
                    .collect()
            })
            .collect();
        if let Some(clip) = settings.clip {
            for s in 0..settings.tau_max {
                let mut col: Vec<f64> = dec_weights.iter().map(|w| w[s]).collect();
                if col.is_empty() {
                    break;
                }
                let (lo, hi) = clip_weights(&mut col, clip);
                for w in &mut dec_weights {
                    w[s] = w[s].clamp(lo, hi);
                }
            }
        }
        let mut dcfg = settings.decoder_train.clone();
        dcfg.lambda_max = 0.0;
        let (decoder, dec_hist) = train_decoder(
            &train_w,
            &val_w,
            &std,
            &settings.decoder,
            &dcfg,
            false,
            Some(&dec_weights),
            phase::RMSN_DECODER,
        )?;
        log.push(phase_result("decoder", dec_hist));
        model.decoder = Some(decoder);
    }
    model.encoder = encoder;
    Ok((model, log))
}

/// Trains any model family on `train`, using `validation` for best-epoch
/// selection.
pub fn fit_model(
    kind: ModelKind,
    train: &[Trajectory],
    validation: &[Trajectory],
    settings: &ModelSettings,
) -> Result<(TrainedModel, Vec<PhaseResult>), TrainError> {
    Ok(match kind {
        ModelKind::Crn => {
            let (m, log) = train_crn(train, validation, settings, false)?;
            (TrainedModel::Crn(m), log)
        }
        ModelKind::CrnLambda0 => {
            let (m, log) = train_crn(train, validation, settings, true)?;
            (TrainedModel::CrnLambda0(m), log)
        }
        ModelKind::Rnn => {
            let (m, log) = train_rnn(train, validation, settings)?;
            (TrainedModel::Rnn(m), log)
        }
        ModelKind::Linear => (TrainedModel::Linear(LinearModel::fit(train, settings.tau_max)?), Vec::new()),
        ModelKind::Msm => (
            TrainedModel::Msm(MsmModel::fit(train, settings.tau_max, settings.clip)?),
            Vec::new(),
        ),
        ModelKind::Rmsn => {
            let (m, log) = train_rmsn(train, validation, settings)?;
            (TrainedModel::Rmsn(m), log)
        }
    })
}
