//! Training: the shared minibatch loop, the encoder and decoder phases of
//! the counterfactual recurrent network, the baselines, and random
//! hyperparameter search.
//!
//! Every phase runs the same loop: shuffle, build a padded batch, record
//! the forward pass on a fresh tape, back-propagate the combined loss, take
//! an Adam step. Validation RMSE on factual outcomes is computed after each
//! epoch and the best epoch's weights are kept.

mod fit;
mod search;
mod windows;

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fit::{
    fit_model, scaled_outcome_variance, train_crn, train_decoder, train_encoder, train_propensity, train_rmsn, train_rnn, ModelSettings,
    PhaseResult,
};
pub use search::{random_search, write_leaderboard, SearchSpace, SearchTarget, Trial};
pub use windows::{decoder_batch, extract_representations, make_decoder_windows, DecoderWindow};

use crate::autodiff::{Adam, AdamConfig, AutodiffError, ParamSet, Tape, Var};
use crate::models::{BatchLoss, ModelError};
use crate::rng::{stream, tag};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Step {
        epoch: usize,
        batch: usize,
        source: AutodiffError,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("nothing to train on: {0}")]
    Empty(String),
    #[error("invalid training config: {0}")]
    Config(String),
}

/// How the gradient-reversal coefficient evolves over epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSchedule {
    /// `progress = epoch / epochs`, rising from about 0 to about 1.
    Normalized,
    /// `progress = epoch` (1-based), which saturates after the first epoch.
    Literal,
}

/// `2 / (1 + exp(-10 p)) - 1`.
pub fn lambda_schedule(progress: f64) -> f64 {
    2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0
}

fn default_epochs() -> usize {
    100
}
fn default_lr() -> f64 {
    0.01
}
fn default_batch() -> usize {
    64
}
fn default_lambda_max() -> f64 {
    1.0
}
fn default_schedule() -> LambdaSchedule {
    LambdaSchedule::Normalized
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Scale of the gradient-reversal schedule; 0 disables balancing.
    #[serde(default = "default_lambda_max")]
    pub lambda_max: f64,
    #[serde(default = "default_schedule")]
    pub lambda_schedule: LambdaSchedule,
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Keep the weights of the epoch with the lowest validation RMSE.
    #[serde(default = "crate::train::default_true")]
    pub keep_best: bool,
}

pub(crate) fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            learning_rate: default_lr(),
            batch_size: default_batch(),
            lambda_max: default_lambda_max(),
            lambda_schedule: default_schedule(),
            max_grad_norm: None,
            seed: 0,
            keep_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if !(self.lambda_max >= 0.0) {
            return Err(TrainError::Config("lambda_max must be >= 0".into()));
        }
        Ok(())
    }

    /// Gradient-reversal coefficient for a 1-based epoch.
    pub fn lambda(&self, epoch: usize) -> f64 {
        let progress = match self.lambda_schedule {
            LambdaSchedule::Normalized => epoch as f64 / self.epochs as f64,
            LambdaSchedule::Literal => epoch as f64,
        };
        self.lambda_max * lambda_schedule(progress)
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub outcome_loss: f64,
    pub treatment_loss: f64,
    pub lambda: f64,
    pub validation_rmse: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best_validation_rmse(&self) -> f64 {
        self.epochs
            .iter()
            .find(|e| e.epoch == self.best_epoch)
            .map_or(f64::NAN, |e| e.validation_rmse)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.epochs {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Phase identifiers, so each phase draws from its own random streams.
pub mod phase {
    pub const ENCODER: u64 = 0;
    pub const DECODER: u64 = 1;
    pub const RNN: u64 = 2;
    pub const PROPENSITY_NUMERATOR: u64 = 3;
    pub const PROPENSITY_DENOMINATOR: u64 = 4;
    pub const RMSN_ENCODER: u64 = 5;
    pub const RMSN_DECODER: u64 = 6;
    pub const DIAGNOSTIC: u64 = 7;
}

/// The shared minibatch loop.
///
/// `batch_loss(tape, params, example indices, lambda, rng)` records one
/// minibatch and returns its loss; `validate(params)` returns the
/// validation RMSE after an epoch.
pub fn run_epochs<B, V>(
    params: &mut ParamSet,
    n_examples: usize,
    config: &TrainConfig,
    phase_id: u64,
    mut batch_loss: B,
    mut validate: V,
) -> Result<TrainHistory, TrainError>
where
    B: for<'t> FnMut(&'t Tape, &[Var<'t>], &[usize], f64, &mut rand_chacha::ChaCha8Rng) -> Result<BatchLoss<'t>, TrainError>,
    V: FnMut(&ParamSet) -> Result<f64, TrainError>,
{
    config.validate()?;
    if n_examples == 0 {
        return Err(TrainError::Empty("no training examples".into()));
    }
    let mut adam = Adam::new(
        params,
        AdamConfig {
            max_grad_norm: config.max_grad_norm,
            ..AdamConfig::with_learning_rate(config.learning_rate)
        },
    );
    let mut order: Vec<usize> = (0..n_examples).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ParamSet)> = None;
    for epoch in 1..=config.epochs {
        let lambda = config.lambda(epoch);
        order.shuffle(&mut stream(config.seed, &[tag::SHUFFLE, phase_id, epoch as u64]));
        let (mut sum_outcome, mut sum_treatment, mut n_batches) = (0.0, 0.0, 0.0);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut rng = stream(config.seed, &[tag::DROPOUT, phase_id, epoch as u64, b as u64]);
            let tape = Tape::new();
            let vars = params.bind(&tape);
            let loss = batch_loss(&tape, &vars, chunk, lambda, &mut rng)?;
            if !loss.total.item().is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
            let grads = tape
                .backward(loss.total)
                .map_err(|source| TrainError::Step { epoch, batch: b, source })?;
            let grads = ParamSet::collect_grads(&grads, &vars);
            drop(vars);
            adam.step(params, &grads)
                .map_err(|source| TrainError::Step { epoch, batch: b, source })?;
            sum_outcome += loss.outcome;
            sum_treatment += loss.treatment;
            n_batches += 1.0;
        }
        let validation_rmse = validate(params)?;
        history.epochs.push(EpochLog {
            epoch,
            outcome_loss: sum_outcome / n_batches,
            treatment_loss: sum_treatment / n_batches,
            lambda,
            validation_rmse,
        });
        log::debug!(
            "phase {phase_id} epoch {epoch}: outcome {:.3e} treatment {:.4} lambda {lambda:.3} val {validation_rmse:.4}",
            sum_outcome / n_batches,
            sum_treatment / n_batches
        );
        let improved = best.as_ref().is_none_or(|(v, _)| validation_rmse < *v);
        if config.keep_best && improved && validation_rmse.is_finite() {
            best = Some((validation_rmse, params.clone()));
            history.best_epoch = epoch;
        }
    }
    match best {
        Some((_, p)) if config.keep_best => *params = p,
        _ => history.best_epoch = config.epochs,
    }
    Ok(history)
}
