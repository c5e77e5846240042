use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fit::{train_decoder, train_encoder, ModelSettings};
use super::windows::{extract_representations, make_decoder_windows};
use super::{phase, TrainError};
use crate::data::{Standardizer, Trajectory};
use crate::models::{SeqHyper, DECODER_INPUT, ENCODER_INPUT};
use crate::rng::{stream, tag};

/// Which network a search tunes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchTarget {
    Encoder,
    /// The decoder, on top of an encoder trained with the base settings.
    Decoder,
}

/// Candidate lists. Sizes are multipliers: LSTM and representation sizes
/// of the input width `C`, head width of the representation size `R`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub hidden_multipliers: Vec<f64>,
    pub repr_multipliers: Vec<f64>,
    pub fc_multipliers: Vec<f64>,
    pub dropouts: Vec<f64>,
}

impl SearchSpace {
    pub fn encoder() -> Self {
        Self {
            learning_rates: vec![0.01, 0.001, 0.0001],
            batch_sizes: vec![64, 128, 256],
            hidden_multipliers: vec![0.5, 1.0, 2.0, 3.0, 4.0],
            repr_multipliers: vec![0.5, 1.0, 2.0, 3.0, 4.0],
            fc_multipliers: vec![0.5, 1.0, 2.0, 3.0, 4.0],
            dropouts: vec![0.1, 0.2, 0.3, 0.4, 0.5],
        }
    }

    /// Decoder LSTM size is fixed by the encoder representation, so only
    /// one hidden multiplier is listed.
    pub fn decoder() -> Self {
        Self {
            batch_sizes: vec![256, 512, 1024],
            hidden_multipliers: vec![1.0],
            ..Self::encoder()
        }
    }

    pub fn for_target(target: SearchTarget) -> Self {
        match target {
            SearchTarget::Encoder => Self::encoder(),
            SearchTarget::Decoder => Self::decoder(),
        }
    }

    pub fn size(&self) -> usize {
        self.learning_rates.len()
            * self.batch_sizes.len()
            * self.hidden_multipliers.len()
            * self.repr_multipliers.len()
            * self.fc_multipliers.len()
            * self.dropouts.len()
    }

    /// The `index`-th point of the grid in mixed-radix order.
    fn point(&self, mut index: usize, input: usize) -> (f64, usize, SeqHyper) {
        let mut pick = |n: usize| {
            let i = index % n;
            index /= n;
            i
        };
        let lr = self.learning_rates[pick(self.learning_rates.len())];
        let batch = self.batch_sizes[pick(self.batch_sizes.len())];
        let hm = self.hidden_multipliers[pick(self.hidden_multipliers.len())];
        let rm = self.repr_multipliers[pick(self.repr_multipliers.len())];
        let fm = self.fc_multipliers[pick(self.fc_multipliers.len())];
        let dropout = self.dropouts[pick(self.dropouts.len())];
        let scale = |m: f64, base: usize| ((m * base as f64).round() as usize).max(1);
        let repr = scale(rm, input);
        let hyper = SeqHyper {
            hidden: scale(hm, input),
            repr,
            fc_hidden: scale(fm, repr),
            dropout,
        };
        (lr, batch, hyper)
    }
}

/// One leaderboard row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub repr: usize,
    pub fc_hidden: usize,
    pub dropout: f64,
    pub validation_rmse: f64,
}

/// Samples `n_iters` distinct grid points (all of them if the grid is
/// smaller), trains each in parallel and returns the settings of the best
/// trial together with the leaderboard in trial order.
///
/// Encoder trials train the balanced encoder alone; decoder trials share
/// one encoder trained with `base`.
pub fn random_search(
    target: SearchTarget,
    space: &SearchSpace,
    n_iters: usize,
    train: &[Trajectory],
    validation: &[Trajectory],
    base: &ModelSettings,
    seed: u64,
) -> Result<(ModelSettings, Vec<Trial>), TrainError> {
    if space.size() == 0 || n_iters == 0 {
        return Err(TrainError::Config("empty search space or zero iterations".into()));
    }
    let mut grid: Vec<usize> = (0..space.size()).collect();
    grid.shuffle(&mut stream(seed, &[tag::SEARCH]));
    grid.truncate(n_iters);
    let std = Standardizer::fit(train);

    let input = match target {
        SearchTarget::Encoder => ENCODER_INPUT,
        SearchTarget::Decoder => DECODER_INPUT,
    };
    let windows = match target {
        SearchTarget::Encoder => None,
        SearchTarget::Decoder => {
            let (encoder, _) = train_encoder(
                train,
                validation,
                &std,
                &base.encoder,
                &base.encoder_train,
                true,
                false,
                None,
                phase::ENCODER,
            )?;
            let tr = extract_representations(&encoder, train, &std)?;
            let va = extract_representations(&encoder, validation, &std)?;
            Some((
                make_decoder_windows(train, &tr, base.tau_max).0,
                make_decoder_windows(validation, &va, base.tau_max).0,
            ))
        }
    };

    let trials: Vec<Result<(Trial, SeqHyper), TrainError>> = grid
        .par_iter()
        .enumerate()
        .map(|(trial, &index)| {
            let (learning_rate, batch_size, hyper) = space.point(index, input);
            let (hyper, history) = match &windows {
                None => {
                    let cfg = super::TrainConfig {
                        learning_rate,
                        batch_size,
                        ..base.encoder_train.clone()
                    };
                    let (net, h) =
                        train_encoder(train, validation, &std, &hyper, &cfg, true, false, None, phase::ENCODER)?;
                    (net.layout.hyper, h)
                }
                Some((tw, vw)) => {
                    let cfg = super::TrainConfig {
                        learning_rate,
                        batch_size,
                        ..base.decoder_train.clone()
                    };
                    let (net, h) = train_decoder(tw, vw, &std, &hyper, &cfg, true, None, phase::DECODER)?;
                    (net.layout.hyper, h)
                }
            };
            Ok((
                Trial {
                    trial,
                    learning_rate,
                    batch_size,
                    hidden: hyper.hidden,
                    repr: hyper.repr,
                    fc_hidden: hyper.fc_hidden,
                    dropout: hyper.dropout,
                    validation_rmse: history.best_validation_rmse(),
                },
                hyper,
            ))
        })
        .collect();
    let trials: Vec<(Trial, SeqHyper)> = trials.into_iter().collect::<Result<_, _>>()?;
    let (best, best_hyper) = trials
        .iter()
        .filter(|(t, _)| t.validation_rmse.is_finite())
        .min_by(|a, b| a.0.validation_rmse.total_cmp(&b.0.validation_rmse))
        .ok_or_else(|| TrainError::Empty("no trial produced a finite validation RMSE".into()))?;
    let mut settings = base.clone();
    match target {
        SearchTarget::Encoder => {
            settings.encoder = best_hyper.clone();
            settings.encoder_train.learning_rate = best.learning_rate;
            settings.encoder_train.batch_size = best.batch_size;
        }
        SearchTarget::Decoder => {
            settings.decoder = best_hyper.clone();
            settings.decoder_train.learning_rate = best.learning_rate;
            settings.decoder_train.batch_size = best.batch_size;
        }
    }
    Ok((settings, trials.into_iter().map(|(t, _)| t).collect()))
}

pub fn write_leaderboard<W: Write>(trials: &[Trial], writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    for t in trials {
        w.serialize(t)?;
    }
    w.flush()?;
    Ok(())
}
