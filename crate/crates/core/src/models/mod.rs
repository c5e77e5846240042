//! Every estimator under comparison, behind one prediction interface.
//!
//! A model answers: given a patient's history up to day `t`, what will the
//! tumour volume be after following `plan` for `plan.len()` days? Only
//! `volumes[..=t]`, `chemo_concentration[..t]` and `treatments[..t]` may
//! influence the answer.

mod crn;
mod features;
mod layers;
mod linear;
mod oracle;
mod rmsn;
mod seqnet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crn::{encode, encoder_batch, sequence_batch, CrnModel, RnnModel};
pub use features::{decoder_input, encoder_input, DECODER_INPUT, ENCODER_INPUT, V_MAX};
pub use layers::{Dense, Lstm, Mlp};
pub use linear::{
    clip_weights, fit_logistic, msm_features, outcome_features, percentile, stabilized_weight_product,
    stabilized_weights_cumulative, weighted_least_squares, LinearModel, LogisticModel, MsmModel, MsmPropensities,
    WeightClip, LOGISTIC_L2, OUTCOME_FEATURES,
};
pub use oracle::OracleModel;
pub use rmsn::{PropensityNet, RmsnModel};
pub use seqnet::{one_hot_rows, BatchLoss, DropoutMasks, SeqBatch, SeqHyper, SeqLayout, SeqNet, SeqOutput};

use crate::autodiff::AutodiffError;
use crate::data::{Trajectory, Treatment};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("horizon {tau} not supported (model handles up to {max})")]
    Horizon { tau: usize, max: usize },
    #[error("anchor t={t} outside history of length {len}")]
    Anchor { t: usize, len: usize },
    #[error("singular design matrix in {what}; add regularization or more varied data")]
    Singular { what: String },
    #[error("plans must be non-empty and share one length")]
    Plans,
    #[error("unknown patient {0}")]
    UnknownPatient(u64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Model families accepted by the command-line tool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Crn,
    CrnLambda0,
    Rnn,
    Linear,
    Msm,
    Rmsn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Crn,
        ModelKind::CrnLambda0,
        ModelKind::Rnn,
        ModelKind::Linear,
        ModelKind::Msm,
        ModelKind::Rmsn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Crn => "crn",
            ModelKind::CrnLambda0 => "crn_lambda0",
            ModelKind::Rnn => "rnn",
            ModelKind::Linear => "linear",
            ModelKind::Msm => "msm",
            ModelKind::Rmsn => "rmsn",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == text)
    }

    /// Whether the model can answer multi-step plans.
    pub fn multi_step(self) -> bool {
        !matches!(self, ModelKind::Rnn)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub trait OutcomeModel: Send + Sync {
    fn name(&self) -> String;

    /// Longest plan the model can evaluate.
    fn max_horizon(&self) -> usize;

    /// Predicted `Y(t + tau)` for every `(anchor, plan)` pair, indexed
    /// `[anchor][plan]`. All plans must share one length `tau`.
    fn predict(&self, trajectory: &Trajectory, anchors: &[usize], plans: &[Vec<Treatment>])
        -> Result<Vec<Vec<f64>>, ModelError>;
}

/// Shared argument checks; returns the horizon.
pub(crate) fn check_query(
    trajectory: &Trajectory,
    anchors: &[usize],
    plans: &[Vec<Treatment>],
    max_horizon: usize,
) -> Result<usize, ModelError> {
    let tau = plans.first().map(Vec::len).ok_or(ModelError::Plans)?;
    if tau == 0 || plans.iter().any(|p| p.len() != tau) {
        return Err(ModelError::Plans);
    }
    if tau > max_horizon {
        return Err(ModelError::Horizon { tau, max: max_horizon });
    }
    if let Some(&t) = anchors.iter().find(|&&t| t >= trajectory.len()) {
        return Err(ModelError::Anchor {
            t,
            len: trajectory.len(),
        });
    }
    Ok(tau)
}

/// A trained model of any family, in the form written to checkpoint JSON.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "model_type", rename_all = "snake_case")]
pub enum TrainedModel {
    Crn(CrnModel),
    CrnLambda0(CrnModel),
    Rnn(RnnModel),
    Linear(LinearModel),
    Msm(MsmModel),
    Rmsn(RmsnModel),
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            TrainedModel::Crn(_) => ModelKind::Crn,
            TrainedModel::CrnLambda0(_) => ModelKind::CrnLambda0,
            TrainedModel::Rnn(_) => ModelKind::Rnn,
            TrainedModel::Linear(_) => ModelKind::Linear,
            TrainedModel::Msm(_) => ModelKind::Msm,
            TrainedModel::Rmsn(_) => ModelKind::Rmsn,
        }
    }

    pub fn as_model(&self) -> &dyn OutcomeModel {
        match self {
            TrainedModel::Crn(m) | TrainedModel::CrnLambda0(m) => m,
            TrainedModel::Rnn(m) => m,
            TrainedModel::Linear(m) => m,
            TrainedModel::Msm(m) => m,
            TrainedModel::Rmsn(m) => m,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, ModelError> {
        serde_json::from_str(json).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }
}
