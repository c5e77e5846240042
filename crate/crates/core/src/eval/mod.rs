//! Counterfactual evaluation: normalized RMSE over branch sets, treatment
//! and timing selection, balancing diagnostics and the optimal-classifier
//! check.

mod balancing;
mod classifier;
mod report;
mod selection;

use std::collections::HashMap;

use rayon::prelude::*;
use thiserror::Error;

pub use balancing::{balancing_diagnostic, export_representations, raw_history_features, BalancingReport, RAW_HISTORY_STEPS};
pub use classifier::{
    classifier_objective, jensen_shannon, optimal_classifier, optimize_classifier_table, total_variation,
    verify_optimal_classifier, ClassifierCheck,
};
pub use report::{MetricRow, MetricsReport};
pub use selection::{select_treatment_and_timing, selection_accuracy, Selection, SelectionAccuracy, SelectionOutcome, EPSILON};

use crate::autodiff::AutodiffError;
use crate::data::Trajectory;
use crate::models::{ModelError, OutcomeModel, V_MAX};
use crate::sim::CounterfactualBranchSet;
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate: {0}")]
    Empty(String),
    #[error("prediction and truth lengths differ ({0} vs {1})")]
    Length(usize, usize),
    #[error("branch set for patient {0} has no matching trajectory")]
    MissingPatient(u64),
    #[error("branch sets mix horizons {0} and {1}")]
    MixedHorizon(usize, usize),
    #[error("distribution {index} is not normalized (sum {sum})")]
    NotNormalized { index: usize, sum: f64 },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `100 * sqrt(mean((pred - truth)^2)) / V_MAX`.
pub fn normalized_rmse(predictions: &[f64], truths: &[f64]) -> Result<f64, EvalError> {
    if predictions.len() != truths.len() {
        return Err(EvalError::Length(predictions.len(), truths.len()));
    }
    if predictions.is_empty() {
        return Err(EvalError::Empty("no predictions".into()));
    }
    let sse: f64 = predictions.iter().zip(truths).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok(rmse_from_sse(sse, predictions.len()))
}

fn rmse_from_sse(sse: f64, n: usize) -> f64 {
    100.0 * (sse / n as f64).sqrt() / V_MAX
}

/// Model predictions aligned with `branches`: entry `i` holds one value
/// per plan of `branches[i]`. Calls are grouped per patient and anchors
/// of one patient are answered in a single `predict` call.
pub fn predict_branches(
    model: &dyn OutcomeModel,
    trajectories: &[Trajectory],
    branches: &[CounterfactualBranchSet],
) -> Result<Vec<Vec<f64>>, EvalError> {
    let by_id: HashMap<u64, &Trajectory> = trajectories.iter().map(|t| (t.patient_id, t)).collect();
    let mut groups: Vec<(u64, Vec<usize>)> = Vec::new();
    let mut slot: HashMap<u64, usize> = HashMap::new();
    for (i, b) in branches.iter().enumerate() {
        let g = *slot.entry(b.patient_id).or_insert_with(|| {
            groups.push((b.patient_id, Vec::new()));
            groups.len() - 1
        });
        groups[g].1.push(i);
    }
    let answered: Vec<Vec<(usize, Vec<f64>)>> = groups
        .par_iter()
        .map(|(pid, idx)| {
            let tr = by_id.get(pid).ok_or(EvalError::MissingPatient(*pid))?;
            // anchors sharing one plan list go together
            let plans = &branches[idx[0]].plans;
            let (same, other): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| &branches[i].plans == plans);
            let mut out = Vec::with_capacity(idx.len());
            let anchors: Vec<usize> = same.iter().map(|&i| branches[i].t).collect();
            for (i, row) in same.iter().zip(model.predict(tr, &anchors, plans)?) {
                out.push((*i, row));
            }
            for i in other {
                let b = &branches[i];
                out.push((i, model.predict(tr, &[b.t], &b.plans)?.remove(0)));
            }
            Ok(out)
        })
        .collect::<Result<_, EvalError>>()?;
    let mut result = vec![Vec::new(); branches.len()];
    for (i, row) in answered.into_iter().flatten() {
        result[i] = row;
    }
    Ok(result)
}

/// Pooled normalized RMSE over every (patient, anchor, plan) triple.
pub fn evaluate_branches(
    model: &dyn OutcomeModel,
    trajectories: &[Trajectory],
    branches: &[CounterfactualBranchSet],
) -> Result<f64, EvalError> {
    let Some(first) = branches.first() else {
        return Err(EvalError::Empty("no branch sets".into()));
    };
    if let Some(b) = branches.iter().find(|b| b.tau != first.tau) {
        return Err(EvalError::MixedHorizon(first.tau, b.tau));
    }
    let preds = predict_branches(model, trajectories, branches)?;
    let (mut sse, mut n) = (0.0, 0usize);
    for (p, b) in preds.iter().zip(branches) {
        for (yhat, y) in p.iter().zip(&b.true_outcomes) {
            sse += (yhat - y) * (yhat - y);
            n += 1;
        }
    }
    Ok(rmse_from_sse(sse, n))
}

/// One-step counterfactual RMSE (all four options at every anchor).
pub fn evaluate_one_step(
    model: &dyn OutcomeModel,
    trajectories: &[Trajectory],
    branches: &[CounterfactualBranchSet],
) -> Result<f64, EvalError> {
    if branches.iter().any(|b| b.tau != 1) {
        return Err(EvalError::Invalid("one-step evaluation needs tau = 1 branch sets".into()));
    }
    evaluate_branches(model, trajectories, branches)
}

/// RMSE at horizon `tau` of the autoregressive multi-step predictions.
pub fn evaluate_multi_step(
    model: &dyn OutcomeModel,
    trajectories: &[Trajectory],
    branches: &[CounterfactualBranchSet],
) -> Result<f64, EvalError> {
    evaluate_branches(model, trajectories, branches)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        assert_eq!(normalized_rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let r = normalized_rmse(&[11.5, 0.0], &[0.0, 11.5]).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        assert!(normalized_rmse(&[], &[]).is_err());
        assert!(normalized_rmse(&[1.0], &[]).is_err());
    }
}
