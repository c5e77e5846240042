use serde::{Deserialize, Serialize};

use super::{predict_branches, EvalError};
use crate::data::Trajectory;
use crate::models::OutcomeModel;
use crate::sim::CounterfactualBranchSet;

/// Outcomes closer than this are treated as tied.
pub const EPSILON: f64 = 0.001;

/// Absolute slack on the tie comparison so a gap of exactly `epsilon` in
/// decimal still ties after rounding (5.001 - 5.0 > 0.001 in binary).
const TIE_SLACK: f64 = 1e-12;

/// Optimal choices in one table of `2 * tau` outcomes: entries `0..tau` are
/// chemotherapy on day `k`, entries `tau..2 tau` radiotherapy on day `k`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    /// Arms (0 = chemotherapy, 1 = radiotherapy) whose minimum is within
    /// epsilon of the global minimum.
    pub arms: Vec<usize>,
    /// `timings[a]`: days within arm `a` within epsilon of that arm's
    /// minimum; empty for arms not in `arms`.
    pub timings: [Vec<usize>; 2],
}

impl Selection {
    /// A single choice: the first optimal arm and its first optimal day.
    pub fn choice(&self) -> (usize, usize) {
        let arm = self.arms[0];
        (arm, self.timings[arm][0])
    }
}

pub fn select_treatment_and_timing(outcomes: &[f64], epsilon: f64) -> Result<Selection, EvalError> {
    if outcomes.is_empty() || outcomes.len() % 2 != 0 {
        return Err(EvalError::Invalid(format!(
            "selection needs 2*tau outcomes, got {}",
            outcomes.len()
        )));
    }
    let tau = outcomes.len() / 2;
    let arms_values = [&outcomes[..tau], &outcomes[tau..]];
    let mins = arms_values.map(|a| a.iter().copied().fold(f64::INFINITY, f64::min));
    let best = mins[0].min(mins[1]);
    let tol = epsilon + TIE_SLACK;
    let arms: Vec<usize> = (0..2).filter(|&a| mins[a] - best <= tol).collect();
    let mut timings = [Vec::new(), Vec::new()];
    for &a in &arms {
        timings[a] = (0..tau).filter(|&k| arms_values[a][k] - mins[a] <= tol).collect();
    }
    Ok(Selection { arms, timings })
}

/// Truth and model selections at one anchor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub patient_id: u64,
    pub t: usize,
    pub truth: Selection,
    /// `(arm, day)` chosen from the model's predictions.
    pub predicted: (usize, usize),
}

impl SelectionOutcome {
    pub fn treatment_correct(&self) -> bool {
        self.truth.arms.contains(&self.predicted.0)
    }

    /// Predicted day matches an optimal day of a truly optimal arm.
    pub fn timing_correct(&self) -> bool {
        self.truth.arms.iter().any(|&a| self.truth.timings[a].contains(&self.predicted.1))
    }

    /// Both the arm and its day are optimal.
    pub fn joint_correct(&self) -> bool {
        self.treatment_correct() && self.truth.timings[self.predicted.0].contains(&self.predicted.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionAccuracy {
    /// Percent of anchors with a correct arm.
    pub treatment: f64,
    /// Percent of anchors whose day is optimal within a true best arm.
    pub timing: f64,
    /// Percent with a correct day among anchors with a correct arm.
    pub timing_given_treatment: f64,
    pub anchors: usize,
    pub outcomes: Vec<SelectionOutcome>,
}

impl SelectionAccuracy {
    pub fn from_outcomes(outcomes: Vec<SelectionOutcome>) -> Self {
        let n = outcomes.len();
        let pct = |k: usize, d: usize| if d == 0 { f64::NAN } else { 100.0 * k as f64 / d as f64 };
        let treat = outcomes.iter().filter(|o| o.treatment_correct()).count();
        let timing = outcomes.iter().filter(|o| o.timing_correct()).count();
        let joint = outcomes.iter().filter(|o| o.joint_correct()).count();
        Self {
            treatment: pct(treat, n),
            timing: pct(timing, n),
            timing_given_treatment: pct(joint, treat),
            anchors: n,
            outcomes,
        }
    }
}

/// Selections from the model's predicted outcome tables against those
/// from the simulated truth. The model's own choice takes the single
/// argmin (`epsilon = 0`).
pub fn selection_accuracy(
    model: &dyn OutcomeModel,
    trajectories: &[Trajectory],
    branches: &[CounterfactualBranchSet],
    epsilon: f64,
) -> Result<SelectionAccuracy, EvalError> {
    if branches.is_empty() {
        return Err(EvalError::Empty("no branch sets".into()));
    }
    if branches.iter().any(|b| b.tau < 2) {
        return Err(EvalError::Invalid("selection needs timing plans (tau >= 2)".into()));
    }
    let preds = predict_branches(model, trajectories, branches)?;
    let outcomes = branches
        .iter()
        .zip(&preds)
        .map(|(b, p)| {
            Ok(SelectionOutcome {
                patient_id: b.patient_id,
                t: b.t,
                truth: select_treatment_and_timing(&b.true_outcomes, epsilon)?,
                predicted: select_treatment_and_timing(p, 0.0)?.choice(),
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(SelectionAccuracy::from_outcomes(outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_argmin() {
        let s = select_treatment_and_timing(&[10.0, 8.0, 9.0, 12.0, 11.0, 13.0], EPSILON).unwrap();
        assert_eq!(s.arms, vec![0]);
        assert_eq!(s.timings[0], vec![1]);
        assert_eq!(s.choice(), (0, 1));
    }

    #[test]
    fn all_equal_ties_everything() {
        let s = select_treatment_and_timing(&[5.0; 6], EPSILON).unwrap();
        assert_eq!(s.arms, vec![0, 1]);
        assert_eq!(s.timings, [vec![0, 1, 2], vec![0, 1, 2]]);
    }

    #[test]
    fn within_epsilon_ties() {
        let s = select_treatment_and_timing(&[8.0005, 8.0001, 9.0, 20.0, 20.0, 20.0], EPSILON).unwrap();
        assert_eq!(s.timings[0], vec![0, 1]);
        let strict = select_treatment_and_timing(&[8.0005, 8.0001, 9.0, 20.0, 20.0, 20.0], 0.0).unwrap();
        assert_eq!(strict.timings[0], vec![1]);
    }

    #[test]
    fn odd_table_rejected() {
        assert!(select_treatment_and_timing(&[1.0, 2.0, 3.0], EPSILON).is_err());
    }
}
