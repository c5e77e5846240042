use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{step_draws, PatientState, SimConfig, SimError, SimulatedPatient};
use crate::data::Treatment;

/// Alternative treatment plans from one anchor with their simulated
/// outcomes `Y(t + tau)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualBranchSet {
    pub patient_id: u64,
    /// Anchor day: the plans start at day `t`, after observing `V(t)`.
    pub t: usize,
    pub tau: usize,
    pub plans: Vec<Vec<Treatment>>,
    pub true_outcomes: Vec<f64>,
}

/// The four one-day options.
pub fn single_step_plans() -> Vec<Vec<Treatment>> {
    Treatment::ALL.iter().map(|&a| vec![a]).collect()
}

/// The `2 * tau` single-intervention plans: chemotherapy alone on day
/// `k` for each `k < tau`, then radiotherapy alone on day `k`.
pub fn timing_plans(tau: usize) -> Vec<Vec<Treatment>> {
    let mut plans = Vec::with_capacity(2 * tau);
    for single in [Treatment::Chemo, Treatment::Radio] {
        for k in 0..tau {
            let mut plan = vec![Treatment::None; tau];
            plan[k] = single;
            plans.push(plan);
        }
    }
    plans
}

fn plans_for(tau: usize) -> Vec<Vec<Treatment>> {
    if tau == 1 {
        single_step_plans()
    } else {
        timing_plans(tau)
    }
}

/// Rolls `plan` forward from day `t` of the patient's trajectory using the
/// factual noise of each day, returning every volume `V(t+1..=t+len)`.
pub fn roll_plan(
    patient: &SimulatedPatient,
    t: usize,
    plan: &[Treatment],
    config: &SimConfig,
) -> Result<Vec<f64>, SimError> {
    let tr = &patient.trajectory;
    if t >= tr.len() {
        return Err(SimError::AnchorOutOfRange { t, len: tr.len() });
    }
    let mut state = PatientState::from_trajectory(tr, t);
    let mut out = Vec::with_capacity(plan.len());
    for (s, &a) in plan.iter().enumerate() {
        let noise = step_draws(config, tr.patient_id, t + s).noise;
        state.advance(a, noise, &patient.params, config)?;
        out.push(state.volume);
    }
    Ok(out)
}

/// Ground-truth outcomes of every plan for one anchor. All branches share
/// the noise sequence of days `t..t+tau`.
pub fn generate_counterfactuals(
    patient: &SimulatedPatient,
    t: usize,
    tau: usize,
    config: &SimConfig,
) -> Result<CounterfactualBranchSet, SimError> {
    if tau == 0 || t + tau > config.max_timesteps {
        return Err(SimError::HorizonOutOfRange {
            t,
            tau,
            max: config.max_timesteps,
        });
    }
    let plans = plans_for(tau);
    let true_outcomes = plans
        .iter()
        .map(|plan| roll_plan(patient, t, plan, config).map(|v| v[tau - 1]))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CounterfactualBranchSet {
        patient_id: patient.trajectory.patient_id,
        t,
        tau,
        plans,
        true_outcomes,
    })
}

/// Branch sets for every anchor of every patient with `t + tau` inside the
/// simulation horizon.
pub fn generate_all_counterfactuals(
    patients: &[SimulatedPatient],
    tau: usize,
    config: &SimConfig,
) -> Result<Vec<CounterfactualBranchSet>, SimError> {
    let anchors: Vec<(usize, usize)> = patients
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.trajectory.len()).map(move |t| (i, t)))
        .filter(|&(_, t)| t + tau <= config.max_timesteps)
        .collect();
    anchors
        .into_par_iter()
        .map(|(i, t)| generate_counterfactuals(&patients[i], t, tau, config))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct BranchRow {
    patient_id: u64,
    t: usize,
    tau: usize,
    plan: String,
    outcome: f64,
}

fn encode_plan(plan: &[Treatment]) -> String {
    plan.iter().map(|a| char::from(b'0' + a.index() as u8)).collect()
}

fn decode_plan(text: &str) -> Option<Vec<Treatment>> {
    text.chars()
        .map(|c| c.to_digit(10).and_then(|d| Treatment::from_index(d as usize)))
        .collect()
}

/// One row per plan; the plan column holds one treatment code per day,
/// e.g. `0100` for chemotherapy on the second of four days.
pub fn write_branches_csv<W: Write>(sets: &[CounterfactualBranchSet], writer: W) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(writer);
    for set in sets {
        for (plan, &outcome) in set.plans.iter().zip(&set.true_outcomes) {
            w.serialize(BranchRow {
                patient_id: set.patient_id,
                t: set.t,
                tau: set.tau,
                plan: encode_plan(plan),
                outcome,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_branches_csv<R: Read>(reader: R) -> Result<Vec<CounterfactualBranchSet>, SimError> {
    let mut r = csv::Reader::from_reader(reader);
    let mut sets: Vec<CounterfactualBranchSet> = Vec::new();
    for row in r.deserialize::<BranchRow>() {
        let row = row?;
        let plan = decode_plan(&row.plan)
            .filter(|p| p.len() == row.tau)
            .ok_or_else(|| SimError::Config {
                field: "plan".into(),
                message: format!("bad plan `{}` for tau {}", row.plan, row.tau),
            })?;
        match sets.last_mut() {
            Some(s) if s.patient_id == row.patient_id && s.t == row.t && s.tau == row.tau => {
                s.plans.push(plan);
                s.true_outcomes.push(row.outcome);
            }
            _ => sets.push(CounterfactualBranchSet {
                patient_id: row.patient_id,
                t: row.t,
                tau: row.tau,
                plans: vec![plan],
                true_outcomes: vec![row.outcome],
            }),
        }
    }
    Ok(sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::simulate_patients;

    #[test]
    fn timing_plans_have_one_intervention() {
        let plans = timing_plans(3);
        assert_eq!(plans.len(), 6);
        assert_eq!(plans.iter().filter(|p| p.contains(&Treatment::Chemo)).count(), 3);
        for p in &plans {
            assert_eq!(p.iter().filter(|a| **a != Treatment::None).count(), 1);
            assert!(!p.contains(&Treatment::Both));
        }
        assert_eq!(single_step_plans().len(), 4);
    }

    #[test]
    fn factual_branch_matches_observed_outcome() {
        let config = SimConfig::new(5.0, 10, 3);
        for p in simulate_patients(&config).unwrap() {
            for t in 0..p.trajectory.len() {
                let set = generate_counterfactuals(&p, t, 1, &config).unwrap();
                let k = p.trajectory.treatments[t].index();
                assert_eq!(set.true_outcomes[k], p.trajectory.outcomes[t]);
            }
        }
    }

    #[test]
    fn zero_sensitivity_branches_agree() {
        let config = SimConfig::new(5.0, 3, 8);
        for mut p in simulate_patients(&config).unwrap() {
            p.params = p.params.without_treatment_response();
            for tau in [1, 4] {
                let set = generate_counterfactuals(&p, 0, tau, &config).unwrap();
                let first = set.true_outcomes[0];
                assert!(set.true_outcomes.iter().all(|&y| y == first));
            }
        }
    }

    #[test]
    fn horizon_is_checked() {
        let config = SimConfig::new(5.0, 1, 8);
        let p = &simulate_patients(&config).unwrap()[0];
        assert!(generate_counterfactuals(p, 58, 3, &config).is_err());
        assert!(generate_counterfactuals(p, 0, 0, &config).is_err());
    }

    #[test]
    fn branch_csv_round_trip() {
        let config = SimConfig::new(5.0, 2, 1);
        let patients = simulate_patients(&config).unwrap();
        let sets = generate_all_counterfactuals(&patients, 3, &config).unwrap();
        let mut buf = Vec::new();
        write_branches_csv(&sets, &mut buf).unwrap();
        assert_eq!(read_branches_csv(buf.as_slice()).unwrap(), sets);
    }
}
