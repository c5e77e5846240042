use std::collections::HashMap;

use super::{check_query, ModelError, OutcomeModel};
use crate::data::{Trajectory, Treatment};
use crate::sim::{roll_plan, SimConfig, SimulatedPatient};

/// Reads outcomes straight from the simulator. Used to validate the
/// evaluation pipeline: its counterfactual error is zero by construction.
#[derive(Clone, Debug)]
pub struct OracleModel {
    patients: HashMap<u64, SimulatedPatient>,
    config: SimConfig,
}

impl OracleModel {
    pub fn new(patients: &[SimulatedPatient], config: &SimConfig) -> Self {
        Self {
            patients: patients
                .iter()
                .map(|p| (p.trajectory.patient_id, p.clone()))
                .collect(),
            config: config.clone(),
        }
    }
}

impl OutcomeModel for OracleModel {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn max_horizon(&self) -> usize {
        self.config.max_timesteps
    }

    fn predict(
        &self,
        trajectory: &Trajectory,
        anchors: &[usize],
        plans: &[Vec<Treatment>],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        check_query(trajectory, anchors, plans, self.max_horizon())?;
        let patient = self
            .patients
            .get(&trajectory.patient_id)
            .ok_or(ModelError::UnknownPatient(trajectory.patient_id))?;
        anchors
            .iter()
            .map(|&t| {
                plans
                    .iter()
                    .map(|plan| {
                        roll_plan(patient, t, plan, &self.config)
                            .map(|v| v[plan.len() - 1])
                            .map_err(|e| ModelError::Checkpoint(e.to_string()))
                    })
                    .collect()
            })
            .collect()
    }
}
