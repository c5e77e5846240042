use std::io::Write;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::autodiff::{ParamSet, Tape, Tensor};
use crate::data::{Standardizer, Trajectory, Treatment};
use crate::models::{encode, Mlp, SeqNet};
use crate::rng::{stream, tag};
use crate::train::{phase, run_epochs, TrainConfig};
use crate::models::BatchLoss;

/// Steps of history in the raw featurization.
pub const RAW_HISTORY_STEPS: usize = 5;

/// `[z V(s), z C(s-1), A(s-1) one-hot]` for `s = t-4 ..= t` (zeros before
/// day 0), then the subgroup one-hot.
pub fn raw_history_features(tr: &Trajectory, t: usize, std: &Standardizer) -> Vec<f64> {
    let mut row = Vec::with_capacity(RAW_HISTORY_STEPS * 6 + 3);
    for back in (0..RAW_HISTORY_STEPS).rev() {
        match t.checked_sub(back) {
            Some(s) => {
                row.push(std.volume(tr.volumes[s]));
                row.push(std.concentration(tr.prior_concentration(s)));
                row.extend_from_slice(&tr.previous_treatment(s).one_hot());
            }
            None => row.extend_from_slice(&[0.0; 6]),
        }
    }
    row.extend_from_slice(&tr.subgroup_one_hot());
    row
}

/// Post-hoc predictability of the treatment from the representation and
/// from raw history, in percent on held-out patients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancingReport {
    pub representation_accuracy: f64,
    pub raw_accuracy: f64,
    /// Share of the most frequent treatment among the scored rows.
    pub majority_rate: f64,
    pub train_rows: usize,
    pub test_rows: usize,
}

struct Rows {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

fn standardize(train: &mut [Vec<f64>], test: &mut [Vec<f64>]) {
    let d = train.first().map_or(0, Vec::len);
    let n = train.len().max(1) as f64;
    for j in 0..d {
        let mean = train.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = train.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 1e-24 { var.sqrt() } else { 1.0 };
        for r in train.iter_mut().chain(test.iter_mut()) {
            r[j] = (r[j] - mean) / sd;
        }
    }
}

/// Trains an `input -> hidden -> 4` ELU network on `train` and returns its
/// accuracy on `test`.
fn classifier_accuracy(train: &Rows, test: &Rows, hidden: usize, config: &TrainConfig) -> Result<f64, EvalError> {
    let input = train.features.first().map_or(0, Vec::len);
    let mut params = ParamSet::new();
    let mlp = Mlp::new(
        &mut params,
        "probe",
        input,
        hidden,
        Treatment::COUNT,
        &mut stream(config.seed, &[tag::INIT, phase::DIAGNOSTIC, input as u64]),
    );
    let config = TrainConfig {
        keep_best: false,
        lambda_max: 0.0,
        ..config.clone()
    };
    run_epochs(
        &mut params,
        train.labels.len(),
        &config,
        phase::DIAGNOSTIC,
        |tape: &Tape, p, idx, _lambda, _rng| {
            let x = Tensor::from_rows(&idx.iter().map(|&i| train.features[i].clone()).collect::<Vec<_>>());
            let mut y = vec![0.0; idx.len() * Treatment::COUNT];
            for (r, &i) in idx.iter().enumerate() {
                y[r * Treatment::COUNT + train.labels[i]] = 1.0;
            }
            let logits = mlp.forward(p, tape.constant(x))?;
            let loss = logits
                .log_softmax()
                .masked_sum(&Tensor::matrix(idx.len(), Treatment::COUNT, y))?
                .scale(-1.0 / idx.len() as f64);
            let value = loss.item();
            Ok(BatchLoss {
                total: loss,
                outcome: 0.0,
                treatment: value,
            })
        },
        |_| Ok(f64::NAN),
    )?;
    let tape = Tape::new();
    let p = params.bind_frozen(&tape);
    let logits = mlp.forward(&p, tape.constant(Tensor::from_rows(&test.features)))?.value();
    let correct = (0..test.labels.len())
        .filter(|&r| {
            let row = logits.row(r);
            let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
            best == test.labels[r]
        })
        .count();
    Ok(100.0 * correct as f64 / test.labels.len() as f64)
}

/// Fits fresh treatment classifiers (same shape as the adversarial head)
/// on the frozen representation and on raw history features. Patients at
/// even positions of `data` train the classifiers, odd positions score
/// them.
pub fn balancing_diagnostic(
    encoder: &SeqNet,
    std: &Standardizer,
    data: &[Trajectory],
    config: &TrainConfig,
) -> Result<BalancingReport, EvalError> {
    if data.len() < 2 {
        return Err(EvalError::Empty("balancing diagnostic needs at least two patients".into()));
    }
    let mut phi = [
        Rows {
            features: Vec::new(),
            labels: Vec::new(),
        },
        Rows {
            features: Vec::new(),
            labels: Vec::new(),
        },
    ];
    let mut raw = [
        Rows {
            features: Vec::new(),
            labels: Vec::new(),
        },
        Rows {
            features: Vec::new(),
            labels: Vec::new(),
        },
    ];
    for (i, tr) in data.iter().enumerate() {
        let reps = encode(encoder, tr, std)?;
        let half = i % 2;
        for t in 0..tr.len() {
            let label = tr.treatments[t].index();
            phi[half].features.push(reps.row(t).to_vec());
            phi[half].labels.push(label);
            raw[half].features.push(raw_history_features(tr, t, std));
            raw[half].labels.push(label);
        }
    }
    let [mut phi_train, mut phi_test] = phi;
    let [mut raw_train, mut raw_test] = raw;
    standardize(&mut phi_train.features, &mut phi_test.features);
    standardize(&mut raw_train.features, &mut raw_test.features);
    let hidden = encoder.layout.hyper.fc_hidden;
    let mut counts = [0usize; Treatment::COUNT];
    for &l in &phi_test.labels {
        counts[l] += 1;
    }
    let majority = *counts.iter().max().unwrap_or(&0) as f64 / phi_test.labels.len().max(1) as f64;
    Ok(BalancingReport {
        representation_accuracy: classifier_accuracy(&phi_train, &phi_test, hidden, config)?,
        raw_accuracy: classifier_accuracy(&raw_train, &raw_test, hidden, config)?,
        majority_rate: 100.0 * majority,
        train_rows: phi_train.labels.len(),
        test_rows: phi_test.labels.len(),
    })
}

/// CSV of `patient_id, t, phi_0 .. phi_{R-1}, treatment`, one row per
/// patient-day.
pub fn export_representations<W: Write>(
    encoder: &SeqNet,
    std: &Standardizer,
    data: &[Trajectory],
    writer: W,
) -> Result<usize, EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    let r = encoder.layout.hyper.repr;
    let mut header = vec!["patient_id".to_string(), "t".to_string()];
    header.extend((0..r).map(|k| format!("phi_{k}")));
    header.push("treatment".into());
    w.write_record(&header)?;
    let mut rows = 0;
    for tr in data {
        let reps = encode(encoder, tr, std)?;
        for t in 0..tr.len() {
            let mut rec = vec![tr.patient_id.to_string(), t.to_string()];
            rec.extend(reps.row(t).iter().map(|v| v.to_string()));
            rec.push(tr.treatments[t].index().to_string());
            w.write_record(&rec)?;
            rows += 1;
        }
    }
    w.flush()?;
    Ok(rows)
}
