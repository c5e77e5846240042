//! The treatment classifier's best response to a fixed representation.
//!
//! With `K` treatment-conditional distributions `P_j` over a finite
//! representation space, the classifier maximizing
//! `sum_j E_{P_j}[log G_j(x)]` is `G*_j(x) = P_j(x) / sum_i P_i(x)`, and
//! the maximum equals `K * JSD(P_1..P_K) - K log K`.

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::autodiff::{Adam, AdamConfig, ParamSet, Tape, Tensor};

fn check(dists: &[Vec<f64>]) -> Result<usize, EvalError> {
    if dists.len() < 2 {
        return Err(EvalError::Invalid("need at least two distributions".into()));
    }
    let n = dists[0].len();
    if n == 0 || dists.iter().any(|d| d.len() != n) {
        return Err(EvalError::Invalid("distributions must share one non-empty support".into()));
    }
    for (index, d) in dists.iter().enumerate() {
        let sum: f64 = d.iter().sum();
        if d.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(EvalError::NotNormalized { index, sum });
        }
    }
    Ok(n)
}

/// `table[j][x] = P_j(x) / sum_i P_i(x)`; uniform where every `P_j(x)` is 0.
pub fn optimal_classifier(dists: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, EvalError> {
    let n = check(dists)?;
    let k = dists.len();
    let mut table = vec![vec![0.0; n]; k];
    for x in 0..n {
        let total: f64 = dists.iter().map(|d| d[x]).sum();
        for j in 0..k {
            table[j][x] = if total > 0.0 { dists[j][x] / total } else { 1.0 / k as f64 };
        }
    }
    Ok(table)
}

/// `sum_j sum_x P_j(x) log G_j(x)`, with `0 log 0 = 0`.
pub fn classifier_objective(dists: &[Vec<f64>], table: &[Vec<f64>]) -> f64 {
    dists
        .iter()
        .zip(table)
        .map(|(d, g)| {
            d.iter()
                .zip(g)
                .map(|(&p, &q)| if p > 0.0 { p * q.ln() } else { 0.0 })
                .sum::<f64>()
        })
        .sum()
}

/// Jensen-Shannon divergence of `K` distributions with equal weights.
pub fn jensen_shannon(dists: &[Vec<f64>]) -> f64 {
    let k = dists.len() as f64;
    let n = dists[0].len();
    let entropy = |d: &[f64]| -> f64 { d.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum() };
    let mixture: Vec<f64> = (0..n).map(|x| dists.iter().map(|d| d[x]).sum::<f64>() / k).collect();
    entropy(&mixture) - dists.iter().map(|d| entropy(d)).sum::<f64>() / k
}

/// Largest total-variation distance between the two classifiers' output
/// distributions, over points with positive mass.
pub fn total_variation(dists: &[Vec<f64>], a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let n = dists[0].len();
    (0..n)
        .filter(|&x| dists.iter().any(|d| d[x] > 0.0))
        .map(|x| 0.5 * a.iter().zip(b).map(|(ga, gb)| (ga[x] - gb[x]).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Maximizes the objective over a free softmax table by Adam on the
/// logits, starting from zeros, with the rate decayed linearly to zero
/// (a constant rate keeps circling the optimum). Returns `table[j][x]`.
pub fn optimize_classifier_table(
    dists: &[Vec<f64>],
    iterations: usize,
    learning_rate: f64,
) -> Result<Vec<Vec<f64>>, EvalError> {
    let n = check(dists)?;
    let k = dists.len();
    let weights = Tensor::matrix(n, k, (0..n).flat_map(|x| dists.iter().map(move |d| d[x])).collect());
    let mut params = ParamSet::new();
    params.insert("logits", Tensor::zeros(&[n, k]));
    let mut adam = Adam::new(&params, AdamConfig::with_learning_rate(learning_rate));
    for i in 0..iterations {
        adam.config.learning_rate = learning_rate * (1.0 - i as f64 / iterations as f64);
        let tape = Tape::new();
        let vars = params.bind(&tape);
        let loss = vars[0].log_softmax().masked_sum(&weights)?.scale(-1.0);
        let grads = tape.backward(loss)?;
        let grads = ParamSet::collect_grads(&grads, &vars);
        drop(vars);
        adam.step(&mut params, &grads)?;
    }
    let tape = Tape::new();
    let probs = params.bind_frozen(&tape)[0].softmax().value();
    Ok((0..k).map(|j| (0..n).map(|x| probs.get(x, j)).collect()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierCheck {
    pub closed_form: Vec<Vec<f64>>,
    pub optimized: Vec<Vec<f64>>,
    /// Worst-point total variation between the two tables.
    pub total_variation: f64,
    pub objective_closed_form: f64,
    pub objective_optimized: f64,
    pub jsd: f64,
    /// `objective_closed_form - (K * jsd - K log K)`.
    pub identity_gap: f64,
}

/// Closed-form best response against a numerically optimized table.
pub fn verify_optimal_classifier(dists: &[Vec<f64>]) -> Result<ClassifierCheck, EvalError> {
    let closed_form = optimal_classifier(dists)?;
    let optimized = optimize_classifier_table(dists, 4000, 0.05)?;
    let k = dists.len() as f64;
    let objective_closed_form = classifier_objective(dists, &closed_form);
    let jsd = jensen_shannon(dists);
    Ok(ClassifierCheck {
        total_variation: total_variation(dists, &closed_form, &optimized),
        objective_optimized: classifier_objective(dists, &optimized),
        identity_gap: objective_closed_form - (k * jsd - k * k.ln()),
        closed_form,
        optimized,
        objective_closed_form,
        jsd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_example() {
        let g = optimal_classifier(&[vec![0.8, 0.2], vec![0.4, 0.6]]).unwrap();
        assert!((g[0][0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g[0][1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn equal_distributions_give_half() {
        let p = vec![0.1, 0.3, 0.6];
        let d = vec![p.clone(), p];
        let g = optimal_classifier(&d).unwrap();
        assert!(g.iter().flatten().all(|&v| v == 0.5));
        assert!((classifier_objective(&d, &g) + 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(jensen_shannon(&d).abs() < 1e-15);
    }

    #[test]
    fn unnormalized_rejected() {
        assert!(matches!(
            optimal_classifier(&[vec![0.5, 0.6], vec![0.5, 0.5]]),
            Err(EvalError::NotNormalized { index: 0, .. })
        ));
    }
}
