//! Linear outcome regression, logistic propensity models and the marginal
//! structural model that combines them through stabilized inverse
//! probability of treatment weights.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{check_query, ModelError, OutcomeModel};
use crate::data::{Trajectory, Treatment};

/// `[1, planned chemo count, planned radio count, V(t), C(t-1), V(t-1),
/// C(t-2), subgroup 2, subgroup 3]`.
pub const OUTCOME_FEATURES: usize = 9;

/// Covariates at `t` and `t - 1`; at `t = 0` the current ones stand in for
/// the missing previous step.
fn lagged_covariates(tr: &Trajectory, t: usize) -> [f64; 4] {
    let now = tr.covariates(t);
    let prev = tr.covariates(t.saturating_sub(1));
    [now[0], now[1], prev[0], prev[1]]
}

fn subgroup_dummies(tr: &Trajectory) -> [f64; 2] {
    [f64::from(u8::from(tr.subgroup == 2)), f64::from(u8::from(tr.subgroup == 3))]
}

pub fn outcome_features(tr: &Trajectory, t: usize, plan: &[Treatment]) -> [f64; OUTCOME_FEATURES] {
    let chemo = plan.iter().filter(|a| a.chemo()).count() as f64;
    let radio = plan.iter().filter(|a| a.radio()).count() as f64;
    let [v, c, v1, c1] = lagged_covariates(tr, t);
    let [s2, s3] = subgroup_dummies(tr);
    [1.0, chemo, radio, v, c, v1, c1, s2, s3]
}

/// Propensity features at `t`: cumulative treatment counts over days
/// `0..t`, and for the denominator model also the current and previous
/// covariates and the subgroup dummies.
pub fn msm_features(tr: &Trajectory, t: usize, full_history: bool) -> Vec<f64> {
    let chemo = tr.treatments[..t].iter().filter(|a| a.chemo()).count() as f64;
    let radio = tr.treatments[..t].iter().filter(|a| a.radio()).count() as f64;
    let mut row = vec![chemo, radio];
    if full_history {
        row.extend_from_slice(&lagged_covariates(tr, t));
        row.extend_from_slice(&subgroup_dummies(tr));
    }
    row
}

/// Weighted least squares through the normal equations.
pub fn weighted_least_squares(rows: &[Vec<f64>], y: &[f64], w: &[f64]) -> Result<Vec<f64>, ModelError> {
    let p = rows.first().map_or(0, Vec::len);
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    for ((row, &yi), &wi) in rows.iter().zip(y).zip(w) {
        for a in 0..p {
            let wa = wi * row[a];
            xty[a] += wa * yi;
            for b in a..p {
                xtx[(a, b)] += wa * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtx[(a, b)] = xtx[(b, a)];
        }
    }
    let chol = xtx.cholesky().ok_or_else(|| ModelError::Singular {
        what: "outcome regression".into(),
    })?;
    Ok(chol.solve(&xty).iter().copied().collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Linear outcome regression with one coefficient vector per horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    /// `coefficients[tau - 1]` has [`OUTCOME_FEATURES`] entries.
    pub coefficients: Vec<Vec<f64>>,
}

/// Factual training rows of horizon `tau`: `(patient index, anchor)`.
fn horizon_samples(trajectories: &[Trajectory], tau: usize) -> Vec<(usize, usize)> {
    trajectories
        .iter()
        .enumerate()
        .flat_map(|(i, tr)| (0..tr.len()).filter(move |&t| t + tau <= tr.len()).map(move |t| (i, t)))
        .collect()
}

impl LinearModel {
    /// Unweighted fit for horizons `1..=tau_max`.
    pub fn fit(trajectories: &[Trajectory], tau_max: usize) -> Result<Self, ModelError> {
        Self::fit_weighted(trajectories, tau_max, |_, _, _| 1.0)
    }

    /// Fit with per-sample weights `weight(patient index, t, tau)`.
    pub fn fit_weighted(
        trajectories: &[Trajectory],
        tau_max: usize,
        weight: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<Self, ModelError> {
        let mut coefficients = Vec::with_capacity(tau_max);
        for tau in 1..=tau_max {
            let samples = horizon_samples(trajectories, tau);
            let mut rows = Vec::with_capacity(samples.len());
            let mut y = Vec::with_capacity(samples.len());
            let mut w = Vec::with_capacity(samples.len());
            for &(i, t) in &samples {
                let tr = &trajectories[i];
                rows.push(outcome_features(tr, t, &tr.treatments[t..t + tau]).to_vec());
                y.push(tr.outcomes[t + tau - 1]);
                w.push(weight(i, t, tau));
            }
            coefficients.push(weighted_least_squares(&rows, &y, &w).map_err(|_| ModelError::Singular {
                what: format!("outcome regression for horizon {tau}"),
            })?);
        }
        Ok(Self { coefficients })
    }

    pub fn predict_one(&self, tr: &Trajectory, t: usize, plan: &[Treatment]) -> f64 {
        dot(&self.coefficients[plan.len() - 1], &outcome_features(tr, t, plan))
    }
}

impl OutcomeModel for LinearModel {
    fn name(&self) -> String {
        "linear".into()
    }

    fn max_horizon(&self) -> usize {
        self.coefficients.len()
    }

    fn predict(
        &self,
        trajectory: &Trajectory,
        anchors: &[usize],
        plans: &[Vec<Treatment>],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        check_query(trajectory, anchors, plans, self.max_horizon())?;
        Ok(anchors
            .iter()
            .map(|&t| plans.iter().map(|p| self.predict_one(trajectory, t, p)).collect())
            .collect())
    }
}

/// Logistic regression on standardized features with an intercept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Intercept first, then one coefficient per standardized feature.
    pub coef: Vec<f64>,
}

impl LogisticModel {
    pub fn probability(&self, x: &[f64]) -> f64 {
        let mut z = self.coef[0];
        for (j, v) in x.iter().enumerate() {
            z += self.coef[j + 1] * (v - self.mean[j]) / self.std[j];
        }
        crate::autodiff::sigmoid(z)
    }
}

/// Full-batch gradient descent on the mean log-loss plus `l2 / 2 * |w|²`
/// (intercept not penalized).
pub fn fit_logistic(rows: &[Vec<f64>], y: &[f64], l2: f64, max_iters: usize) -> LogisticModel {
    let p = rows.first().map_or(0, Vec::len);
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0.0; p];
    let mut std = vec![0.0; p];
    for row in rows {
        for j in 0..p {
            mean[j] += row[j] / n;
        }
    }
    for row in rows {
        for j in 0..p {
            std[j] += (row[j] - mean[j]).powi(2) / n;
        }
    }
    for s in &mut std {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    let z: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let mut v = Vec::with_capacity(p + 1);
            v.push(1.0);
            v.extend(r.iter().enumerate().map(|(j, x)| (x - mean[j]) / std[j]));
            v
        })
        .collect();
    let mut coef = vec![0.0; p + 1];
    // curvature of the mean log-loss is at most 1/4 of the feature second
    // moment, so this rate is safe for standardized features
    let lr = 4.0 / (1.0 + p as f64);
    for _ in 0..max_iters {
        let mut grad = vec![0.0; p + 1];
        for (row, &yi) in z.iter().zip(y) {
            let r = crate::autodiff::sigmoid(dot(&coef, row)) - yi;
            for j in 0..=p {
                grad[j] += r * row[j] / n;
            }
        }
        for j in 1..=p {
            grad[j] += l2 * coef[j];
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        for j in 0..=p {
            coef[j] -= lr * grad[j];
        }
        if norm < 1e-9 {
            break;
        }
    }
    LogisticModel { mean, std, coef }
}

/// Numerator and denominator propensity models for each binary treatment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsmPropensities {
    pub numerator: [LogisticModel; 2],
    pub denominator: [LogisticModel; 2],
}

pub const LOGISTIC_L2: f64 = 1e-4;
const LOGISTIC_ITERS: usize = 3000;

impl MsmPropensities {
    pub fn fit(trajectories: &[Trajectory]) -> Self {
        let mut num_rows = Vec::new();
        let mut den_rows = Vec::new();
        let mut labels = [Vec::new(), Vec::new()];
        for tr in trajectories {
            for t in 0..tr.len() {
                num_rows.push(msm_features(tr, t, false));
                den_rows.push(msm_features(tr, t, true));
                let [c, r] = tr.treatments[t].flags();
                labels[0].push(c);
                labels[1].push(r);
            }
        }
        let fit = |rows: &[Vec<f64>], k: usize| fit_logistic(rows, &labels[k], LOGISTIC_L2, LOGISTIC_ITERS);
        Self {
            numerator: [fit(&num_rows, 0), fit(&num_rows, 1)],
            denominator: [fit(&den_rows, 0), fit(&den_rows, 1)],
        }
    }

    /// Per-day factors `prod_k f(a_k | treatment history) / f(a_k | full history)`.
    pub fn step_factors(&self, tr: &Trajectory) -> Vec<f64> {
        (0..tr.len())
            .map(|t| {
                let num_x = msm_features(tr, t, false);
                let den_x = msm_features(tr, t, true);
                let flags = tr.treatments[t].flags();
                (0..2)
                    .map(|k| {
                        let pn = self.numerator[k].probability(&num_x);
                        let pd = self.denominator[k].probability(&den_x);
                        let (n, d) = if flags[k] == 1.0 { (pn, pd) } else { (1.0 - pn, 1.0 - pd) };
                        n / d
                    })
                    .product()
            })
            .collect()
    }
}

/// `SW(t, tau) = prod_{n=t}^{t+tau-1} factors[n]`, multiplied out directly.
pub fn stabilized_weight_product(factors: &[f64], t: usize, tau: usize) -> f64 {
    factors[t..t + tau].iter().product()
}

/// Every `SW(t, tau)` for `t + tau <= factors.len()` from one pass of
/// running products: `SW(t, tau) = P(t + tau) / P(t)` with `P(n)` the
/// product of the first `n` factors. Returns `[t][tau - 1]`.
pub fn stabilized_weights_cumulative(factors: &[f64], tau_max: usize) -> Vec<Vec<f64>> {
    let mut running = Vec::with_capacity(factors.len() + 1);
    running.push(1.0);
    for f in factors {
        running.push(running.last().copied().unwrap_or(1.0) * f);
    }
    (0..factors.len())
        .map(|t| {
            (1..=tau_max)
                .take_while(|tau| t + tau <= factors.len())
                .map(|tau| running[t + tau] / running[t])
                .collect()
        })
        .collect()
}

/// Linear-interpolated percentile (`q` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Percentile bounds used to truncate stabilized weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightClip {
    pub lower_percentile: f64,
    pub upper_percentile: f64,
}

impl Default for WeightClip {
    fn default() -> Self {
        Self {
            lower_percentile: 1.0,
            upper_percentile: 99.0,
        }
    }
}

/// Clips `weights` in place to the configured percentiles of their own
/// distribution; returns the bounds.
pub fn clip_weights(weights: &mut [f64], clip: WeightClip) -> (f64, f64) {
    let lo = percentile(weights, clip.lower_percentile);
    let hi = percentile(weights, clip.upper_percentile);
    for w in weights.iter_mut() {
        *w = w.clamp(lo, hi);
    }
    (lo, hi)
}

/// Marginal structural model: the linear outcome regression fit with
/// truncated stabilized weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsmModel {
    pub propensities: MsmPropensities,
    pub outcome: LinearModel,
    /// Truncation bounds used for each horizon.
    pub weight_bounds: Vec<(f64, f64)>,
    pub clip: Option<WeightClip>,
}

impl MsmModel {
    pub fn fit(trajectories: &[Trajectory], tau_max: usize, clip: Option<WeightClip>) -> Result<Self, ModelError> {
        let propensities = MsmPropensities::fit(trajectories);
        let sw: Vec<Vec<Vec<f64>>> = trajectories
            .iter()
            .map(|tr| stabilized_weights_cumulative(&propensities.step_factors(tr), tau_max))
            .collect();
        let mut weight_bounds = Vec::with_capacity(tau_max);
        let mut clipped = sw.clone();
        for tau in 1..=tau_max {
            let mut all: Vec<f64> = sw
                .iter()
                .flat_map(|p| p.iter().filter_map(move |w| w.get(tau - 1).copied()))
                .collect();
            let bounds = match clip {
                Some(c) if !all.is_empty() => clip_weights(&mut all, c),
                _ => (f64::NEG_INFINITY, f64::INFINITY),
            };
            for p in &mut clipped {
                for w in p.iter_mut().filter_map(|w| w.get_mut(tau - 1)) {
                    *w = w.clamp(bounds.0, bounds.1);
                }
            }
            weight_bounds.push(bounds);
        }
        let outcome = LinearModel::fit_weighted(trajectories, tau_max, |i, t, tau| clipped[i][t][tau - 1])?;
        Ok(Self {
            propensities,
            outcome,
            weight_bounds,
            clip,
        })
    }
}

impl OutcomeModel for MsmModel {
    fn name(&self) -> String {
        "msm".into()
    }

    fn max_horizon(&self) -> usize {
        self.outcome.max_horizon()
    }

    fn predict(
        &self,
        trajectory: &Trajectory,
        anchors: &[usize],
        plans: &[Vec<Treatment>],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        self.outcome.predict(trajectory, anchors, plans)
    }
}
