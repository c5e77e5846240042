#![allow(dead_code)]

//! Oracles shared by the integration tests and the acceptance run. Each
//! one recomputes a quantity by a route independent of the library code.

use crn_core::autodiff::{AutodiffError, Tape, Tensor, Var};
use crn_core::data::Trajectory;
use crn_core::experiment::{simulate_splits, SimulatedSplits, SplitSizes};
use crn_core::models::{msm_features, LogisticModel, MsmPropensities};
use crn_core::rng::stream;
use crn_core::sim::SimConfig;
use rand::Rng;

// ---------------------------------------------------------------- autodiff

/// Operand of a graph node: a parameter leaf or an earlier node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Ref {
    P(usize),
    N(usize),
}

#[derive(Clone, Debug)]
pub enum Op {
    Sigmoid(Ref),
    Tanh(Ref),
    Elu(Ref),
    Softmax(Ref),
    LogSoftmax(Ref),
    /// `log(sigmoid(x))`, keeping the argument of `log` positive.
    LogSigmoid(Ref),
    Square(Ref),
    Scale(Ref, f64),
    Add(Ref, Ref),
    Sub(Ref, Ref),
    Mul(Ref, Ref),
    MatMul(Ref, Ref),
    AddRow(Ref, Ref),
    Concat(Ref, Ref),
    ConcatRows(Ref, Ref),
    SliceCols(Ref, usize, usize),
    MaskedSum(Ref, Tensor),
    Sum(Ref),
    Mean(Ref),
}

/// A random differentiable expression over `params`, built from every
/// primitive except gradient reversal (which is deliberately not a true
/// derivative). The loss is a fixed random weighting of the last node.
#[derive(Clone, Debug)]
pub struct Program {
    pub params: Vec<Tensor>,
    pub ops: Vec<Op>,
    pub loss_mask: Tensor,
}

fn random_tensor<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect())
}

/// `None` marks a rank-0 scalar.
type Shape = Option<(usize, usize)>;

impl Program {
    pub fn random(seed: u64) -> Program {
        let mut rng = stream(seed, &[0xF0]);
        let mut params: Vec<Tensor> = Vec::new();
        let mut pshape: Vec<Shape> = Vec::new();
        let mut nshape: Vec<Shape> = Vec::new();
        let mut ops = Vec::new();
        for _ in 0..rng.random_range(2..=3) {
            let (r, c) = (rng.random_range(1..=4), rng.random_range(1..=4));
            params.push(random_tensor(r, c, &mut rng));
            pshape.push(Some((r, c)));
        }
        let n_ops = rng.random_range(4..=10);
        while ops.len() < n_ops {
            let all: Vec<(Ref, Shape)> = pshape
                .iter()
                .enumerate()
                .map(|(i, s)| (Ref::P(i), *s))
                .chain(nshape.iter().enumerate().map(|(i, s)| (Ref::N(i), *s)))
                .collect();
            let (a, sa) = if !nshape.is_empty() && rng.random_bool(0.6) {
                *all.last().unwrap()
            } else {
                all[rng.random_range(0..all.len())]
            };
            let partner = |rng: &mut rand_chacha::ChaCha8Rng, pred: &dyn Fn(Shape) -> bool| -> Option<(Ref, Shape)> {
                let c: Vec<(Ref, Shape)> = all.iter().copied().filter(|(_, s)| pred(*s)).collect();
                (!c.is_empty()).then(|| c[rng.random_range(0..c.len())])
            };
            let mut fresh = |r: usize, c: usize, rng: &mut rand_chacha::ChaCha8Rng| {
                params.push(random_tensor(r, c, rng));
                pshape.push(Some((r, c)));
                Ref::P(params.len() - 1)
            };
            let choice = rng.random_range(0..19);
            let built: Option<(Op, Shape)> = match (choice, sa) {
                (0, s) => Some((Op::Sigmoid(a), s)),
                (1, s) => Some((Op::Tanh(a), s)),
                (2, s) => Some((Op::Elu(a), s)),
                (5, s) => Some((Op::LogSigmoid(a), s)),
                (6, s) => Some((Op::Square(a), s)),
                (7, s) => Some((Op::Scale(a, rng.random_range(-2.0..2.0)), s)),
                (8..=10, s) => partner(&mut rng, &|x| x == s).map(|(b, _)| {
                    let op = match choice {
                        8 => Op::Add(a, b),
                        9 => Op::Sub(a, b),
                        _ => Op::Mul(a, b),
                    };
                    (op, s)
                }),
                (3, Some(s)) => Some((Op::Softmax(a), Some(s))),
                (4, Some(s)) => Some((Op::LogSoftmax(a), Some(s))),
                (11 | 12, Some((r, c))) => {
                    let k = rng.random_range(1..=4);
                    let b = match partner(&mut rng, &|x| matches!(x, Some((rr, _)) if rr == c)) {
                        Some((b, Some((_, kk)))) if rng.random_bool(0.5) => (b, kk),
                        _ => (fresh(c, k, &mut rng), k),
                    };
                    Some((Op::MatMul(a, b.0), Some((r, b.1))))
                }
                (13, Some((r, c))) => {
                    let b = match partner(&mut rng, &|x| x.is_none() && c == 1) {
                        Some((b, _)) => b,
                        None => fresh(1, c, &mut rng),
                    };
                    Some((Op::AddRow(a, b), Some((r, c))))
                }
                (14, Some((r, c))) => partner(&mut rng, &|x| matches!(x, Some((rr, _)) if rr == r))
                    .map(|(b, s)| (Op::Concat(a, b), Some((r, c + s.unwrap().1)))),
                (15, Some((r, c))) => partner(&mut rng, &|x| matches!(x, Some((_, cc)) if cc == c))
                    .map(|(b, s)| (Op::ConcatRows(a, b), Some((r + s.unwrap().0, c)))),
                (16, Some((r, c))) if c >= 2 => {
                    let start = rng.random_range(0..c - 1);
                    let end = rng.random_range(start + 1..=c);
                    Some((Op::SliceCols(a, start, end), Some((r, end - start))))
                }
                (17, Some((r, c))) => Some((Op::MaskedSum(a, random_tensor(r, c, &mut rng)), None)),
                (18, Some(_)) if rng.random_bool(0.5) => Some((Op::Sum(a), None)),
                (18, Some(_)) => Some((Op::Mean(a), None)),
                _ => None,
            };
            if let Some((op, s)) = built {
                ops.push(op);
                nshape.push(s);
            }
        }
        let loss_mask = match nshape.last().unwrap() {
            Some((r, c)) => random_tensor(*r, *c, &mut rng),
            None => Tensor::scalar(rng.random_range(0.5..1.5)),
        };
        Program { params, ops, loss_mask }
    }

    /// Builds the expression on `tape`; returns the scalar loss and the
    /// parameter leaves.
    pub fn build<'t>(&self, tape: &'t Tape, values: &[Tensor]) -> Result<(Var<'t>, Vec<Var<'t>>), AutodiffError> {
        self.build_with(tape, values, &|v| v)
    }

    /// As `build`, with every parameter passed through `wrap` before use.
    pub fn build_with<'t>(
        &self,
        tape: &'t Tape,
        values: &[Tensor],
        wrap: &dyn Fn(Var<'t>) -> Var<'t>,
    ) -> Result<(Var<'t>, Vec<Var<'t>>), AutodiffError> {
        let leaves: Vec<Var<'t>> = values.iter().map(|v| tape.param(v.clone())).collect();
        let used: Vec<Var<'t>> = leaves.iter().map(|&v| wrap(v)).collect();
        let mut nodes: Vec<Var<'t>> = Vec::new();
        for op in &self.ops {
            let g = |r: &Ref| match *r {
                Ref::P(i) => used[i],
                Ref::N(i) => nodes[i],
            };
            let v = match op {
                Op::Sigmoid(a) => g(a).sigmoid(),
                Op::Tanh(a) => g(a).tanh(),
                Op::Elu(a) => g(a).elu(),
                Op::Softmax(a) => g(a).softmax(),
                Op::LogSoftmax(a) => g(a).log_softmax(),
                Op::LogSigmoid(a) => g(a).sigmoid().log(),
                Op::Square(a) => g(a).square(),
                Op::Scale(a, s) => g(a).scale(*s),
                Op::Add(a, b) => g(a).add(g(b))?,
                Op::Sub(a, b) => g(a).sub(g(b))?,
                Op::Mul(a, b) => g(a).mul(g(b))?,
                Op::MatMul(a, b) => g(a).matmul(g(b))?,
                Op::AddRow(a, b) => g(a).add_row(g(b))?,
                Op::Concat(a, b) => Var::concat(&[g(a), g(b)])?,
                Op::ConcatRows(a, b) => Var::concat_rows(&[g(a), g(b)])?,
                Op::SliceCols(a, s, e) => g(a).slice_cols(*s, *e)?,
                Op::MaskedSum(a, m) => g(a).masked_sum(m)?,
                Op::Sum(a) => g(a).sum(),
                Op::Mean(a) => g(a).mean(),
            };
            nodes.push(v);
        }
        let loss = nodes.last().copied().unwrap_or(used[0]).masked_sum(&self.loss_mask)?;
        Ok((loss, leaves))
    }

    pub fn value(&self, values: &[Tensor]) -> f64 {
        let tape = Tape::new();
        self.build(&tape, values).expect("program builds").0.item()
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Worst relative error between tape gradients and central differences
/// with step `h` over every parameter entry.
pub fn finite_difference_error(program: &Program, h: f64, floor: f64) -> f64 {
    let tape = Tape::new();
    let (loss, leaves) = program.build(&tape, &program.params).expect("program builds");
    let grads = tape.backward(loss).expect("backward");
    let mut worst: f64 = 0.0;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get_or_zeros(*leaf);
        for k in 0..program.params[i].len() {
            let mut plus = program.params.clone();
            plus[i].data_mut()[k] += h;
            let mut minus = program.params.clone();
            minus[i].data_mut()[k] -= h;
            let numeric = (program.value(&plus) - program.value(&minus)) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[k], numeric, floor));
        }
    }
    worst
}

// ---------------------------------------------------------------- weights

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Probability from a fitted logistic model, evaluated from its stored
/// standardization and coefficients.
pub fn logistic_probability(m: &LogisticModel, x: &[f64]) -> f64 {
    let mut z = m.coef[0];
    for j in 0..x.len() {
        z += m.coef[j + 1] * ((x[j] - m.mean[j]) / m.std[j]);
    }
    logistic(z)
}

/// Per-day stabilized-weight factor recomputed from the propensity models.
pub fn iptw_factor(p: &MsmPropensities, tr: &Trajectory, t: usize) -> f64 {
    let num_x = msm_features(tr, t, false);
    let den_x = msm_features(tr, t, true);
    let a = [tr.treatments[t].chemo(), tr.treatments[t].radio()];
    let mut f = 1.0;
    for k in 0..2 {
        let pn = logistic_probability(&p.numerator[k], &num_x);
        let pd = logistic_probability(&p.denominator[k], &den_x);
        f *= if a[k] { pn / pd } else { (1.0 - pn) / (1.0 - pd) };
    }
    f
}

/// Stepwise accumulation: multiply one factor at a time into a running
/// weight, restarting at each anchor.
pub fn stepwise_weight(factors: &[f64], t: usize, tau: usize) -> f64 {
    let mut w = 1.0;
    let mut n = t;
    while n < t + tau {
        w *= factors[n];
        n += 1;
    }
    w
}

// ---------------------------------------------------------------- regression

/// Closed-form weighted least squares on `[1, x1, x2]`: the 3x3 normal
/// equations solved by Cramer's rule.
pub fn cramer_wls3(x1: &[f64], x2: &[f64], y: &[f64], w: &[f64]) -> [f64; 3] {
    let mut a = [[0.0; 3]; 3];
    let mut b = [0.0; 3];
    for i in 0..y.len() {
        let row = [1.0, x1[i], x2[i]];
        for r in 0..3 {
            b[r] += w[i] * row[r] * y[i];
            for c in 0..3 {
                a[r][c] += w[i] * row[r] * row[c];
            }
        }
    }
    let det3 = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det3(&a);
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let mut m = a;
        for r in 0..3 {
            m[r][k] = b[r];
        }
        *o = det3(&m) / d;
    }
    out
}

// ---------------------------------------------------------------- data

/// Desk-scale splits (1000/200/200 patients, 60 days) for one gamma and seed.
pub fn desk_splits(gamma: f64, seed: u64) -> SimulatedSplits {
    simulate_splits(&SimConfig::new(gamma, 1, seed), SplitSizes::desk()).expect("simulation")
}

pub fn small_splits(gamma: f64, seed: u64, train: usize) -> SimulatedSplits {
    let mut sim = SimConfig::new(gamma, 1, seed);
    sim.max_timesteps = 30;
    simulate_splits(
        &sim,
        SplitSizes {
            train,
            validation: train / 4 + 2,
            test: train / 4 + 2,
        },
    )
    .expect("simulation")
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
