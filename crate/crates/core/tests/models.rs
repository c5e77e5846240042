mod common;

use common::{cramer_wls3, iptw_factor, small_splits, stepwise_weight};
use crn_core::data::{Standardizer, Trajectory, Treatment};
use crn_core::eval::evaluate_branches;
use crn_core::experiment::SimulatedSplits;
use crn_core::models::{
    encode, encoder_batch, stabilized_weight_product, stabilized_weights_cumulative, weighted_least_squares,
    LinearModel, MsmModel, MsmPropensities, SeqHyper, SeqNet, WeightClip, DECODER_INPUT,
    ENCODER_INPUT,
};
use crn_core::rng::stream;
use crn_core::train::{decoder_batch, extract_representations, make_decoder_windows};

fn hyper(hidden: usize, repr: usize) -> SeqHyper {
    SeqHyper {
        hidden,
        repr,
        fc_hidden: 5,
        dropout: 0.0,
    }
}

fn trajectories(gamma: f64, n: usize) -> Vec<Trajectory> {
    SimulatedSplits::trajectories(&small_splits(gamma, 4, n).train)
}

#[test]
fn weight_routes_agree_with_recomputed_factors() {
    let trs = trajectories(6.0, 100);
    let props = MsmPropensities::fit(&trs);
    for tr in &trs {
        let factors = props.step_factors(tr);
        for t in 0..tr.len() {
            let f = iptw_factor(&props, tr, t);
            assert!((factors[t] - f).abs() <= 1e-12 * f.abs().max(1.0));
        }
        let cumulative = stabilized_weights_cumulative(&factors, 5);
        for t in 0..tr.len() {
            for tau in 1..=5.min(tr.len() - t) {
                let direct = stabilized_weight_product(&factors, t, tau);
                let step = stepwise_weight(&factors, t, tau);
                assert!((direct - step).abs() <= 1e-12 * step.abs());
                assert!((cumulative[t][tau - 1] - step).abs() <= 1e-12 * step.abs());
            }
        }
    }
}

#[test]
fn weighted_regression_matches_normal_equations() {
    let trs = trajectories(5.0, 2);
    let props = MsmPropensities::fit(&trs);
    let (mut x1, mut x2, mut y, mut w) = (vec![], vec![], vec![], vec![]);
    for tr in &trs {
        for t in 0..tr.len() {
            x1.push(tr.volumes[t]);
            x2.push(if tr.treatments[t].chemo() { 1.0 } else { 0.0 });
            y.push(tr.outcomes[t]);
            w.push(iptw_factor(&props, tr, t));
        }
    }
    let rows: Vec<Vec<f64>> = x1.iter().zip(&x2).map(|(a, b)| vec![1.0, *a, *b]).collect();
    let beta = weighted_least_squares(&rows, &y, &w).unwrap();
    let oracle = cramer_wls3(&x1, &x2, &y, &w);
    for k in 0..3 {
        assert!((beta[k] - oracle[k]).abs() <= 1e-8 * oracle[k].abs().max(1.0), "{beta:?} {oracle:?}");
    }
}

#[test]
fn msm_and_linear_agree_without_confounding() {
    let s = small_splits(0.0, 8, 300);
    let train = SimulatedSplits::trajectories(&s.train);
    let test = SimulatedSplits::trajectories(&s.test);
    let lin = LinearModel::fit(&train, 2).unwrap();
    let msm = MsmModel::fit(&train, 2, Some(WeightClip::default())).unwrap();
    // randomized treatment: the weights hover around one
    for (lo, hi) in &msm.weight_bounds {
        assert!(*lo > 0.8 && *hi < 1.25, "{lo} {hi}");
    }
    for tau in [1, 2] {
        let br = s.test_branches(tau).unwrap();
        let a = evaluate_branches(&lin, &test, &br).unwrap();
        let b = evaluate_branches(&msm, &test, &br).unwrap();
        assert!((a - b).abs() < 0.1 * a, "tau {tau}: linear {a} msm {b}");
    }
}

fn decoder_fixture() -> (SeqNet, SeqNet, Vec<Trajectory>, Standardizer) {
    let trs = trajectories(4.0, 6);
    let std = Standardizer::fit(&trs);
    let encoder = SeqNet::new(ENCODER_INPUT, hyper(6, 4), true, &mut stream(1, &[1]));
    let decoder = SeqNet::new(DECODER_INPUT, hyper(4, 4), true, &mut stream(1, &[2]));
    (encoder, decoder, trs, std)
}

#[test]
fn decoder_starts_from_encoder_representation() {
    let (encoder, _, trs, std) = decoder_fixture();
    let reps = extract_representations(&encoder, &trs, &std).unwrap();
    let (windows, skipped) = make_decoder_windows(&trs, &reps, 3);
    assert_eq!(skipped, 0);
    let refs: Vec<_> = windows.iter().collect();
    let batch = decoder_batch(&refs, &std, None);
    let init = batch.init.as_ref().unwrap();
    for (b, w) in windows.iter().enumerate() {
        let phi = encode(&encoder, &trs[w.patient], &std).unwrap();
        assert_eq!(init.row(b), phi.row(w.anchor));
    }
}

#[test]
fn rollout_fed_true_outcomes_equals_teacher_forcing() {
    let (encoder, decoder, trs, std) = decoder_fixture();
    let reps = extract_representations(&encoder, &trs, &std).unwrap();
    let (windows, _) = make_decoder_windows(&trs, &reps, 3);
    let refs: Vec<_> = windows.iter().take(9).collect();
    let n = refs.len();
    let batch = decoder_batch(&refs, &std, None);
    let (_, teacher) = decoder.infer(&batch).unwrap();
    let plans: Vec<_> = (0..3)
        .map(|s| crn_core::models::one_hot_rows(&refs.iter().map(|w| w.treatments[s]).collect::<Vec<_>>()))
        .collect();
    let out = decoder
        .rollout(batch.init.as_ref().unwrap(), batch.inputs[0].clone(), &plans, |s, _| {
            batch.inputs[(s + 1).min(2)].clone()
        })
        .unwrap();
    for s in 0..3 {
        for b in 0..n {
            assert_eq!(out[s][b], teacher.data()[s * n + b], "step {s} window {b}");
        }
    }
    // one-step rollout is the first teacher-forced step whatever is fed next
    let one = decoder
        .rollout(batch.init.as_ref().unwrap(), batch.inputs[0].clone(), &plans[..1], |_, _| {
            batch.inputs[0].clone()
        })
        .unwrap();
    assert_eq!(one[0], teacher.data()[..n]);
}

#[test]
fn batch_order_does_not_change_representations() {
    let (encoder, _, trs, std) = decoder_fixture();
    let refs: Vec<&Trajectory> = trs.iter().collect();
    let rev: Vec<&Trajectory> = trs.iter().rev().collect();
    let (a, _) = encoder.infer(&encoder_batch(&refs, &std, None)).unwrap();
    let (b, _) = encoder.infer(&encoder_batch(&rev, &std, None)).unwrap();
    let n = trs.len();
    for (i, tr) in trs.iter().enumerate() {
        let alone = encode(&encoder, tr, &std).unwrap();
        for t in 0..tr.len() {
            let ra = a.row(t * n + i);
            let rb = b.row(t * n + (n - 1 - i));
            for k in 0..ra.len() {
                assert!((ra[k] - rb[k]).abs() < 1e-12 && (ra[k] - alone.get(t, k)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn recurrent_baseline_parameter_count() {
    let (h, r, f) = (7, 5, 5);
    let input = ENCODER_INPUT + Treatment::COUNT;
    let net = SeqNet::new(input, hyper(h, r), false, &mut stream(0, &[]));
    let lstm = 4 * h * (input + h + 1);
    let phi = (h + 1) * r;
    let head = (r + Treatment::COUNT + 1) * f + (f + 1);
    assert_eq!(net.params.num_scalars(), lstm + phi + head);
    let adversarial = SeqNet::new(input, hyper(h, r), true, &mut stream(0, &[]));
    assert_eq!(adversarial.params.num_scalars(), lstm + phi + head + (r + 1) * f + (f + 1) * Treatment::COUNT);
}
