mod common;

use common::{finite_difference_error, Program};
use crn_core::autodiff::{variational_dropout_mask, Tape, Tensor};
use crn_core::rng::stream;
use proptest::prelude::*;

#[test]
fn random_graphs_match_finite_differences() {
    for seed in 0..30 {
        let p = Program::random(seed);
        let err = finite_difference_error(&p, 1e-5, 1e-3);
        assert!(err < 1e-5, "graph {seed}: {err:e}\n{:?}", p.ops);
    }
}

#[test]
fn reversal_inside_a_composition() {
    // f(x) = sum(tanh(GRL(W x)) * m): the reversed part flips only the
    // gradient flowing into W and x.
    let w = Tensor::matrix(2, 3, vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4]);
    let x = Tensor::matrix(3, 2, vec![1.0, -1.0, 0.5, 0.2, -0.3, 0.8]);
    let mask = Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 0.5]);
    let grads = |lambda: Option<f64>| {
        let tape = Tape::new();
        let (wv, xv) = (tape.param(w.clone()), tape.param(x.clone()));
        let mut h = wv.matmul(xv).unwrap();
        if let Some(l) = lambda {
            h = h.reverse_grad(l);
        }
        let b = tape.param(Tensor::matrix(1, 2, vec![0.1, -0.1]));
        let loss = h.tanh().add_row(b).unwrap().masked_sum(&mask).unwrap();
        let g = tape.backward(loss).unwrap();
        (g.get_or_zeros(wv), g.get_or_zeros(xv), g.get_or_zeros(b), loss.item())
    };
    let base = grads(None);
    for lambda in [0.0, 0.25, 1.0, 4.0] {
        let rev = grads(Some(lambda));
        assert_eq!(rev.3.to_bits(), base.3.to_bits());
        for (r, b) in rev.0.data().iter().zip(base.0.data()).chain(rev.1.data().iter().zip(base.1.data())) {
            assert!((r + lambda * b).abs() <= 1e-12);
        }
        // the bias sits after the reversal and is unaffected
        assert_eq!(rev.2, base.2);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.7).sin() * 20.0).collect()));
    let p = x.softmax().value();
    for r in 0..3 {
        let s: f64 = p.row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn gradients_are_deterministic() {
    let p = Program::random(99);
    let run = || {
        let tape = Tape::new();
        let (loss, leaves) = p.build(&tape, &p.params).unwrap();
        let g = tape.backward(loss).unwrap();
        leaves.iter().map(|l| g.get_or_zeros(*l)).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn dropout_mask_keeps_unit_mean() {
    let mut rng = stream(5, &[1]);
    let m = variational_dropout_mask(200, 100, 0.3, &mut rng);
    let mean = m.data().iter().sum::<f64>() / m.len() as f64;
    // 20000 entries, each 0 or 1/0.7: sd of the mean about 0.0046
    assert!((mean - 1.0).abs() < 0.02, "{mean}");
    assert!(m.data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]
    #[test]
    fn any_seeded_graph_matches_finite_differences(seed in 1000u64..1_000_000) {
        let p = Program::random(seed);
        let err = finite_difference_error(&p, 1e-5, 1e-3);
        prop_assert!(err < 1e-5, "{err:e}");
    }
}
