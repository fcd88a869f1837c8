//! Finite-difference checks for every differentiable op, ten seeded probe
//! points each.

mod support;

use proptest::prelude::*;
use raliflow_tensor::{Graph, Tensor};
use support::ops::{catalogue, Lcg, SEEDS};

#[test]
fn every_op_passes_finite_differences() {
    for (name, check) in catalogue() {
        for seed in 0..SEEDS {
            let rep = check(seed);
            assert!(rep.passed(), "{name} seed {seed}: {rep:?}");
            assert!(rep.checked > 0, "{name}");
        }
    }
}

#[test]
fn backward_is_bitwise_deterministic() {
    let mut rng = Lcg(3);
    let a = rng.tensor(&[6, 5]);
    let b = rng.tensor(&[5, 4]);
    let run = || {
        let mut g = Graph::new();
        let av = g.input(a.clone());
        let bv = g.input(b.clone());
        let y = g.matmul(av, bv).unwrap();
        let s = g.softmax(y, 1).unwrap();
        let t = g.tanh(s);
        let l = g.sum_all(t);
        let grads = g.backward(l).unwrap();
        (
            grads.get(av).unwrap().clone(),
            grads.get(bv).unwrap().clone(),
        )
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_permute(logits in proptest::collection::vec(-50.0f64..50.0, 2..9), shift in 0usize..8) {
        let n = logits.len();
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(logits.clone()));
        let y = g.softmax(x, 0).unwrap();
        let total: f64 = g.value(y).data().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);

        let perm: Vec<f64> = (0..n).map(|i| logits[(i + shift) % n]).collect();
        let xp = g.constant(Tensor::vector(perm));
        let yp = g.softmax(xp, 0).unwrap();
        for i in 0..n {
            let (a, b) = (g.value(yp).data()[i], g.value(y).data()[(i + shift) % n]);
            // the normaliser is summed in a different order, so allow an ulp or two
            prop_assert!((a - b).abs() <= 1e-14 * a.abs().max(b.abs()));
        }
    }
}
