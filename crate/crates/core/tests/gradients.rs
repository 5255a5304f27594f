#[path = "support/gradient_cases.rs"]
mod gradient_cases;

use eqrecal::transform::identity_grid;
use eqrecal::{Graph, Tensor};
use proptest::prelude::*;

#[test]
fn every_op_matches_central_differences() {
    for c in gradient_cases::op_cases() {
        let e = gradient_cases::check_op(&c, 16);
        assert!(e < 1e-4, "{}: relative error {e:.2e}", c.name);
    }
}

#[test]
fn every_objective_matches_central_differences() {
    let net = gradient_cases::objective_model();
    for (name, f) in gradient_cases::objective_cases() {
        let e = gradient_cases::check_objective(&net, &f, 12);
        assert!(e < 1e-3, "{name}: relative error {e:.2e}");
    }
}

#[test]
fn bilinear_identity_grid_reproduces_input() {
    let x = Tensor::from_fn(&[2, 3, 5, 7], |k| (k as f64 * 0.71).sin());
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (y, mask) = g.bilinear_sample(xv, &identity_grid(2, 5, 7)).unwrap();
    assert!(g.value(y).max_abs_diff(&x) < 1e-12);
    assert_eq!(mask.sum(), (2 * 5 * 7) as f64);
}

#[test]
fn bilinear_outside_reads_zero_and_is_masked() {
    let x = Tensor::full(&[1, 1, 4, 4], 1.0);
    let grid = Tensor::new(vec![1, 1, 2, 2], vec![3.0, 0.0, 0.0, 0.0]).unwrap();
    let mut g = Graph::new();
    let xv = g.param(x);
    let (y, mask) = g.bilinear_sample(xv, &grid).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 1.0]);
    assert_eq!(mask.data(), &[0.0, 1.0]);
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert!((g.grad(xv).unwrap().sum() - 1.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn flip_twice_is_identity(h in 1usize..6, w in 1usize..9, seed in 0u64..1000) {
        let x = Tensor::from_fn(&[1, 2, h, w], |k| ((k as u64 * 31 + seed) % 97) as f64 / 97.0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let once = g.flip_w(xv).unwrap();
        let twice = g.flip_w(once).unwrap();
        prop_assert_eq!(g.value(twice), &x);
    }

    #[test]
    fn softmax_sums_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let x = Tensor::new(vec![1, 3, 2, 2], vals).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let s = g.softmax_channel(xv).unwrap();
        let v = g.value(s);
        for p in 0..4 {
            let total: f64 = (0..3).map(|c| v.data()[c * 4 + p]).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_is_scale_invariant(
        a in proptest::collection::vec(0.1f64..1.0, 6),
        b in proptest::collection::vec(0.1f64..1.0, 6),
        k in 0.01f64..100.0,
    ) {
        let ta = Tensor::new(vec![1, 6, 1, 1], a).unwrap();
        let tb = Tensor::new(vec![1, 6, 1, 1], b).unwrap();
        let mut g = Graph::new();
        let (va, vb) = (g.constant(ta.clone()), g.constant(tb));
        let vs = g.constant(ta.map(|v| v * k));
        let c1 = g.cosine_similarity(va, vb).unwrap();
        let c2 = g.cosine_similarity(vs, vb).unwrap();
        prop_assert!((g.value(c1).item() - g.value(c2).item()).abs() < 1e-12);
        prop_assert!(g.value(c1).item() <= 1.0 + 1e-12);
    }
}
