//! Gradient oracles: finite differences for every primitive and the hand
//! chain for the rate logits.

mod common;

use common::gradients::{chain_errors, primitive_errors};
use diffrate::autograd::{Tape, Tensor, Var};
use diffrate::cost::expected_hw_alpha;

#[test]
fn primitives_match_finite_differences() {
    let errors = primitive_errors();
    assert!(errors.len() >= 35);
    for (name, e) in errors {
        assert!(e <= 1e-6, "{name}: relative gradient error {e:.3e}");
    }
}

#[test]
fn rate_logit_gradient_matches_hand_chain() {
    for (i, e) in chain_errors().into_iter().enumerate() {
        assert!(e <= 1e-8, "rate {i}: relative error {e:.3e}");
    }
}

#[test]
fn hardware_expectation_is_straight_through() {
    let alphas: Vec<Tensor> = [0.1, 0.35, 0.6].iter().map(|&x| Tensor::scalar(x)).collect();
    // Straight-through by construction: value fixed at the block costs,
    // gradient -F'_l per rate.
    let mut t = Tape::new();
    let vs: Vec<Var> = alphas.iter().map(|a| t.param(a.clone()).unwrap()).collect();
    let e = expected_hw_alpha(&mut t, &vs, &[0.3, 0.2, 0.1]).unwrap();
    assert!((t.item(e) - 0.6).abs() < 1e-15);
    let g = t.backward(e).unwrap();
    for (v, c) in vs.iter().zip([0.3, 0.2, 0.1]) {
        assert!((g.get(*v).unwrap().item() + c).abs() < 1e-15);
    }
}
