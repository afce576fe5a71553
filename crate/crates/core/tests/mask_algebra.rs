//! Structural properties of token-level probabilities and masks over random
//! points of the probability simplex.

mod common;

#[test]
fn random_simplex_draws() {
    common::masks::simplex_draws(10_000);
}

#[test]
fn one_hot_rates_are_exact() {
    common::masks::one_hot(64);
}
