//! Search-mode masking against apply-mode token dropping.

mod common;

use common::equivalence::{max_rel, random_image, random_params, search_logits, small, worst_merging, worst_pruning};
use diffrate::autograd::Tape;
use diffrate::cost::CompressionSchedule;
use diffrate::token_ops::{apply_image, SortMetric};
use diffrate::vit::{forward_image, NoCompression};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn pruning_search_equals_apply() {
    let worst = worst_pruning(100);
    assert!(worst <= 1e-10, "max relative difference {worst}");
}

#[test]
fn merging_search_equals_apply() {
    let worst = worst_merging(100);
    assert!(worst <= 1e-8, "max relative difference {worst}");
}

#[test]
fn zero_schedule_matches_uncompressed() {
    let cfg = small();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let p = random_params(&cfg, &mut rng);
    let img = random_image(&cfg, &mut rng);
    let s = CompressionSchedule::zero(cfg.token_count(), cfg.depth);
    let a = apply_image(&p, &s, SortMetric::ClassAttention, &img).unwrap().logits;
    let mut tape = Tape::new();
    let bp = p.bind(&mut tape, false).unwrap();
    let out = forward_image(&mut tape, &cfg, &bp, &img, &mut NoCompression).unwrap();
    let b = tape.value(out.logits).data();
    assert!(max_rel(&a, b) <= 1e-12);
    let c = search_logits(&p, &s, SortMetric::ClassAttention, &img);
    assert!(max_rel(&a, &c) <= 1e-12);
}
