//! Analytic operation counts against the instrumented apply path, published
//! model-scale numbers, and the rate-machinery overhead.

mod common;

use diffrate::cost::{baseline_flops, flops, stem_and_head_flops, CompressionOrder, CompressionSchedule};
use diffrate::ddp::{overhead_flops, overhead_parameters};
use diffrate::harness::pipeline::Overhead;
use diffrate::vit::ModelConfig;

#[test]
fn analytic_flops_equal_counted_macs_exhaustively() {
    assert_eq!(common::flops::exhaustive(), (2 * 2 * 2 * (16 + 256 + 4096), 0));
}

#[test]
fn vit_base_zero_schedule() {
    let f = baseline_flops(&ModelConfig::vit_base()) as f64;
    assert_eq!(f, 17_447_454_720.0);
    assert!((f - 17.6e9).abs() / 17.6e9 <= 0.02);
}

#[test]
fn vit_small_searched_schedule() {
    let cfg = ModelConfig::vit_small();
    let s = CompressionSchedule {
        token_count: 197,
        prune_kept: vec![197, 196, 190, 168, 150, 139, 129, 117, 99, 78, 58, 3],
        merge_kept: vec![197, 194, 176, 156, 141, 133, 121, 107, 88, 64, 56, 3],
        order: CompressionOrder::PruneThenMerge,
    };
    let blocks = flops(&s, cfg.embed_dim).unwrap() as f64;
    let total = blocks + stem_and_head_flops(&cfg) as f64;
    assert!((blocks - 2.9e9).abs() / 2.9e9 <= 0.05, "{blocks}");
    assert!((total - 2.9e9).abs() / 2.9e9 <= 0.05, "{total}");
}

#[test]
fn overhead_closed_forms() {
    assert_eq!(overhead_parameters(196, 12), 4704);
    assert_eq!(overhead_flops(196, 12), 236_376);
    let o = Overhead::new(196, 12);
    assert_eq!((o.parameters, o.flops), (4704, 236_376));
    // Brute-force count of the mask machinery: a reverse cumulative sum
    // (N(N+1)/2 adds), N products for the expectation, and N each for the
    // softmax exponentials, normalisation, and comparison.
    let n = 196u64;
    assert_eq!((n * (n + 1) / 2 + 2 * n) * 12, overhead_flops(n, 12));
}
