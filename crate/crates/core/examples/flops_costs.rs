//! Analytic operation counts for the toy, ViT-S and ViT-B models, the
//! rate-machinery overhead and the synthetic accelerator's latency and power.

use diffrate::cost::{
    baseline_flops, flops, stem_and_head_flops, CompressionOrder, CompressionSchedule, CostCoefficients,
    SyntheticCostModel,
};
use diffrate::ddp::{overhead_flops, overhead_parameters};
use diffrate::vit::ModelConfig;

fn main() -> diffrate::Result<()> {
    for (name, cfg) in [
        ("toy", ModelConfig::toy()),
        ("ViT-S", ModelConfig::vit_small()),
        ("ViT-B", ModelConfig::vit_base()),
    ] {
        let n = cfg.token_count() as u64 - 1;
        println!(
            "{name:6} blocks {:>15}  stem+head {:>12}  rate overhead {} params / {} ops",
            baseline_flops(&cfg),
            stem_and_head_flops(&cfg),
            overhead_parameters(n, cfg.depth as u64),
            overhead_flops(n, cfg.depth as u64)
        );
    }

    let toy = ModelConfig::toy();
    let zero = CompressionSchedule::zero(toy.token_count(), toy.depth);
    let half = CompressionSchedule {
        token_count: 17,
        prune_kept: vec![17, 13, 10, 7],
        merge_kept: vec![15, 11, 8, 5],
        order: CompressionOrder::PruneThenMerge,
    };
    let coeffs = CostCoefficients::default();
    let anchor = coeffs.anchor;
    let model = SyntheticCostModel::new(coeffs, &toy);
    for (name, s) in [("zero", &zero), ("compressed", &half)] {
        println!(
            "{name:10} flops {:>7}  latency {:.4} ms  power {:.2} mW",
            flops(s, toy.embed_dim)?,
            model.latency(s, &anchor),
            model.power(s, &anchor)
        );
    }
    Ok(())
}
