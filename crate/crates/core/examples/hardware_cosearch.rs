//! Jointly searches compression rates and an accelerator configuration for a
//! latency target on the synthetic cost model.

use diffrate::cost::{CompressionSchedule, CostCoefficients, SyntheticCostModel};
use diffrate::search::{cosearch_hw, SearchConfig};
use diffrate::vit::ModelConfig;

mod common;

fn main() -> diffrate::Result<()> {
    let (tr, _, backbone) = common::trained_toy()?;
    let config = ModelConfig::toy();

    let coeffs = CostCoefficients::default();
    let space = coeffs.space();
    let anchor = coeffs.anchor;
    let model = SyntheticCostModel::new(coeffs, &config);
    let zero = CompressionSchedule::zero(config.token_count(), config.depth);
    let full = model.latency(&zero, &anchor);

    let cfg = SearchConfig {
        target_latency: Some(0.85 * full),
        epochs: 3,
        hw_steps: 10,
        ..SearchConfig::default()
    };
    let out = cosearch_hw(&backbone, &tr.images, &tr.labels, &cfg, &model, &space, None)?;
    for r in &out.rounds {
        println!("round {}: latency {:.4} ms, power {:.2} mW, loss {:.4}", r.round, r.latency, r.power, r.loss);
    }
    let hw = out.search.hw.expect("co-search selects hardware");
    println!("uncompressed latency at anchor {full:.4} ms, target {:.4} ms", 0.85 * full);
    println!("chosen hardware {hw:?}");
    println!(
        "schedule {:?} / {:?}: latency {:.4} ms, power {:.2} mW",
        out.search.schedule.prune_kept,
        out.search.schedule.merge_kept,
        model.latency(&out.search.schedule, &hw),
        model.power(&out.search.schedule, &hw)
    );
    Ok(())
}
