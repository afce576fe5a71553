//! Trains a toy backbone briefly, then searches per-block pruning and merging
//! rates for half of its operations and evaluates the result.

use diffrate::cost::baseline_flops;
use diffrate::search::{evaluate, search_rates, SearchConfig};
use diffrate::token_ops::SortMetric;
use diffrate::vit::ModelConfig;

mod common;

fn main() -> diffrate::Result<()> {
    let (tr, val, backbone) = common::trained_toy()?;
    let config = ModelConfig::toy();
    let metric = SortMetric::ClassAttention;
    let base_acc = evaluate(&backbone, &val.images, &val.labels, None, metric)?;

    let base = baseline_flops(&config) as f64;
    let cfg = SearchConfig {
        target_flops: Some(0.5 * base),
        epochs: 4,
        ..SearchConfig::default()
    };
    let result = search_rates(&backbone, &tr.images, &tr.labels, &cfg, None)?;
    let acc = evaluate(&backbone, &val.images, &val.labels, Some(&result.schedule), metric)?;

    println!("{} trace rows, final classification loss {:.4}", result.trace.len(), result.trace.rows.last().map_or(f64::NAN, |r| r.loss_cls));
    println!("prune kept {:?}", result.schedule.prune_kept);
    println!("merge kept {:?}", result.schedule.merge_kept);
    println!("flops {} ({:.3} of baseline)", result.flops, result.flops as f64 / base);
    println!("accuracy {:.2}% -> {:.2}%", 100.0 * base_acc, 100.0 * acc);
    Ok(())
}
