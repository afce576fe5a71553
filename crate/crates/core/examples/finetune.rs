//! Fine-tunes a backbone with a fixed compression schedule applied by real
//! token dropping and compares accuracy before and after.

use diffrate::cost::{CompressionOrder, CompressionSchedule};
use diffrate::search::{evaluate, finetune, TrainConfig};
use diffrate::token_ops::SortMetric;

mod common;

fn main() -> diffrate::Result<()> {
    let (tr, val, backbone) = common::trained_toy()?;
    let metric = SortMetric::ClassAttention;

    let schedule = CompressionSchedule {
        token_count: 17,
        prune_kept: vec![9, 5, 3, 2],
        merge_kept: vec![6, 3, 2, 1],
        order: CompressionOrder::PruneThenMerge,
    };
    let before = evaluate(&backbone, &val.images, &val.labels, Some(&schedule), metric)?;
    let ft = TrainConfig {
        epochs: 3,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let report = finetune(&backbone, &tr.images, &tr.labels, &schedule, &ft, metric)?;
    let after = evaluate(&report.params, &val.images, &val.labels, Some(&schedule), metric)?;
    println!("compressed accuracy {:.2}% -> {:.2}% after fine-tuning", 100.0 * before, 100.0 * after);
    Ok(())
}
