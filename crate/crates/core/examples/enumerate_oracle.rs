//! Draws random schedules near a FLOPs budget, evaluates them all against a
//! cached first block and prints the best ones and the accuracy/FLOPs front.

use diffrate::cost::baseline_flops;
use diffrate::search::{enumerate_schedules, random_schedules, EvalCache, RandomSpec};
use diffrate::token_ops::SortMetric;
use diffrate::vit::ModelConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;

fn main() -> diffrate::Result<()> {
    let (_, val, backbone) = common::trained_toy()?;
    let config = ModelConfig::toy();
    let metric = SortMetric::ClassAttention;

    let target = 0.5 * baseline_flops(&config) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = RandomSpec::default();
    let schedules =
        random_schedules(config.token_count(), config.depth, config.embed_dim, target, 200, &spec, &mut rng)?;

    let cache = EvalCache::new(&backbone, &val.images, &val.labels)?;
    let e = enumerate_schedules(&cache, &schedules, metric, Some(target), None)?;
    println!("evaluated {} schedules", e.ranked.len());
    for s in e.ranked.iter().take(5) {
        println!(
            "{:6.2}%  {:>7} flops  prune {:?} merge {:?}",
            100.0 * s.accuracy,
            s.flops,
            s.schedule.prune_kept,
            s.schedule.merge_kept
        );
    }
    println!("pareto front:");
    for s in &e.pareto {
        println!("  {:>7} flops  {:6.2}%", s.flops, 100.0 * s.accuracy);
    }
    Ok(())
}
