//! Importance sorting, pruning, merging and uncompression on a handful of
//! tokens, then a full schedule applied to an image with per-block records.

use diffrate::autograd::Tensor;
use diffrate::cost::{CompressionOrder, CompressionSchedule};
use diffrate::token_ops::{apply_image, merge, prune, sort_tokens, uncompress, SortMetric};
use diffrate::vit::{BackboneParams, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> diffrate::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, d) = (8, 4);
    let x = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let scores: Vec<f64> = (0..n).map(|i| if i == 0 { f64::INFINITY } else { rng.gen() }).collect();

    let order = sort_tokens(&scores, None)?;
    println!("importance order {:?}", order.order);

    let pruned = prune(&order, 2)?;
    println!("pruned {:?}", pruned);

    let (merged, map) = merge(&x, &order, 3)?;
    println!("merged to {} rows: {:?}", merged.rows(), map);
    let restored = uncompress(&merged, &map, &[])?;
    println!("uncompressed back to {} rows", restored.rows());

    let config = ModelConfig::toy();
    let params = BackboneParams::init(&config, 0)?;
    let side = config.image_size;
    let image = Tensor::new(vec![side, side, 3], (0..side * side * 3).map(|_| rng.gen()).collect())?;
    let schedule = CompressionSchedule {
        token_count: 17,
        prune_kept: vec![15, 12, 9, 6],
        merge_kept: vec![13, 10, 7, 4],
        order: CompressionOrder::PruneThenMerge,
    };
    let out = apply_image(&params, &schedule, SortMetric::ClassAttention, &image)?;
    for (l, b) in out.blocks.iter().enumerate() {
        println!(
            "block {l}: {} -> {} tokens, pruned {:?}, {} merges",
            b.tokens_in,
            b.tokens_out,
            b.pruned,
            b.merges.len()
        );
    }
    println!("MACs {}", out.macs);
    Ok(())
}
