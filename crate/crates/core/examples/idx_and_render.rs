//! Writes a generated dataset in IDX format, reads it back, and renders the
//! token groups of a compressed forward pass to PPM images.

use diffrate::cost::{CompressionOrder, CompressionSchedule};
use diffrate::harness::{gen_splits, ingest_idx, render_token_map, write_idx, ToyRecipe};
use diffrate::token_ops::{apply_image, SortMetric};
use diffrate::vit::{BackboneParams, ModelConfig};

fn main() -> diffrate::Result<()> {
    let out = std::env::temp_dir().join("diffrate_idx_and_render");
    std::fs::create_dir_all(&out)?;
    let recipe = ToyRecipe {
        train_size: 32,
        val_size: 8,
        ..ToyRecipe::default()
    };
    let (tr, _) = gen_splits(&recipe, 0)?;
    let (images, labels) = (out.join("images.idx"), out.join("labels.idx"));
    write_idx(&tr, &images, &labels)?;
    let back = ingest_idx(&images, Some(&labels), "train")?;
    println!("IDX round trip exact: {}", back.images == tr.images && back.labels == tr.labels);

    let config = ModelConfig::toy();
    let params = BackboneParams::init(&config, 0)?;
    let schedule = CompressionSchedule {
        token_count: 17,
        prune_kept: vec![17, 17, 17, 17],
        merge_kept: vec![12, 8, 5, 3],
        order: CompressionOrder::PruneThenMerge,
    };
    let applied = apply_image(&params, &schedule, SortMetric::ClassAttention, &tr.images[0])?;
    for block in 0..config.depth {
        let img = render_token_map(&tr.images[0], config.patch_size, &applied.blocks, block)?;
        let path = out.join(format!("block{block}.ppm"));
        img.save(&path)?;
        println!("wrote {} ({}x{})", path.display(), img.width, img.height);
    }
    Ok(())
}
