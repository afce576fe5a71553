use diffrate::harness::{gen_splits, ToyDataset, ToyRecipe};
use diffrate::search::{train, TrainConfig};
use diffrate::token_ops::SortMetric;
use diffrate::vit::{BackboneParams, ModelConfig};

/// Toy data and a backbone trained on it for a few epochs.
pub fn trained_toy() -> diffrate::Result<(ToyDataset, ToyDataset, BackboneParams)> {
    let recipe = ToyRecipe {
        train_size: 1024,
        val_size: 256,
        ..ToyRecipe::default()
    };
    let (tr, val) = gen_splits(&recipe, 0)?;
    let tc = TrainConfig {
        epochs: 8,
        ..TrainConfig::default()
    };
    let init = BackboneParams::init(&ModelConfig::toy(), 0)?;
    let params = train(init, (&tr.images, &tr.labels), None, &tc, None, SortMetric::ClassAttention)?.params;
    Ok((tr, val, params))
}
