//! Runs the taped transformer and the tape-free apply path on one image and
//! checks they agree when nothing is compressed.

use diffrate::autograd::{Tape, Tensor};
use diffrate::cost::CompressionSchedule;
use diffrate::token_ops::{apply_image, SortMetric};
use diffrate::vit::{forward_image, BackboneParams, ModelConfig, NoCompression};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> diffrate::Result<()> {
    let config = ModelConfig::toy();
    let params = BackboneParams::init(&config, 0)?;
    println!(
        "toy ViT: depth {}, {} tokens, dim {}, {} parameters",
        config.depth,
        config.token_count(),
        config.embed_dim,
        params.parameter_count()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let side = config.image_size;
    let pixels = (0..side * side * config.channels).map(|_| rng.gen()).collect();
    let image = Tensor::new(vec![side, side, config.channels], pixels)?;

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false)?;
    let out = forward_image(&mut tape, &config, &bound, &image, &mut NoCompression)?;
    let taped = tape.value(out.logits).data().to_vec();

    let zero = CompressionSchedule::zero(config.token_count(), config.depth);
    let direct = apply_image(&params, &zero, SortMetric::ClassAttention, &image)?;
    let diff = taped.iter().zip(&direct.logits).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    println!("logits        {:?}", direct.logits.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>());
    println!("max |diff|    {diff:.2e}");
    println!("counted MACs  {}", direct.macs);
    Ok(())
}
