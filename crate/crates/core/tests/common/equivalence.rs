use diffrate::autograd::{Tape, Tensor};
use diffrate::cost::{CompressionOrder, CompressionSchedule};
use diffrate::ddp::{MaskedCompressor, RateSet};
use diffrate::token_ops::{apply_image, SortMetric};
use diffrate::vit::{forward_image, BackboneParams, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small() -> ModelConfig {
    ModelConfig {
        depth: 3,
        image_size: 12,
        patch_size: 4,
        channels: 3,
        embed_dim: 16,
        heads: 2,
        class_count: 5,
    }
}

pub fn random_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> BackboneParams {
    let mut p = BackboneParams::init(cfg, rng.gen()).unwrap();
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    p
}

pub fn random_image(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let n = cfg.image_size * cfg.image_size * cfg.channels;
    Tensor::new(vec![cfg.image_size, cfg.image_size, cfg.channels], (0..n).map(|_| rng.gen()).collect()).unwrap()
}

pub fn random_kept(n: usize, depth: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..depth).map(|_| rng.gen_range(1..=n)).collect()
}

pub fn search_logits(p: &BackboneParams, s: &CompressionSchedule, metric: SortMetric, img: &Tensor) -> Vec<f64> {
    let rates = RateSet::from_schedule(s).unwrap();
    let mut tape = Tape::new();
    let bp = p.bind(&mut tape, false).unwrap();
    let br = rates.bind(&mut tape, false).unwrap();
    assert_eq!(br.schedule().kept_profile(), s.kept_profile());
    let mut hook = MaskedCompressor::new(&br, metric);
    let out = forward_image(&mut tape, &p.config, &bp, img, &mut hook).unwrap();
    tape.value(out.logits).data().to_vec()
}

pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-300))
        .fold(0.0, f64::max)
}

/// Worst relative class-logit gap between search and apply over `trials`
/// random pruning-only triples.
pub fn worst_pruning(trials: usize) -> f64 {
    let cfg = small();
    let n = cfg.token_count();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let p = random_params(&cfg, &mut rng);
        let img = random_image(&cfg, &mut rng);
        let s = CompressionSchedule::prune_only(n, random_kept(n, cfg.depth, &mut rng));
        let a = apply_image(&p, &s, SortMetric::ClassAttention, &img).unwrap().logits;
        let b = search_logits(&p, &s, SortMetric::ClassAttention, &img);
        worst = worst.max(max_rel(&a, &b));
    }
    worst
}

/// As [`worst_pruning`] with merging on, both orders and every metric.
pub fn worst_merging(trials: usize) -> f64 {
    let cfg = small();
    let n = cfg.token_count();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let metrics = [
        SortMetric::ClassAttention,
        SortMetric::ClassAttentionValueNorm,
        SortMetric::ImageAttention,
        SortMetric::Random(3),
    ];
    let mut worst = 0.0f64;
    for i in 0..trials {
        let p = random_params(&cfg, &mut rng);
        let img = random_image(&cfg, &mut rng);
        let s = CompressionSchedule {
            token_count: n,
            prune_kept: random_kept(n, cfg.depth, &mut rng),
            merge_kept: random_kept(n, cfg.depth, &mut rng),
            order: if i % 2 == 0 {
                CompressionOrder::PruneThenMerge
            } else {
                CompressionOrder::MergeThenPrune
            },
        };
        let metric = metrics[i % 4];
        let a = apply_image(&p, &s, metric, &img).unwrap().logits;
        let b = search_logits(&p, &s, metric, &img);
        worst = worst.max(max_rel(&a, &b));
    }
    worst
}

