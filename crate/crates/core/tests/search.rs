//! Training, fine-tuning and hardware co-search behaviour on small random
//! problems.

use diffrate::autograd::Tensor;
use diffrate::cost::{BlockCounts, CompressionSchedule, HwConfig, HwCostModel, HwMetric, HwSpace};
use diffrate::search::{cosearch_hw, finetune, search_rates, train, HwFixed, SearchConfig, TrainConfig, Trainer};
use diffrate::token_ops::SortMetric;
use diffrate::vit::{checkpoint, BackboneParams, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model() -> ModelConfig {
    ModelConfig {
        depth: 2,
        image_size: 8,
        patch_size: 4,
        channels: 3,
        embed_dim: 8,
        heads: 2,
        class_count: 3,
    }
}

fn data(n: usize, seed: u64) -> (Vec<Tensor>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..n)
        .map(|_| Tensor::new(vec![8, 8, 3], (0..192).map(|_| rng.gen()).collect()).unwrap())
        .collect();
    let labels = (0..n).map(|_| rng.gen_range(0..3)).collect();
    (images, labels)
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_and_zero_lr_leave_weights_unchanged() {
    let p = BackboneParams::init(&model(), 1).unwrap();
    let (x, y) = data(16, 2);
    let s = CompressionSchedule::prune_only(5, vec![4, 2]);
    let out = finetune(&p, &x, &y, &s, &train_cfg(0), SortMetric::ClassAttention).unwrap();
    assert_eq!(out.params, p);
    let frozen = TrainConfig {
        lr: 0.0,
        lr_min: 0.0,
        ..train_cfg(2)
    };
    let out = finetune(&p, &x, &y, &s, &frozen, SortMetric::ClassAttention).unwrap();
    assert_eq!(out.params, p);
    let moved = finetune(&p, &x, &y, &s, &train_cfg(1), SortMetric::ClassAttention).unwrap();
    assert_ne!(moved.params, p);
}

#[test]
fn resume_is_bit_exact() {
    let p = BackboneParams::init(&model(), 3).unwrap();
    let (x, y) = data(20, 4);
    let cfg = train_cfg(3);
    let straight = train(p.clone(), (&x, &y), None, &cfg, None, SortMetric::ClassAttention).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let (ck, st) = (dir.path().join("w.drck"), dir.path().join("state.json"));
    let mut t = Trainer::new(p, &cfg, None, SortMetric::ClassAttention, x.len()).unwrap();
    t.run_epoch(&x, &y).unwrap();
    t.save(&ck, &st).unwrap();
    let mut r = Trainer::resume(&ck, &st, &cfg, None, SortMetric::ClassAttention, x.len()).unwrap();
    r.run_epoch(&x, &y).unwrap();
    r.run_epoch(&x, &y).unwrap();
    assert_eq!(checkpoint::encode(&r.params), checkpoint::encode(&straight.params));
    assert_eq!(r.losses, straight.losses);
}

#[test]
fn search_leaves_backbone_untouched() {
    let p = BackboneParams::init(&model(), 5).unwrap();
    let before = checkpoint::encode(&p);
    let (x, y) = data(16, 6);
    let cfg = SearchConfig {
        target_flops: Some(0.5 * diffrate::cost::baseline_flops(&p.config) as f64),
        epochs: 2,
        batch_size: 8,
        ..SearchConfig::default()
    };
    search_rates(&p, &x, &y, &cfg, None).unwrap();
    assert_eq!(checkpoint::encode(&p), before);
}

/// Latency proportional to tokens processed, scaled by `tiles_row`; power
/// constant. A smaller `tiles_row` is faster on every schedule.
struct Linear;

impl HwCostModel for Linear {
    fn block_costs(&self, counts: &[BlockCounts], hw: &HwConfig, metric: HwMetric) -> Vec<f64> {
        counts
            .iter()
            .map(|c| match metric {
                HwMetric::Latency => hw.tiles_row * (c.tokens_in + c.tokens_out) as f64,
                HwMetric::Power => 1.0,
            })
            .collect()
    }
}

fn hw(tiles_row: f64) -> HwConfig {
    HwConfig::from_values([tiles_row, 1.0, 1.0, 1.0, 64.0, 4.0, 0.25, 64.0])
}

fn co_cfg(target_latency: f64) -> SearchConfig {
    SearchConfig {
        target_latency: Some(target_latency),
        latency_unit: Some(2.0),
        epochs: 3,
        batch_size: 8,
        hw_steps: 10,
        ..SearchConfig::default()
    }
}

#[test]
fn single_point_space_matches_fixed_hardware_search() {
    let p = BackboneParams::init(&model(), 7).unwrap();
    let (x, y) = data(16, 8);
    let cfg = co_cfg(12.0);
    let space = HwSpace::from_configs(&[hw(1.0)]);
    let co = cosearch_hw(&p, &x, &y, &cfg, &Linear, &space, None).unwrap();
    let fixed = search_rates(&p, &x, &y, &cfg, Some(HwFixed { model: &Linear, config: hw(1.0) })).unwrap();
    assert_eq!(co.search.hw, Some(hw(1.0)));
    assert_eq!(co.search.schedule, fixed.schedule);
    assert_eq!(co.search.rates, fixed.rates);
}

#[test]
fn dominating_configuration_is_chosen() {
    let p = BackboneParams::init(&model(), 9).unwrap();
    let (x, y) = data(16, 10);
    // Zero schedule: 20 token-slots per unit of tiles_row. The target sits
    // where only the faster configuration can keep most tokens.
    let cfg = co_cfg(12.0);
    let space = HwSpace::from_configs(&[hw(1.0), hw(3.0)]);
    let co = cosearch_hw(&p, &x, &y, &cfg, &Linear, &space, None).unwrap();
    assert_eq!(co.search.hw, Some(hw(1.0)));
    let lat = Linear.total(&co.search.schedule, &hw(1.0), HwMetric::Latency);
    assert!((lat - 12.0).abs() / 12.0 <= 0.2, "latency {lat}");
}

#[test]
fn cosearch_rejects_unreachable_latency() {
    let p = BackboneParams::init(&model(), 11).unwrap();
    let (x, y) = data(8, 12);
    // The class-token-only floor costs 5 + 1 + 1 + 1 = 8 at tiles_row 1.
    let space = HwSpace::from_configs(&[hw(1.0), hw(3.0)]);
    let err = cosearch_hw(&p, &x, &y, &co_cfg(7.0), &Linear, &space, None).unwrap_err();
    assert!(matches!(err, diffrate::Error::Infeasible { .. }), "{err:?}");
}
