use diffrate::autograd::Tensor;
use diffrate::cost::{flops, CompressionOrder, CompressionSchedule};
use diffrate::token_ops::{apply_image, SortMetric};
use diffrate::vit::{BackboneParams, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Kept counts for removal fractions 0, 1/4, 1/2, 3/4.
fn grid(n: usize) -> [usize; 4] {
    [0, 1, 2, 3].map(|q| n - q * n / 4)
}

/// Every schedule over the grid, both rates per block.
fn all_schedules(n: usize, depth: usize, order: CompressionOrder) -> Vec<CompressionSchedule> {
    let g = grid(n);
    let per_block: Vec<(usize, usize)> = g.iter().flat_map(|&p| g.iter().map(move |&m| (p, m))).collect();
    let mut out = Vec::new();
    let total = per_block.len().pow(depth as u32);
    for mut code in 0..total {
        let mut s = CompressionSchedule::zero(n, depth);
        s.order = order;
        for l in 0..depth {
            let (p, m) = per_block[code % per_block.len()];
            code /= per_block.len();
            s.prune_kept[l] = p;
            s.merge_kept[l] = m;
        }
        out.push(s);
    }
    out
}

/// Compares the analytic count with the instrumented apply path for every
/// grid schedule on every small geometry. Returns `(checked, mismatches)`.
pub fn exhaustive() -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut checked = 0;
    let mut mismatches = 0;
    for image_size in [8, 12] {
        for embed_dim in [4, 8] {
            for depth in 1..=3 {
                let cfg = ModelConfig {
                    depth,
                    image_size,
                    patch_size: 4,
                    channels: 3,
                    embed_dim,
                    heads: 2,
                    class_count: 3,
                };
                let n = cfg.token_count();
                assert!(n <= 16);
                let p = BackboneParams::init(&cfg, rng.gen()).unwrap();
                let len = image_size * image_size * 3;
                let img = Tensor::new(vec![image_size, image_size, 3], (0..len).map(|_| rng.gen()).collect()).unwrap();
                for order in [CompressionOrder::PruneThenMerge, CompressionOrder::MergeThenPrune] {
                    for s in all_schedules(n, depth, order) {
                        let counted = apply_image(&p, &s, SortMetric::ClassAttention, &img).unwrap().macs;
                        mismatches += usize::from(flops(&s, embed_dim).unwrap() != counted);
                        checked += 1;
                    }
                }
            }
        }
    }
    (checked, mismatches)
}

