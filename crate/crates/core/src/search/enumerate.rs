use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::cost::{flops, CompressionOrder, CompressionSchedule};
use crate::error::{Error, Result};
use crate::token_ops::{apply_from_first_block, argmax, first_block, Attended, SortMetric};
use crate::vit::BackboneParams;

/// First-block attention of every evaluation image, shared by all
/// schedules since nothing is compressed before the first block's hook.
pub struct EvalCache<'a> {
    params: &'a BackboneParams,
    first: Vec<(Attended, u64)>,
    labels: Vec<usize>,
}

impl<'a> EvalCache<'a> {
    pub fn new(params: &'a BackboneParams, images: &[Tensor], labels: &[usize]) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Config(format!("{} images vs {} labels", images.len(), labels.len())));
        }
        let first = images.par_iter().map(|img| first_block(params, img)).collect::<Result<_>>()?;
        Ok(Self {
            params,
            first,
            labels: labels.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Off-the-shelf accuracy of `schedule` and the measured MACs per image.
    pub fn evaluate(&self, schedule: &CompressionSchedule, metric: SortMetric) -> Result<(f64, u64)> {
        let cfg = &self.params.config;
        schedule.check_model(cfg.depth, cfg.token_count())?;
        let mut hits = 0;
        let mut macs = 0;
        for ((att, m0), &y) in self.first.iter().zip(&self.labels) {
            let out = apply_from_first_block(self.params, schedule, metric, att, *m0, false)?;
            macs = out.macs;
            hits += usize::from(argmax(&out.logits) == y);
        }
        let acc = if self.labels.is_empty() {
            0.0
        } else {
            hits as f64 / self.labels.len() as f64
        };
        Ok((acc, macs))
    }
}

/// One evaluated schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluated {
    pub schedule: CompressionSchedule,
    pub flops: u64,
    pub accuracy: f64,
}

/// Ranked results of an enumeration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Enumeration {
    /// Sorted by accuracy (descending), then FLOPs (ascending).
    pub ranked: Vec<Evaluated>,
    /// Schedules not beaten in accuracy by any cheaper schedule, by FLOPs.
    pub pareto: Vec<Evaluated>,
    /// Most accurate schedule with FLOPs at most the target.
    pub best_under_target: Option<Evaluated>,
    /// Set when the budget cut the enumeration short.
    pub partial: bool,
    pub requested: usize,
}

/// Evaluates `schedules` (at most `budget` of them) in parallel.
pub fn enumerate_schedules(
    cache: &EvalCache<'_>,
    schedules: &[CompressionSchedule],
    metric: SortMetric,
    target: Option<f64>,
    budget: Option<usize>,
) -> Result<Enumeration> {
    let n = budget.map_or(schedules.len(), |b| b.min(schedules.len()));
    let embed_dim = cache.params.config.embed_dim;
    let mut ranked: Vec<Evaluated> = schedules[..n]
        .par_iter()
        .map(|s| {
            let (accuracy, _) = cache.evaluate(s, metric)?;
            Ok(Evaluated {
                schedule: s.clone(),
                flops: flops(s, embed_dim)?,
                accuracy,
            })
        })
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| b.accuracy.total_cmp(&a.accuracy).then(a.flops.cmp(&b.flops)));
    let best_under_target = target.and_then(|t| ranked.iter().find(|e| e.flops as f64 <= t).cloned());
    Ok(Enumeration {
        pareto: pareto_front(&ranked),
        best_under_target,
        partial: n < schedules.len(),
        requested: schedules.len(),
        ranked,
    })
}

/// Schedules whose accuracy exceeds that of every cheaper schedule.
pub fn pareto_front(evals: &[Evaluated]) -> Vec<Evaluated> {
    let mut by_cost: Vec<&Evaluated> = evals.iter().collect();
    by_cost.sort_by(|a, b| a.flops.cmp(&b.flops).then(b.accuracy.total_cmp(&a.accuracy)));
    let mut out: Vec<Evaluated> = Vec::new();
    for e in by_cost {
        if out.last().is_none_or(|p| e.accuracy > p.accuracy) {
            out.push(e.clone());
        }
    }
    out
}

/// Every schedule whose per-block kept counts are drawn from `kept_grid`,
/// for the enabled stages. A disabled stage keeps all tokens.
pub fn grid_schedules(
    token_count: usize,
    depth: usize,
    kept_grid: &[usize],
    prune: bool,
    merge: bool,
    order: CompressionOrder,
) -> Result<Vec<CompressionSchedule>> {
    if kept_grid.is_empty() || kept_grid.iter().any(|&k| k == 0 || k > token_count) {
        return Err(Error::Config(format!("kept grid {kept_grid:?} must lie in 1..={token_count}")));
    }
    if !prune && !merge {
        return Err(Error::Config("at least one of pruning and merging must be enabled".into()));
    }
    let stages = usize::from(prune) + usize::from(merge);
    let slots = depth * stages;
    let total = kept_grid
        .len()
        .checked_pow(slots as u32)
        .filter(|&t| t <= 50_000_000)
        .ok_or_else(|| Error::Config(format!("grid of {}^{slots} schedules is too large", kept_grid.len())))?;
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; slots];
    for _ in 0..total {
        let vals: Vec<usize> = idx.iter().map(|&i| kept_grid[i]).collect();
        let (p, m) = match (prune, merge) {
            (true, true) => (vals[..depth].to_vec(), vals[depth..].to_vec()),
            (true, false) => (vals, vec![token_count; depth]),
            (false, _) => (vec![token_count; depth], vals),
        };
        out.push(CompressionSchedule {
            token_count,
            prune_kept: p,
            merge_kept: m,
            order,
        });
        for d in (0..slots).rev() {
            idx[d] += 1;
            if idx[d] < kept_grid.len() {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(out)
}

/// Options for [`random_schedules`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomSpec {
    pub prune: bool,
    pub merge: bool,
    pub order: CompressionOrder,
    /// Accepted schedules have FLOPs in `[lower · T, T]`.
    pub lower: f64,
    /// Rejection-sampling attempts per accepted schedule before giving up.
    pub max_attempts: usize,
}

impl Default for RandomSpec {
    fn default() -> Self {
        Self {
            prune: true,
            merge: true,
            order: CompressionOrder::PruneThenMerge,
            lower: 0.9,
            max_attempts: 10_000,
        }
    }
}

/// Draws `count` random schedules with FLOPs in `[lower · T, T]`.
///
/// A non-increasing kept profile is sampled by sorting uniform draws; at
/// each block one enabled stage is chosen to reach the profile's count and
/// the other keeps a uniform count between that and the block's input.
pub fn random_schedules<R: Rng>(
    token_count: usize,
    depth: usize,
    embed_dim: usize,
    target: f64,
    count: usize,
    spec: &RandomSpec,
    rng: &mut R,
) -> Result<Vec<CompressionSchedule>> {
    if !spec.prune && !spec.merge {
        return Err(Error::Config("at least one of pruning and merging must be enabled".into()));
    }
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > spec.max_attempts.saturating_mul(count.max(1)) {
            return Err(Error::Config(format!(
                "no schedules with FLOPs in [{:.0}, {target:.0}] after {attempts} draws",
                spec.lower * target
            )));
        }
        let mut profile: Vec<usize> = (0..depth).map(|_| rng.gen_range(1..=token_count)).collect();
        profile.sort_unstable_by(|a, b| b.cmp(a));
        let mut prune_kept = vec![token_count; depth];
        let mut merge_kept = vec![token_count; depth];
        let mut prev = token_count;
        for (l, &k) in profile.iter().enumerate() {
            let prune_binds = match (spec.prune, spec.merge) {
                (true, true) => rng.gen_bool(0.5),
                (p, _) => p,
            };
            let other = rng.gen_range(k..=prev);
            let (bind, free) = if prune_binds {
                (&mut prune_kept, &mut merge_kept)
            } else {
                (&mut merge_kept, &mut prune_kept)
            };
            bind[l] = k;
            if spec.prune && spec.merge {
                free[l] = other;
            }
            prev = k;
        }
        let s = CompressionSchedule {
            token_count,
            prune_kept,
            merge_kept,
            order: spec.order,
        };
        let f = flops(&s, embed_dim)? as f64;
        if f <= target && f >= spec.lower * target {
            out.push(s);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn grid_size() {
        let g = grid_schedules(9, 2, &[9, 6, 3], true, false, CompressionOrder::PruneThenMerge).unwrap();
        assert_eq!(g.len(), 9);
        let g = grid_schedules(9, 2, &[9, 6, 3], true, true, CompressionOrder::PruneThenMerge).unwrap();
        assert_eq!(g.len(), 81);
    }

    #[test]
    fn pareto_keeps_improvements() {
        let mk = |f, a| Evaluated {
            schedule: CompressionSchedule::zero(3, 1),
            flops: f,
            accuracy: a,
        };
        let p = pareto_front(&[mk(10, 0.5), mk(20, 0.4), mk(30, 0.9), mk(5, 0.5)]);
        let pts: Vec<(u64, f64)> = p.iter().map(|e| (e.flops, e.accuracy)).collect();
        assert_eq!(pts, vec![(5, 0.5), (30, 0.9)]);
    }

    #[test]
    fn random_schedules_respect_window() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let (n, l, c) = (17, 4, 32);
        let base = flops(&CompressionSchedule::zero(n, l), c).unwrap() as f64;
        let t = 0.5 * base;
        let s = random_schedules(n, l, c, t, 200, &RandomSpec::default(), &mut rng).unwrap();
        assert_eq!(s.len(), 200);
        for x in &s {
            x.validate().unwrap();
            let f = flops(x, c).unwrap() as f64;
            assert!(f <= t && f >= 0.9 * t);
        }
    }
}
