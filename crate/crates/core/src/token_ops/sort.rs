use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Token importance metric used for sorting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortMetric {
    /// Class-token attention row averaged over heads.
    #[default]
    ClassAttention,
    /// Class attention times the norm of the token's value row.
    ClassAttentionValueNorm,
    /// Attention received from the image tokens, averaged over queries and heads.
    ImageAttention,
    /// Seeded hash of (seed, block, original position).
    Random(u64),
}

/// Token indices by descending importance, class token first.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceOrder {
    /// `order[rank]` is a token index.
    pub order: Vec<usize>,
    /// Metric value per token index (−∞ for masked tokens).
    pub metric: Vec<f64>,
}

impl ImportanceOrder {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// `rank[token]`, the inverse permutation.
    pub fn ranks(&self) -> Vec<usize> {
        let mut r = vec![0; self.order.len()];
        for (rank, &tok) in self.order.iter().enumerate() {
            r[tok] = rank;
        }
        r
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Importance of every row. `probs` and `values` are per-head attention
/// (n×n) and value (n×dh) matrices; `alive[i]` marks unmasked rows and
/// `positions[i]` the original token position of row `i`. Dead rows get −∞.
pub fn importance(
    metric: SortMetric,
    probs: &[&Tensor],
    values: &[&Tensor],
    alive: &[bool],
    positions: &[usize],
    block: usize,
) -> Vec<f64> {
    let n = alive.len();
    let h = probs.len() as f64;
    let class_row = || {
        let mut out = vec![0.0; n];
        for p in probs {
            for (o, v) in out.iter_mut().zip(p.row(0)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= h;
        }
        out
    };
    let mut out = match metric {
        SortMetric::ClassAttention => class_row(),
        SortMetric::ClassAttentionValueNorm => {
            let mut out = class_row();
            for (j, o) in out.iter_mut().enumerate() {
                let sq: f64 = values.iter().flat_map(|v| v.row(j)).map(|x| x * x).sum();
                *o *= sq.sqrt();
            }
            out
        }
        SortMetric::ImageAttention => {
            let mut out = vec![0.0; n];
            let mut count = 0usize;
            for i in 1..n {
                if !alive[i] {
                    continue;
                }
                count += 1;
                for p in probs {
                    for (o, v) in out.iter_mut().zip(p.row(i)) {
                        *o += v;
                    }
                }
            }
            if count > 0 {
                let denom = count as f64 * h;
                for o in &mut out {
                    *o /= denom;
                }
            }
            out
        }
        SortMetric::Random(seed) => positions
            .iter()
            .map(|&pos| {
                let z = splitmix64(seed ^ splitmix64((block as u64) << 32 | pos as u64));
                (z >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect(),
    };
    for (o, &a) in out.iter_mut().zip(alive) {
        if !a {
            *o = f64::NEG_INFINITY;
        }
    }
    out
}

/// Orders tokens: class token at rank 0, then unmasked tokens by descending
/// metric (ties by ascending index), then masked tokens by ascending index.
pub fn sort_tokens(metric: &[f64], mask: Option<&[f64]>) -> Result<ImportanceOrder> {
    let n = metric.len();
    if n == 0 {
        return Err(Error::shape("sort_tokens", "no tokens"));
    }
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::shape("sort_tokens", format!("{n} metrics vs {} mask entries", m.len())));
        }
    }
    let masked = |i: usize| mask.is_some_and(|m| m[i] == 0.0) || metric[i] == f64::NEG_INFINITY;
    let mut live: Vec<usize> = (1..n).filter(|&i| !masked(i)).collect();
    live.sort_by(|&a, &b| metric[b].total_cmp(&metric[a]).then(a.cmp(&b)));
    let mut order = Vec::with_capacity(n);
    order.push(0);
    order.extend(live);
    order.extend((1..n).filter(|&i| masked(i)));
    let metric = (0..n)
        .map(|i| if masked(i) { f64::NEG_INFINITY } else { metric[i] })
        .collect();
    Ok(ImportanceOrder { order, metric })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn already_sorted() {
        let o = sort_tokens(&[0.9, 0.5, 0.3, 0.2], None).unwrap();
        assert_eq!(o.order, vec![0, 1, 2, 3]);
    }

    #[test]
    fn class_token_first_even_if_least_important() {
        let o = sort_tokens(&[0.0, 0.2, 0.7, 0.1], None).unwrap();
        assert_eq!(o.order, vec![0, 2, 1, 3]);
        assert_eq!(o.ranks(), vec![0, 2, 1, 3]);
    }

    #[test]
    fn ties_break_by_index() {
        let o = sort_tokens(&[0.1, 0.3, 0.3, 0.3], None).unwrap();
        assert_eq!(o.order, vec![0, 1, 2, 3]);
    }

    #[test]
    fn masked_token_ranks_last() {
        let o = sort_tokens(&[0.1, 0.2, 0.9, 0.3], Some(&[1.0, 1.0, 0.0, 1.0])).unwrap();
        assert_eq!(o.order, vec![0, 3, 1, 2]);
        assert_eq!(o.metric[2], f64::NEG_INFINITY);
    }

    #[test]
    fn random_metric_is_deterministic() {
        let p = Tensor::full(&[3, 3], 1.0 / 3.0);
        let v = Tensor::zeros(&[3, 2]);
        let a = importance(SortMetric::Random(4), &[&p], &[&v], &[true; 3], &[0, 5, 9], 2);
        let b = importance(SortMetric::Random(4), &[&p], &[&v], &[true; 3], &[0, 5, 9], 2);
        assert_eq!(a, b);
        assert!(a.iter().all(|x| (0.0..1.0).contains(x)));
    }
}
