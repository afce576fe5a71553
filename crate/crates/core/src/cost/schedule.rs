use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which compression runs first inside a block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressionOrder {
    #[default]
    PruneThenMerge,
    MergeThenPrune,
}

/// Per-block kept-token counts for the pruning and merging stages.
///
/// A kept count `k` corresponds to compression rate `α = (N − k)/N`. The
/// tokens leaving block `l` number `min(n_{l−1}, prune_kept[l], merge_kept[l])`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CompressionSchedule {
    /// Tokens entering the first block, class token included.
    pub token_count: usize,
    pub prune_kept: Vec<usize>,
    pub merge_kept: Vec<usize>,
    #[serde(default)]
    pub order: CompressionOrder,
}

/// Token counts through one block of an applied schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockCounts {
    pub tokens_in: usize,
    /// After the first compression stage.
    pub after_first: usize,
    pub tokens_out: usize,
}

impl CompressionSchedule {
    /// No compression anywhere.
    pub fn zero(token_count: usize, depth: usize) -> Self {
        Self {
            token_count,
            prune_kept: vec![token_count; depth],
            merge_kept: vec![token_count; depth],
            order: CompressionOrder::PruneThenMerge,
        }
    }

    /// Pruning only; `kept[l]` tokens survive block `l`.
    pub fn prune_only(token_count: usize, kept: Vec<usize>) -> Self {
        let depth = kept.len();
        Self {
            token_count,
            prune_kept: kept,
            merge_kept: vec![token_count; depth],
            order: CompressionOrder::PruneThenMerge,
        }
    }

    pub fn depth(&self) -> usize {
        self.prune_kept.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.token_count;
        if n < 2 {
            return Err(Error::Schedule(format!("token count {n} < 2")));
        }
        if self.prune_kept.len() != self.merge_kept.len() {
            return Err(Error::Schedule(format!(
                "{} prune entries vs {} merge entries",
                self.prune_kept.len(),
                self.merge_kept.len()
            )));
        }
        for (l, (&p, &m)) in self.prune_kept.iter().zip(&self.merge_kept).enumerate() {
            if !(1..=n).contains(&p) || !(1..=n).contains(&m) {
                return Err(Error::Schedule(format!(
                    "block {l}: kept counts ({p}, {m}) outside 1..={n}"
                )));
            }
        }
        Ok(())
    }

    /// Checks the schedule against a model's depth and token count.
    pub fn check_model(&self, depth: usize, token_count: usize) -> Result<()> {
        self.validate()?;
        if self.depth() != depth {
            return Err(Error::Schedule(format!("schedule has {} blocks, model has {depth}", self.depth())));
        }
        if self.token_count != token_count {
            return Err(Error::Schedule(format!(
                "schedule is for {} tokens, model has {token_count}",
                self.token_count
            )));
        }
        Ok(())
    }

    pub fn counts(&self) -> Vec<BlockCounts> {
        let mut n = self.token_count;
        self.prune_kept
            .iter()
            .zip(&self.merge_kept)
            .map(|(&p, &m)| {
                let first = match self.order {
                    CompressionOrder::PruneThenMerge => p,
                    CompressionOrder::MergeThenPrune => m,
                };
                let after_first = n.min(first);
                let tokens_out = after_first.min(p).min(m);
                let c = BlockCounts {
                    tokens_in: n,
                    after_first,
                    tokens_out,
                };
                n = tokens_out;
                c
            })
            .collect()
    }

    /// Tokens leaving each block.
    pub fn kept_profile(&self) -> Vec<usize> {
        self.counts().iter().map(|c| c.tokens_out).collect()
    }

    /// Effective rate `α^l = (N − n_l)/N` after the max recursion.
    pub fn effective_alphas(&self) -> Vec<f64> {
        let n = self.token_count as f64;
        self.kept_profile().iter().map(|&k| (n - k as f64) / n).collect()
    }

    pub fn prune_alphas(&self) -> Vec<f64> {
        let n = self.token_count as f64;
        self.prune_kept.iter().map(|&k| (n - k as f64) / n).collect()
    }

    pub fn merge_alphas(&self) -> Vec<f64> {
        let n = self.token_count as f64;
        self.merge_kept.iter().map(|&k| (n - k as f64) / n).collect()
    }

    /// Equivalent schedule with redundant entries clamped to the running
    /// token count, so both vectors are non-increasing.
    pub fn canonical(&self) -> Self {
        let mut out = self.clone();
        let mut n = self.token_count;
        for (l, c) in self.counts().iter().enumerate() {
            out.prune_kept[l] = self.prune_kept[l].min(n);
            out.merge_kept[l] = self.merge_kept[l].min(n);
            n = c.tokens_out;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_follow_running_min() {
        let s = CompressionSchedule {
            token_count: 10,
            prune_kept: vec![8, 9, 4],
            merge_kept: vec![10, 6, 7],
            order: CompressionOrder::PruneThenMerge,
        };
        assert_eq!(s.kept_profile(), vec![8, 6, 4]);
        assert_eq!(s.counts()[1], BlockCounts { tokens_in: 8, after_first: 8, tokens_out: 6 });
        let alphas = s.effective_alphas();
        assert!((alphas[2] - 0.6).abs() < 1e-15);
        assert!(s.validate().is_ok());
    }

    #[test]
    fn rejects_zero_kept() {
        let s = CompressionSchedule::prune_only(5, vec![5, 0]);
        assert!(s.validate().is_err());
    }

    #[test]
    fn table_schedule_ends_with_three_tokens() {
        let s = CompressionSchedule {
            token_count: 197,
            prune_kept: vec![197, 196, 190, 168, 150, 139, 129, 117, 99, 78, 58, 3],
            merge_kept: vec![197, 194, 176, 156, 141, 133, 121, 107, 88, 64, 56, 3],
            order: CompressionOrder::PruneThenMerge,
        };
        assert_eq!(*s.kept_profile().last().unwrap(), 3);
    }
}
