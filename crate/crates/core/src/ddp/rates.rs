use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::cost::{CompressionOrder, CompressionSchedule};
use crate::error::{Error, Result};

/// Which compression a rate parameter controls.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateRole {
    Prune,
    Merge,
}

/// Learnable logits over the candidate rates `C_k = (k−1)/N`, `k = 1..N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateParam {
    pub logits: Vec<f64>,
    pub role: RateRole,
    pub block: usize,
}

impl RateParam {
    /// Uniform probabilities over `n` candidates.
    pub fn uniform(n: usize, role: RateRole, block: usize) -> Self {
        Self {
            logits: vec![0.0; n],
            role,
            block,
        }
    }

    pub fn candidates(&self) -> Vec<f64> {
        candidates(self.logits.len())
    }
}

pub fn candidates(n: usize) -> Vec<f64> {
    (0..n).map(|k| k as f64 / n as f64).collect()
}

/// `ρ = softmax(logits)`.
pub fn probs(tape: &mut Tape, logits: Var) -> Result<Var> {
    tape.row_softmax(logits)
}

/// `α = Σ_k C_k ρ_k`.
pub fn alpha(tape: &mut Tape, rho: Var) -> Result<Var> {
    let n = tape.value(rho).len();
    let c = tape.constant(Tensor::vector(candidates(n)))?;
    let weighted = tape.mul(rho, c)?;
    tape.sum(weighted)
}

/// Constant `T` with `(ρ T)_k = π_k`: `T[j][k] = 1` iff `k ≥ 1` and `j ≥ N − k`.
fn reverse_cumsum_matrix(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for j in 0..n {
        for k in 1..n {
            if j >= n - k {
                t.data_mut()[j * n + k] = 1.0;
            }
        }
    }
    t
}

/// Token-level compression probabilities in rank space:
/// `π_1 = 0`, `π_k = ρ_{N+2−k} + … + ρ_N`.
pub fn token_probs(tape: &mut Tape, rho: Var) -> Result<Var> {
    let n = tape.value(rho).len();
    let t = tape.constant(reverse_cumsum_matrix(n))?;
    let pi = tape.matmul(rho, t)?;
    tape.reshape(pi, vec![n])
}

/// Hard keep mask `m_k = [π_k < α]`, all ones when `α = 0`.
pub fn hard_mask(pi: &[f64], alpha: f64) -> Vec<f64> {
    if alpha == 0.0 {
        return vec![1.0; pi.len()];
    }
    pi.iter().map(|&p| if p < alpha { 1.0 } else { 0.0 }).collect()
}

/// Rank-space keep mask: forward value [`hard_mask`], gradient routed to
/// `1 − π` (a keep mask falls as the removal probability rises).
pub fn token_mask(tape: &mut Tape, pi: Var, alpha: Var) -> Result<Var> {
    let hard = hard_mask(tape.value(pi).data(), tape.item(alpha));
    let hard = tape.constant(Tensor::vector(hard))?;
    let neg = tape.scale(pi, -1.0)?;
    let soft = tape.add_scalar(neg, 1.0)?;
    tape.ste(hard, soft)
}

/// `m_prev · m_p · m_m`.
pub fn combine_masks(tape: &mut Tape, m_prev: Var, m_p: Var, m_m: Var) -> Result<Var> {
    let a = tape.mul(m_prev, m_p)?;
    tape.mul(a, m_m)
}

/// `M_ij = 1` if `i = j`, else `m_j`.
pub fn attention_mask(tape: &mut Tape, m: Var) -> Result<Var> {
    tape.attention_mask(m)
}

/// Softmax of `s` with entries reweighted by the attention mask.
pub fn masked_softmax(tape: &mut Tape, s: Var, m: Var) -> Result<Var> {
    tape.masked_softmax(s, m)
}

/// Rate quantities of one role in one block, recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundRate {
    pub logits: Var,
    pub rho: Var,
    pub alpha: Var,
    pub pi: Var,
    /// Rank-space keep mask.
    pub mask: Var,
    /// Ones in the hard mask.
    pub kept: usize,
}

impl BoundRate {
    pub fn bind(tape: &mut Tape, logits: &[f64], trainable: bool) -> Result<Self> {
        let logits = tape.leaf(Tensor::vector(logits.to_vec()), trainable)?;
        let rho = probs(tape, logits)?;
        let alpha = alpha(tape, rho)?;
        let pi = token_probs(tape, rho)?;
        let mask = token_mask(tape, pi, alpha)?;
        let kept = tape.value(mask).data().iter().filter(|&&v| v != 0.0).count();
        Ok(Self {
            logits,
            rho,
            alpha,
            pi,
            mask,
            kept,
        })
    }
}

/// Pruning and merging rate parameters for every block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSet {
    pub token_count: usize,
    /// Empty when pruning is disabled.
    pub prune: Vec<RateParam>,
    /// Empty when merging is disabled.
    pub merge: Vec<RateParam>,
    pub order: CompressionOrder,
}

impl RateSet {
    pub fn new(token_count: usize, depth: usize, prune: bool, merge: bool, order: CompressionOrder) -> Result<Self> {
        if !prune && !merge {
            return Err(Error::Config("at least one of pruning and merging must be enabled".into()));
        }
        let make = |on: bool, role| {
            if on {
                (0..depth).map(|l| RateParam::uniform(token_count, role, l)).collect()
            } else {
                vec![]
            }
        };
        Ok(Self {
            token_count,
            prune: make(prune, RateRole::Prune),
            merge: make(merge, RateRole::Merge),
            order,
        })
    }

    pub fn depth(&self) -> usize {
        self.prune.len().max(self.merge.len())
    }

    /// Rates whose hard masks reproduce `schedule` exactly: each block's
    /// probabilities are one-hot at the candidate removing `N − kept` tokens.
    /// A stage is disabled when all its counts equal `N`.
    pub fn from_schedule(schedule: &CompressionSchedule) -> Result<Self> {
        schedule.validate()?;
        let n = schedule.token_count;
        let one_hot = |kept: usize, role, block| {
            let mut logits = vec![-1e3; n];
            logits[n - kept] = 0.0;
            RateParam { logits, role, block }
        };
        let stage = |kept: &[usize], role| -> Vec<RateParam> {
            if kept.iter().all(|&k| k == n) {
                vec![]
            } else {
                kept.iter().enumerate().map(|(l, &k)| one_hot(k, role, l)).collect()
            }
        };
        let mut prune = stage(&schedule.prune_kept, RateRole::Prune);
        let merge = stage(&schedule.merge_kept, RateRole::Merge);
        if prune.is_empty() && merge.is_empty() {
            prune = schedule.prune_kept.iter().enumerate().map(|(l, &k)| one_hot(k, RateRole::Prune, l)).collect();
        }
        Ok(Self {
            token_count: n,
            prune,
            merge,
            order: schedule.order,
        })
    }

    /// Records every rate on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundRates> {
        let bind_all = |tape: &mut Tape, ps: &[RateParam]| -> Result<Vec<BoundRate>> {
            ps.iter().map(|p| BoundRate::bind(tape, &p.logits, trainable)).collect()
        };
        let prune = bind_all(tape, &self.prune)?;
        let merge = bind_all(tape, &self.merge)?;
        Ok(BoundRates {
            token_count: self.token_count,
            depth: self.depth(),
            prune,
            merge,
            order: self.order,
        })
    }

    /// Schedule given by the current hard masks.
    pub fn schedule(&self) -> Result<CompressionSchedule> {
        let mut tape = Tape::new();
        Ok(self.bind(&mut tape, false)?.schedule())
    }

    /// All logit vectors, prune blocks first.
    pub fn logits_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.prune.iter_mut().chain(self.merge.iter_mut()).map(|p| &mut p.logits)
    }
}

/// A [`RateSet`] recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundRates {
    pub token_count: usize,
    pub depth: usize,
    pub prune: Vec<BoundRate>,
    pub merge: Vec<BoundRate>,
    pub order: CompressionOrder,
}

impl BoundRates {
    pub fn schedule(&self) -> CompressionSchedule {
        let n = self.token_count;
        let kept = |v: &[BoundRate], l: usize| v.get(l).map_or(n, |r| r.kept);
        CompressionSchedule {
            token_count: n,
            prune_kept: (0..self.depth).map(|l| kept(&self.prune, l)).collect(),
            merge_kept: (0..self.depth).map(|l| kept(&self.merge, l)).collect(),
            order: self.order,
        }
    }

    /// Logit vars, prune blocks first (matches [`RateSet::logits_mut`]).
    pub fn logit_vars(&self) -> Vec<Var> {
        self.prune.iter().chain(&self.merge).map(|r| r.logits).collect()
    }

    /// Per-block `(α_p, α_m)` vars.
    pub fn alphas(&self) -> Vec<(Option<Var>, Option<Var>)> {
        (0..self.depth)
            .map(|l| (self.prune.get(l).map(|r| r.alpha), self.merge.get(l).map(|r| r.alpha)))
            .collect()
    }
}

/// Parameters added by the rate reparameterization: `2NL`.
pub fn overhead_parameters(n: u64, depth: u64) -> u64 {
    2 * n * depth
}

/// Operations of the mask machinery: `(N² + 5N)L/2`.
pub fn overhead_flops(n: u64, depth: u64) -> u64 {
    (n * n + 5 * n) * depth / 2
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    fn bind(logits: &[f64]) -> (Tape, BoundRate) {
        let mut t = Tape::new();
        let r = BoundRate::bind(&mut t, logits, true).unwrap();
        (t, r)
    }

    #[test]
    fn uniform_probs_and_alpha() {
        let (t, r) = bind(&[0.0; 4]);
        assert!(t.value(r.rho).data().iter().all(|&p| close(p, 0.25)));
        assert!(close(t.item(r.alpha), 0.375));
    }

    #[test]
    fn probs_from_log_three() {
        let (t, r) = bind(&[0.0, 3f64.ln()]);
        let rho = t.value(r.rho).data();
        assert!(close(rho[0], 0.25) && close(rho[1], 0.75));
    }

    #[test]
    fn token_probs_by_hand() {
        let mut t = Tape::new();
        let rho = t.constant(Tensor::vector(vec![0.5, 0.25, 0.25])).unwrap();
        let pi = token_probs(&mut t, rho).unwrap();
        assert_eq!(t.value(pi).data(), &[0.0, 0.25, 0.5]);
        assert_eq!(hard_mask(&[0.0, 0.25, 0.5], 0.25), vec![1.0, 0.0, 0.0]);
        assert_eq!(hard_mask(&[0.0, 0.25, 0.5], 0.0), vec![1.0; 3]);
    }

    #[test]
    fn one_hot_exactness() {
        let n = 6;
        for j in 0..n {
            let mut logits = vec![-1e3; n];
            logits[j] = 0.0;
            let (t, r) = bind(&logits);
            assert!(close(t.item(r.alpha), j as f64 / n as f64));
            assert_eq!(r.kept, n - j);
        }
    }

    #[test]
    fn mask_gradient_is_minus_pi_gradient() {
        let mut t = Tape::new();
        let pi = t.param(Tensor::vector(vec![0.0, 0.2, 0.6])).unwrap();
        let a = t.constant(Tensor::scalar(0.3)).unwrap();
        let m = token_mask(&mut t, pi, a).unwrap();
        assert_eq!(t.value(m).data(), &[1.0, 1.0, 0.0]);
        let c = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let p = t.mul(m, c).unwrap();
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(pi).unwrap().data(), &[-1.0, -2.0, -3.0]);
    }

    #[test]
    fn combine_and_attention_mask() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 1.0, 0.0])).unwrap();
        let b = t.constant(Tensor::vector(vec![1.0, 0.0, 1.0])).unwrap();
        let c = t.constant(Tensor::vector(vec![1.0, 1.0, 1.0])).unwrap();
        let m = combine_masks(&mut t, a, b, c).unwrap();
        assert_eq!(t.value(m).data(), &[1.0, 0.0, 0.0]);
        let big = attention_mask(&mut t, a).unwrap();
        let s = t.constant(Tensor::zeros(&[3, 3])).unwrap();
        let sm = masked_softmax(&mut t, s, big).unwrap();
        assert_eq!(t.value(sm).row(0), &[0.5, 0.5, 0.0]);
        let row2: f64 = t.value(sm).row(2).iter().sum();
        assert!(close(row2, 1.0));
    }

    #[test]
    fn overhead_closed_forms() {
        assert_eq!(overhead_parameters(196, 12), 4704);
        assert_eq!(overhead_flops(196, 12), 236_376);
    }

    #[test]
    fn uniform_rate_set_schedule() {
        let rs = RateSet::new(16, 4, true, true, CompressionOrder::PruneThenMerge).unwrap();
        let s = rs.schedule().unwrap();
        assert_eq!(s.prune_kept, vec![8; 4]);
    }
}
