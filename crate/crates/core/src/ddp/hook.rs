use super::rates::BoundRates;
use crate::autograd::{Tape, Tensor, Var};
use crate::cost::CompressionOrder;
use crate::error::Result;
use crate::token_ops::{assign_destinations, importance, sort_tokens, ImportanceOrder, SortMetric};
use crate::vit::{CompressionHook, HookInput, HookOutput};

/// Per-block masks of one image in search mode.
#[derive(Clone, Debug)]
pub struct MaskState {
    /// Final token-space keep mask leaving the block.
    pub m: Var,
    /// Rank-space pruning mask (`None` when pruning is disabled).
    pub m_p: Option<Var>,
    /// Rank-space merging mask (`None` when merging is disabled).
    pub m_m: Option<Var>,
    pub order: ImportanceOrder,
    /// `(source, destination)` token pairs merged in this block.
    pub merges: Vec<(usize, usize)>,
}

/// Search-mode compression: sorts tokens, turns rank-space rate masks into
/// token-space masks, merges sources into destinations and masks the
/// removed tokens. The token axis never shrinks.
pub struct MaskedCompressor<'a> {
    pub rates: &'a BoundRates,
    pub metric: SortMetric,
    pub states: Vec<MaskState>,
}

impl<'a> MaskedCompressor<'a> {
    pub fn new(rates: &'a BoundRates, metric: SortMetric) -> Self {
        Self {
            rates,
            metric,
            states: Vec::with_capacity(rates.depth),
        }
    }
}

fn hard(tape: &Tape, v: Option<Var>, i: usize) -> bool {
    v.is_none_or(|v| tape.value(v).data()[i] != 0.0)
}

fn mul_opt(tape: &mut Tape, a: Option<Var>, b: Option<Var>) -> Result<Option<Var>> {
    Ok(match (a, b) {
        (Some(a), Some(b)) => Some(tape.mul(a, b)?),
        (a, None) => a,
        (None, b) => b,
    })
}

impl CompressionHook for MaskedCompressor<'_> {
    fn compress(&mut self, tape: &mut Tape, input: HookInput<'_>) -> Result<HookOutput> {
        let l = input.block;
        let n = tape.value(input.x_hat).rows();
        let mask_vals = input.mask.map(|m| tape.value(m).data().to_vec());
        let alive: Vec<bool> = match &mask_vals {
            Some(m) => m.iter().map(|&v| v != 0.0).collect(),
            None => vec![true; n],
        };
        let positions: Vec<usize> = (0..n).collect();
        let scores = {
            let probs: Vec<&Tensor> = input.attention.probs.iter().map(|&p| tape.value(p)).collect();
            let values: Vec<&Tensor> = input.attention.values.iter().map(|&v| tape.value(v)).collect();
            importance(self.metric, &probs, &values, &alive, &positions, l)
        };
        let order = sort_tokens(&scores, mask_vals.as_deref())?;
        let ranks = order.ranks();
        let to_tokens = |tape: &mut Tape, m: Option<Var>| -> Result<Option<Var>> {
            m.map(|m| tape.gather(m, &ranks)).transpose()
        };
        let m_p = self.rates.prune.get(l).map(|r| r.mask);
        let m_m = self.rates.merge.get(l).map(|r| r.mask);
        let mp_tok = to_tokens(tape, m_p)?;
        let mm_tok = to_tokens(tape, m_m)?;

        // First stage removes tokens outright; merge sources are the
        // tokens alive before the merge stage but masked by it.
        let (before_merge, after_merge, final_mask) = match self.rates.order {
            CompressionOrder::PruneThenMerge => {
                let after_prune = mul_opt(tape, input.mask, mp_tok)?;
                let after_merge = mul_opt(tape, after_prune, mm_tok)?;
                (after_prune, after_merge, after_merge)
            }
            CompressionOrder::MergeThenPrune => {
                let after_merge = mul_opt(tape, input.mask, mm_tok)?;
                let fin = mul_opt(tape, after_merge, mp_tok)?;
                (input.mask, after_merge, fin)
            }
        };

        let mut x = input.x_hat;
        let mut merges = Vec::new();
        if let Some(mm) = mm_tok {
            let sources: Vec<usize> = order
                .order
                .iter()
                .copied()
                .filter(|&i| hard(tape, before_merge, i) && !hard(tape, Some(mm), i))
                .collect();
            let dests: Vec<usize> = order.order[1..]
                .iter()
                .copied()
                .filter(|&i| hard(tape, after_merge, i))
                .collect();
            if !sources.is_empty() && !dests.is_empty() {
                let assigned = assign_destinations(tape.value(input.x_hat), &sources, &dests);
                let mut dest_of = vec![None; n];
                for (&s, &d) in sources.iter().zip(&assigned) {
                    dest_of[s] = Some(d);
                    merges.push((s, d));
                }
                let neg = tape.scale(mm, -1.0)?;
                let not_kept = tape.add_scalar(neg, 1.0)?;
                let w = match before_merge {
                    Some(b) => tape.mul(b, not_kept)?,
                    None => not_kept,
                };
                x = tape.merge_rows(x, w, &dest_of)?;
            }
        }
        let m = match final_mask {
            Some(m) => m,
            None => tape.constant(Tensor::ones(&[n]))?,
        };
        self.states.push(MaskState {
            m,
            m_p,
            m_m,
            order,
            merges,
        });
        Ok(HookOutput { x, mask: Some(m) })
    }
}
