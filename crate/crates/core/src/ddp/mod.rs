//! The differentiable discrete proxy.
//!
//! Each block carries learnable logits over the candidate rates
//! `C_k = (k−1)/N`. Their softmax `ρ` gives an expected rate `α = Σ C_k ρ_k`
//! and token-level removal probabilities `π` in importance-rank space;
//! thresholding `π < α` yields a 0-1 keep mask whose gradient flows back to
//! `π` through a straight-through pass. Masks act on attention through
//! `M_ij = [i = j] + [i ≠ j] m_j`.

mod hook;
mod rates;

pub use hook::{MaskState, MaskedCompressor};
pub use rates::{
    alpha, attention_mask, candidates, combine_masks, hard_mask, masked_softmax, overhead_flops,
    overhead_parameters, probs, token_mask, token_probs, BoundRate, BoundRates, RateParam,
    RateRole, RateSet,
};
