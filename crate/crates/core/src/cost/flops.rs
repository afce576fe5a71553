use super::schedule::CompressionSchedule;
use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::vit::ModelConfig;

/// Attention operations of a block over `n` tokens of width `c`.
pub fn attention_flops(n: u64, c: u64) -> u64 {
    4 * n * c * c + 2 * n * n * c
}

/// MLP operations of a block over `n` tokens of width `c`.
pub fn mlp_flops(n: u64, c: u64) -> u64 {
    8 * n * c * c
}

/// Blocks-only operation count: attention at each block's incoming token
/// count, MLP at its outgoing count. Patch embedding and head are excluded.
pub fn flops(schedule: &CompressionSchedule, embed_dim: usize) -> Result<u64> {
    schedule.validate()?;
    let c = embed_dim as u64;
    Ok(schedule
        .counts()
        .iter()
        .map(|k| attention_flops(k.tokens_in as u64, c) + mlp_flops(k.tokens_out as u64, c))
        .sum())
}

/// Operations of the patch projection and classifier head, for callers that
/// want whole-model totals.
pub fn stem_and_head_flops(config: &ModelConfig) -> u64 {
    let d = config.embed_dim as u64;
    let patches = (config.token_count() - 1) as u64;
    patches * config.patch_dim() as u64 * d + d * config.class_count as u64
}

pub fn baseline_flops(config: &ModelConfig) -> u64 {
    let s = CompressionSchedule::zero(config.token_count(), config.depth);
    flops(&s, config.embed_dim).expect("zero schedule is valid")
}

/// Operations when only the class token survives the first block.
pub fn min_flops(config: &ModelConfig) -> u64 {
    let s = CompressionSchedule::prune_only(config.token_count(), vec![1; config.depth]);
    flops(&s, config.embed_dim).expect("class-only schedule is valid")
}

/// Effective per-block rates `α^l = max(α^{l−1}, α_p^l, α_m^l)`. The max is
/// taken in value while the gradient reaches every argument unchanged.
pub fn effective_alpha_vars(tape: &mut Tape, alphas: &[(Option<Var>, Option<Var>)]) -> Result<Vec<Var>> {
    let mut prev: Option<Var> = None;
    let mut out = Vec::with_capacity(alphas.len());
    for &(ap, am) in alphas {
        let args: Vec<Var> = [prev, ap, am].into_iter().flatten().collect();
        let alpha = match args.len() {
            0 => tape.constant(Tensor::scalar(0.0))?,
            1 => args[0],
            _ => {
                let max = args.iter().map(|&a| tape.item(a)).fold(f64::NEG_INFINITY, f64::max);
                let hard = tape.constant(Tensor::scalar(max))?;
                let mut sum = args[0];
                for &a in &args[1..] {
                    sum = tape.add(sum, a)?;
                }
                tape.ste(hard, sum)?
            }
        };
        out.push(alpha);
        prev = Some(alpha);
    }
    Ok(out)
}

/// Differentiable operation count from expected rates, divided by `unit`.
/// Tokens leaving block `l` number `N(1 − α^l)`; attention uses the
/// incoming count.
pub fn flops_var(
    tape: &mut Tape,
    alphas: &[(Option<Var>, Option<Var>)],
    token_count: usize,
    embed_dim: usize,
    unit: f64,
) -> Result<Var> {
    let effective = effective_alpha_vars(tape, alphas)?;
    flops_from_effective(tape, &effective, token_count, embed_dim, unit)
}

/// [`flops_var`] from already combined effective rates.
pub fn flops_from_effective(
    tape: &mut Tape,
    effective: &[Var],
    token_count: usize,
    embed_dim: usize,
    unit: f64,
) -> Result<Var> {
    if unit <= 0.0 {
        return Err(Error::Config(format!("flops unit must be positive, got {unit}")));
    }
    let n = token_count as f64;
    let c = embed_dim as f64;
    let mut n_in = tape.constant(Tensor::scalar(n))?;
    let mut total: Option<Var> = None;
    for &alpha in effective {
        let neg = tape.scale(alpha, -n)?;
        let n_out = tape.add_scalar(neg, n)?;
        let lin = tape.scale(n_in, 4.0 * c * c / unit)?;
        let sq = tape.square(n_in)?;
        let quad = tape.scale(sq, 2.0 * c / unit)?;
        let attn = tape.add(lin, quad)?;
        let mlp = tape.scale(n_out, 8.0 * c * c / unit)?;
        let block = tape.add(attn, mlp)?;
        total = Some(match total {
            Some(t) => tape.add(t, block)?,
            None => block,
        });
        n_in = n_out;
    }
    total.ok_or_else(|| Error::Config("no blocks".into()))
}

/// `(F − T)²`.
pub fn flops_loss(tape: &mut Tape, f: Var, target: f64) -> Result<Var> {
    let d = tape.add_scalar(f, -target)?;
    tape.square(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_hand_value() {
        let s = CompressionSchedule::zero(4, 1);
        assert_eq!(flops(&s, 2).unwrap(), 256);
    }

    #[test]
    fn vit_base_baseline() {
        let f = baseline_flops(&ModelConfig::vit_base()) as f64 / 1e9;
        assert!((f - 17.447).abs() < 0.01, "{f}");
    }

    #[test]
    fn differentiable_matches_integer_at_grid_points() {
        let s = CompressionSchedule {
            token_count: 9,
            prune_kept: vec![7, 9, 3],
            merge_kept: vec![9, 5, 4],
            order: Default::default(),
        };
        let mut t = Tape::new();
        let alphas: Vec<_> = s
            .prune_alphas()
            .iter()
            .zip(s.merge_alphas())
            .map(|(&p, m)| {
                (
                    Some(t.param(Tensor::scalar(p)).unwrap()),
                    Some(t.param(Tensor::scalar(m)).unwrap()),
                )
            })
            .collect();
        let f = flops_var(&mut t, &alphas, 9, 4, 1.0).unwrap();
        assert!((t.item(f) - flops(&s, 4).unwrap() as f64).abs() < 1e-9);
    }

    #[test]
    fn loss_and_gradient() {
        let mut t = Tape::new();
        let f = t.param(Tensor::scalar(3.5)).unwrap();
        let l = flops_loss(&mut t, f, 2.5).unwrap();
        assert_eq!(t.item(l), 1.0);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(f).unwrap().item(), 2.0);
    }
}
