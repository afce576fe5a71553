use super::config::ModelConfig;
use super::params::{BoundBlock, BoundParams};
use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Attention quantities of one block, recorded on the tape.
#[derive(Clone, Debug)]
pub struct AttentionState {
    /// Pre-softmax scores per head (N×N).
    pub scores: Vec<Var>,
    /// Masked post-softmax attention per head (N×N).
    pub probs: Vec<Var>,
    /// Value matrices per head (N×dh).
    pub values: Vec<Var>,
    /// Class-token attention averaged over heads; masked positions are −∞.
    pub class_attention: Vec<f64>,
}

/// What a compression hook receives between attention and MLP.
pub struct HookInput<'a> {
    pub block: usize,
    /// Post-attention tokens `X̂`.
    pub x_hat: Var,
    pub attention: &'a AttentionState,
    /// Token-space keep mask entering the block (`None` means all ones).
    pub mask: Option<Var>,
}

pub struct HookOutput {
    pub x: Var,
    pub mask: Option<Var>,
}

/// Transforms `X̂` between attention and MLP in every block.
pub trait CompressionHook {
    fn compress(&mut self, tape: &mut Tape, input: HookInput<'_>) -> Result<HookOutput>;
}

/// Leaves every token in place.
pub struct NoCompression;

impl CompressionHook for NoCompression {
    fn compress(&mut self, _tape: &mut Tape, input: HookInput<'_>) -> Result<HookOutput> {
        Ok(HookOutput {
            x: input.x_hat,
            mask: input.mask,
        })
    }
}

/// Splits an `H×W×C` image (row-major, channel fastest) into flattened
/// non-overlapping patches, one per row, in raster order.
pub fn patchify(config: &ModelConfig, image: &Tensor) -> Result<Tensor> {
    let (s, p, c) = (config.image_size, config.patch_size, config.channels);
    if image.shape() != [s, s, c] {
        return Err(Error::shape(
            "patchify",
            format!("{:?} vs expected {:?}", image.shape(), [s, s, c]),
        ));
    }
    let g = config.grid();
    let pd = config.patch_dim();
    let src = image.data();
    let mut data = Vec::with_capacity(g * g * pd);
    for gy in 0..g {
        for gx in 0..g {
            for py in 0..p {
                let y = gy * p + py;
                let start = (y * s + gx * p) * c;
                data.extend_from_slice(&src[start..start + p * c]);
            }
        }
    }
    Tensor::matrix(g * g, pd, data)
}

/// Class token plus projected patches, each with its positional embedding.
pub fn patch_embed(tape: &mut Tape, config: &ModelConfig, p: &BoundParams, image: &Tensor) -> Result<Var> {
    let patches = tape.constant(patchify(config, image)?)?;
    let proj = tape.matmul(patches, p.patch_w)?;
    let proj = tape.add_bias(proj, p.patch_b)?;
    let tokens = tape.concat_rows(&[p.cls, proj])?;
    tape.add(tokens, p.pos)
}

fn class_attention(tape: &Tape, probs: &[Var], mask: Option<&[f64]>) -> Vec<f64> {
    let n = tape.value(probs[0]).cols();
    let mut out = vec![0.0; n];
    for &p in probs {
        for (o, v) in out.iter_mut().zip(tape.value(p).row(0)) {
            *o += v;
        }
    }
    let h = probs.len() as f64;
    for (j, o) in out.iter_mut().enumerate() {
        *o /= h;
        if mask.is_some_and(|m| m[j] == 0.0) {
            *o = f64::NEG_INFINITY;
        }
    }
    out
}

/// `X̂ = X + Attention(LN(X))` with softmax masked by `mask` when present.
pub fn attention(
    tape: &mut Tape,
    config: &ModelConfig,
    b: &BoundBlock,
    x: Var,
    mask: Option<Var>,
) -> Result<(Var, AttentionState)> {
    let n = tape.value(x).rows();
    let mask_matrix = match mask {
        Some(m) => {
            let mv = tape.value(m);
            if mv.len() != n {
                return Err(Error::shape("block", format!("mask length {} vs {n} tokens", mv.len())));
            }
            if mv.data()[0] == 0.0 {
                return Err(Error::domain("block", "class token masked"));
            }
            Some(tape.attention_mask(m)?)
        }
        None => None,
    };
    let ln = tape.layer_norm(x, b.ln1_g, b.ln1_b)?;
    let scale = 1.0 / (config.head_dim() as f64).sqrt();
    let mut scores = Vec::with_capacity(b.heads.len());
    let mut probs = Vec::with_capacity(b.heads.len());
    let mut values = Vec::with_capacity(b.heads.len());
    let mut outs = Vec::with_capacity(b.heads.len());
    for h in &b.heads {
        let q = tape.matmul(ln, h.wq)?;
        let q = tape.add_bias(q, h.bq)?;
        let k = tape.matmul(ln, h.wk)?;
        let k = tape.add_bias(k, h.bk)?;
        let v = tape.matmul(ln, h.wv)?;
        let v = tape.add_bias(v, h.bv)?;
        let kt = tape.transpose(k)?;
        let s = tape.matmul(q, kt)?;
        let s = tape.scale(s, scale)?;
        let a = match mask_matrix {
            Some(mm) => tape.masked_softmax(s, mm)?,
            None => tape.row_softmax(s)?,
        };
        let o = tape.matmul(a, v)?;
        scores.push(s);
        probs.push(a);
        values.push(v);
        outs.push(o);
    }
    let cat = tape.concat_cols(&outs)?;
    let proj = tape.matmul(cat, b.wo)?;
    let proj = tape.add_bias(proj, b.bo)?;
    let x_hat = tape.add(x, proj)?;
    let mask_values = mask.map(|m| tape.value(m).data().to_vec());
    let class_attention = class_attention(tape, &probs, mask_values.as_deref());
    Ok((
        x_hat,
        AttentionState {
            scores,
            probs,
            values,
            class_attention,
        },
    ))
}

/// `X + MLP(LN(X))`.
pub fn mlp(tape: &mut Tape, b: &BoundBlock, x: Var) -> Result<Var> {
    let ln = tape.layer_norm(x, b.ln2_g, b.ln2_b)?;
    let h = tape.matmul(ln, b.w1)?;
    let h = tape.add_bias(h, b.b1)?;
    let h = tape.gelu(h)?;
    let o = tape.matmul(h, b.w2)?;
    let o = tape.add_bias(o, b.b2)?;
    tape.add(x, o)
}

/// One transformer block with compression between attention and MLP.
pub fn block_forward(
    tape: &mut Tape,
    config: &ModelConfig,
    b: &BoundBlock,
    block: usize,
    x: Var,
    mask: Option<Var>,
    hook: &mut dyn CompressionHook,
) -> Result<(Var, Option<Var>, AttentionState)> {
    let (x_hat, state) = attention(tape, config, b, x, mask)?;
    let out = hook.compress(
        tape,
        HookInput {
            block,
            x_hat,
            attention: &state,
            mask,
        },
    )?;
    if let Some(m) = out.mask {
        if tape.value(m).data()[0] == 0.0 {
            return Err(Error::domain("block", "compression removed the class token"));
        }
    }
    let y = mlp(tape, b, out.x)?;
    Ok((y, out.mask, state))
}

/// Class logits (1×classes) from the class token's final representation.
pub fn classify(tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
    let cls = tape.gather_rows(x, &[0])?;
    let ln = tape.layer_norm(cls, p.norm_g, p.norm_b)?;
    let logits = tape.matmul(ln, p.head_w)?;
    tape.add_bias(logits, p.head_b)
}

/// Output of a taped forward pass over one image.
pub struct TapeForward {
    pub logits: Var,
    pub states: Vec<AttentionState>,
    pub final_mask: Option<Var>,
}

/// Taped forward pass over one image. The token axis never shrinks; hooks
/// express compression through masks and in-place merges.
pub fn forward_image(
    tape: &mut Tape,
    config: &ModelConfig,
    p: &BoundParams,
    image: &Tensor,
    hook: &mut dyn CompressionHook,
) -> Result<TapeForward> {
    let mut x = patch_embed(tape, config, p, image)?;
    let mut mask = None;
    let mut states = Vec::with_capacity(p.blocks.len());
    for (l, b) in p.blocks.iter().enumerate() {
        let (y, m, s) = block_forward(tape, config, b, l, x, mask, hook)?;
        x = y;
        mask = m;
        states.push(s);
    }
    Ok(TapeForward {
        logits: classify(tape, p, x)?,
        states,
        final_mask: mask,
    })
}

/// Mean negative log-likelihood of `labels` under row-wise `logits`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, k) = (tape.value(logits).rows(), tape.value(logits).cols());
    if labels.len() != b {
        return Err(Error::shape("cross_entropy", format!("{b} rows vs {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::domain("cross_entropy", format!("label {bad} out of {k} classes")));
    }
    let ls = tape.log_softmax(logits)?;
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| i * k + y).collect();
    let picked = tape.gather(ls, &idx)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::BackboneParams;

    #[test]
    fn cross_entropy_values() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(&[1, 10])).unwrap();
        let l = cross_entropy(&mut t, z, &[3]).unwrap();
        assert!((t.item(l) - 10f64.ln()).abs() < 1e-12);
        let z = t.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap()).unwrap();
        let l = cross_entropy(&mut t, z, &[1]).unwrap();
        assert!((t.item(l) - 0.313_261_687_518_222_8).abs() < 1e-12);
        assert!(cross_entropy(&mut t, z, &[2]).is_err());
    }

    #[test]
    fn patch_embed_zero_image_gives_class_row() {
        let cfg = ModelConfig {
            image_size: 8,
            ..ModelConfig::toy()
        };
        let mut params = BackboneParams::init(&cfg, 1).unwrap();
        params.pos = Tensor::zeros(params.pos.shape());
        params.patch_w = Tensor::zeros(params.patch_w.shape());
        let mut t = Tape::new();
        let bound = params.bind(&mut t, false).unwrap();
        let img = Tensor::zeros(&[8, 8, 3]);
        let x = patch_embed(&mut t, &cfg, &bound, &img).unwrap();
        let xv = t.value(x);
        assert_eq!(xv.rows(), 5);
        assert_eq!(xv.row(0), params.cls.data());
        assert!(xv.data()[32..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patchify_permutes_with_patches() {
        let cfg = ModelConfig {
            image_size: 8,
            ..ModelConfig::toy()
        };
        let img = Tensor::new(vec![8, 8, 3], (0..192).map(f64::from).collect()).unwrap();
        let p = patchify(&cfg, &img).unwrap();
        assert_eq!(p.rows(), 4);
        assert_eq!(&p.row(1)[..3], &[12.0, 13.0, 14.0]);
        assert_eq!(&p.row(2)[..3], &[96.0, 97.0, 98.0]);
    }

    #[test]
    fn class_attention_sums_to_one() {
        let cfg = ModelConfig::toy();
        let params = BackboneParams::init(&cfg, 5).unwrap();
        let mut t = Tape::new();
        let bound = params.bind(&mut t, false).unwrap();
        let img = Tensor::full(&[16, 16, 3], 0.3);
        let x = patch_embed(&mut t, &cfg, &bound, &img).unwrap();
        let mut mv = vec![1.0; 17];
        mv[4] = 0.0;
        mv[9] = 0.0;
        let m = t.constant(Tensor::vector(mv)).unwrap();
        let (_, st) = attention(&mut t, &cfg, &bound.blocks[0], x, Some(m)).unwrap();
        let s: f64 = st.class_attention.iter().filter(|v| v.is_finite()).sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(st.class_attention[4], f64::NEG_INFINITY);
    }
}
