//! Central finite differences against reverse mode for every tape
//! primitive, and the rate-logit gradient of the full search loss against
//! the chain assembled by hand from mask and rate gradients.

use diffrate::autograd::{Tape, Tensor, Var};
use diffrate::cost::{effective_alpha_vars, flops_from_effective, flops_loss, hw_loss, CompressionOrder};
use diffrate::ddp::{alpha, candidates, probs, token_probs, BoundRates, MaskedCompressor, RateSet};
use diffrate::search::{total_loss, LossTerms, SearchConfig};
use diffrate::token_ops::SortMetric;
use diffrate::vit::{cross_entropy, forward_image, BackboneParams, ModelConfig};
use diffrate::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

type Op = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Contracts the op output with fixed random weights to get a scalar.
fn scalar_loss(inputs: &[Tensor], f: &Op, weights_seed: u64, grad: bool) -> (f64, Vec<Tensor>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone()).unwrap()).collect();
    let y = f(&mut tape, &vars).unwrap();
    let shape = tape.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
    let w = tape.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0)).unwrap();
    let prod = tape.mul(y, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    let value = tape.item(loss);
    if !grad {
        return (value, Vec::new());
    }
    let g = tape.backward(loss).unwrap();
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    (value, grads)
}

/// Worst norm-wise relative error between analytic and numeric gradients
/// over the inputs listed in `check`.
fn fd_error(inputs: &[Tensor], check: &[usize], f: &Op) -> f64 {
    let (_, analytic) = scalar_loss(inputs, f, 99, true);
    let mut worst: f64 = 0.0;
    for &i in check {
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            *slot = (scalar_loss(&plus, f, 99, false).0 - scalar_loss(&minus, f, 99, false).0) / (2.0 * H);
        }
        let a = analytic[i].data();
        let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(numeric.iter().map(|x| x * x).sum::<f64>().sqrt());
        worst = worst.max(if scale < 1e-12 { diff } else { diff / scale });
    }
    worst
}

fn record(out: &mut Vec<(&'static str, f64)>, name: &'static str, inputs: Vec<Tensor>, check: &[usize], f: &Op) {
    out.push((name, fd_error(&inputs, check, f)));
}

/// Worst relative finite-difference error of every primitive, by name.
pub fn primitive_errors() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    elementwise_and_linear_primitives(&mut out);
    row_and_structural_primitives(&mut out);
    mask_primitives(&mut out);
    rate_and_cost_compositions(&mut out);
    out
}

fn elementwise_and_linear_primitives(out: &mut Vec<(&'static str, f64)>) {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let m = rand_tensor(&mut r, &[4, 2], -1.0, 1.0);
    let pos = rand_tensor(&mut r, &[3, 4], 0.2, 2.0);
    let s = rand_tensor(&mut r, &[], -1.0, 1.0);
    record(out, "matmul", vec![a.clone(), m.clone()], &[0, 1], &|t, v| t.matmul(v[0], v[1]));
    record(out, "add", vec![a.clone(), b.clone()], &[0, 1], &|t, v| t.add(v[0], v[1]));
    record(out, "sub", vec![a.clone(), b.clone()], &[0, 1], &|t, v| t.sub(v[0], v[1]));
    record(out, "mul", vec![a.clone(), b.clone()], &[0, 1], &|t, v| t.mul(v[0], v[1]));
    record(out, "scale", vec![a.clone()], &[0], &|t, v| t.scale(v[0], -2.5));
    record(out, "add_scalar", vec![a.clone()], &[0], &|t, v| t.add_scalar(v[0], 0.7));
    record(out, "mul_scalar", vec![a.clone(), s.clone()], &[0, 1], &|t, v| t.mul_scalar(v[0], v[1]));
    record(out, "transpose", vec![a.clone()], &[0], &|t, v| t.transpose(v[0]));
    record(out, "reshape", vec![a.clone()], &[0], &|t, v| t.reshape(v[0], vec![2, 6]));
    record(out, "exp", vec![a.clone()], &[0], &|t, v| t.exp(v[0]));
    record(out, "log", vec![pos.clone()], &[0], &|t, v| t.log(v[0]));
    record(out, "cosh", vec![a.clone()], &[0], &|t, v| t.cosh(v[0]));
    record(out, "log_cosh", vec![a.clone()], &[0], &|t, v| t.log_cosh(v[0]));
    record(out, "square", vec![a.clone()], &[0], &|t, v| t.square(v[0]));
    record(out, "gelu", vec![a.clone()], &[0], &|t, v| t.gelu(v[0]));
    record(out, "mean", vec![a.clone()], &[0], &|t, v| t.mean(v[0]));
    record(out, "sum", vec![a.clone()], &[0], &|t, v| t.sum(v[0]));
}

fn row_and_structural_primitives(out: &mut Vec<(&'static str, f64)>) {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut r, &[3, 4], -2.0, 2.0);
    let b = rand_tensor(&mut r, &[3, 2], -1.0, 1.0);
    let c = rand_tensor(&mut r, &[2, 4], -1.0, 1.0);
    let g = rand_tensor(&mut r, &[4], 0.5, 1.5);
    let bias = rand_tensor(&mut r, &[4], -1.0, 1.0);
    record(out, "row_softmax", vec![a.clone()], &[0], &|t, v| t.row_softmax(v[0]));
    record(out, "log_softmax", vec![a.clone()], &[0], &|t, v| t.log_softmax(v[0]));
    record(out, "layer_norm", vec![a.clone(), g.clone(), bias.clone()], &[0, 1, 2], &|t, v| {
        t.layer_norm(v[0], v[1], v[2])
    });
    record(out, "add_bias", vec![a.clone(), bias.clone()], &[0, 1], &|t, v| t.add_bias(v[0], v[1]));
    record(out, "concat_cols", vec![a.clone(), b.clone()], &[0, 1], &|t, v| t.concat_cols(&[v[0], v[1]]));
    record(out, "concat_rows", vec![a.clone(), c.clone()], &[0, 1], &|t, v| t.concat_rows(&[v[0], v[1]]));
    record(out, "gather_rows", vec![a.clone()], &[0], &|t, v| t.gather_rows(v[0], &[2, 0, 2]));
    record(out, "gather", vec![a.clone()], &[0], &|t, v| t.gather(v[0], &[11, 3, 3, 0]));
    let xs: Vec<Tensor> = [0.3, -0.2, 0.9, 0.1].iter().map(|&x| Tensor::scalar(x)).collect();
    record(out, "max_scalars", xs, &[0, 1, 2, 3], &|t, v| t.max_scalars(v));
    // The straight-through pass is the identity in its soft argument.
    record(out, "ste", vec![a.clone()], &[0], &|t, v| t.ste(v[0], v[0]));
}

fn mask_primitives(out: &mut Vec<(&'static str, f64)>) {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let s = rand_tensor(&mut r, &[4, 4], -2.0, 2.0);
    let m = rand_tensor(&mut r, &[4], 0.2, 1.0);
    let mm = rand_tensor(&mut r, &[4, 4], 0.2, 1.0);
    record(out, "masked_softmax", vec![s.clone(), mm], &[0, 1], &|t, v| t.masked_softmax(v[0], v[1]));
    record(out, "attention_mask", vec![m.clone()], &[0], &|t, v| t.attention_mask(v[0]));
    record(out, "attention_mask+masked_softmax", vec![s, m], &[0, 1], &|t, v| {
        let big = t.attention_mask(v[1])?;
        t.masked_softmax(v[0], big)
    });
    let x = rand_tensor(&mut r, &[5, 3], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[5], 0.1, 1.0);
    let dest = [None, None, Some(1), Some(0), Some(1)];
    record(out, "merge_rows", vec![x, w], &[0, 1], &move |t, v| t.merge_rows(v[0], v[1], &dest));
}

fn rate_and_cost_compositions(out: &mut Vec<(&'static str, f64)>) {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let logits = rand_tensor(&mut r, &[6], -1.0, 1.0);
    record(out, "probs", vec![logits.clone()], &[0], &|t, v| probs(t, v[0]));
    record(out, "alpha", vec![logits.clone()], &[0], &|t, v| {
        let rho = probs(t, v[0])?;
        alpha(t, rho)
    });
    record(out, "token_probs", vec![logits], &[0], &|t, v| {
        let rho = probs(t, v[0])?;
        token_probs(t, rho)
    });
    let alphas: Vec<Tensor> = [0.1, 0.35, 0.6].iter().map(|&x| Tensor::scalar(x)).collect();
    record(out, "flops_from_effective + flops_loss", alphas.clone(), &[0, 1, 2], &|t, v| {
        let f = flops_from_effective(t, v, 17, 32, 1e5)?;
        flops_loss(t, f, 4.0)
    });
    record(out, "hw_loss", vec![Tensor::scalar(0.31)], &[0], &|t, v| hw_loss(t, v[0], 0.25, 0.1));
    let logits = rand_tensor(&mut r, &[3, 5], -1.0, 1.0);
    record(out, "cross_entropy", vec![logits], &[0], &|t, v| cross_entropy(t, v[0], &[4, 0, 2]));
}

fn two_block() -> ModelConfig {
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

/// Full search loss on `tape` with `br` as the rates.
fn search_loss(
    tape: &mut Tape,
    p: &BackboneParams,
    br: &BoundRates,
    images: &[Tensor],
    labels: &[usize],
    cfg: &SearchConfig,
) -> Var {
    let bp = p.bind(tape, false).unwrap();
    let mut rows = Vec::new();
    for img in images {
        let mut hook = MaskedCompressor::new(br, SortMetric::ClassAttention);
        rows.push(forward_image(tape, &p.config, &bp, img, &mut hook).unwrap().logits);
    }
    let logits = tape.concat_rows(&rows).unwrap();
    let cls = cross_entropy(tape, logits, labels).unwrap();
    let eff = effective_alpha_vars(tape, &br.alphas()).unwrap();
    let f = flops_from_effective(tape, &eff, br.token_count, p.config.embed_dim, 1e3).unwrap();
    let lf = flops_loss(tape, f, cfg.target_flops.unwrap() / 1e3).unwrap();
    let terms = LossTerms {
        cls: Some(cls),
        flops: Some(lf),
        ..LossTerms::default()
    };
    total_loss(tape, &terms, cfg, 1).unwrap()
}

/// Relative error of the reverse-mode rate-logit gradient against the hand
/// chain, per rate vector.
pub fn chain_errors() -> Vec<f64> {
    let cfg_m = two_block();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut p = BackboneParams::init(&cfg_m, 5).unwrap();
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let images: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, &[8, 8, 3], 0.0, 1.0)).collect();
    let labels = [0, 2, 1];
    let n = cfg_m.token_count();
    let mut rates = RateSet::new(n, 2, true, true, CompressionOrder::PruneThenMerge).unwrap();
    for l in rates.logits_mut() {
        for v in l.iter_mut() {
            *v = rng.gen_range(-1.5..1.5);
        }
    }
    let cfg = SearchConfig {
        target_flops: Some(2000.0),
        ..SearchConfig::default()
    };

    // Reverse mode straight through.
    let mut tape = Tape::new();
    let br = rates.bind(&mut tape, true).unwrap();
    let loss = search_loss(&mut tape, &p, &br, &images, &labels, &cfg);
    let loss_value = tape.item(loss);
    let g = tape.backward(loss).unwrap();
    let full: Vec<Vec<f64>> = br.logit_vars().iter().map(|&v| g.get(v).unwrap().data().to_vec()).collect();

    // Same loss with the rank-space masks and expected rates as leaves.
    let mut tape = Tape::new();
    let mut br = rates.bind(&mut tape, false).unwrap();
    let mut rhos = Vec::new();
    for r in br.prune.iter_mut().chain(br.merge.iter_mut()) {
        rhos.push(tape.value(r.rho).data().to_vec());
        r.mask = tape.param(tape.value(r.mask).clone()).unwrap();
        r.alpha = tape.param(tape.value(r.alpha).clone()).unwrap();
    }
    let loss2 = search_loss(&mut tape, &p, &br, &images, &labels, &cfg);
    assert_eq!(loss_value, tape.item(loss2));
    let g2 = tape.backward(loss2).unwrap();
    let c = candidates(n);
    let mut errors = Vec::new();
    for (idx, r) in br.prune.iter().chain(br.merge.iter()).enumerate() {
        let gm = g2.get(r.mask).map_or(vec![0.0; n], |t| t.data().to_vec());
        let ga = g2.get(r.alpha).map_or(0.0, |t| t.item());
        let rho = &rhos[idx];
        // dL/dρ_j = Σ_k dL/dm_k · (−1) · [k ≥ 1 and j ≥ N − k] + dL/dα · C_j
        let d_rho: Vec<f64> = (0..n)
            .map(|j| {
                let via_mask: f64 = (1..n).filter(|&k| j >= n - k).map(|k| -gm[k]).sum();
                via_mask + ga * c[j]
            })
            .collect();
        let dot: f64 = rho.iter().zip(&d_rho).map(|(a, b)| a * b).sum();
        let hand: Vec<f64> = (0..n).map(|i| rho[i] * (d_rho[i] - dot)).collect();
        let got = &full[idx];
        let diff = hand.iter().zip(got).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = got.iter().map(|x| x * x).sum::<f64>().sqrt();
        errors.push(if scale > 1e-8 { diff / scale } else { f64::INFINITY });
    }
    errors
}
