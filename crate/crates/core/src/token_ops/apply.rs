//! Tape-free inference over physically shrinking token sets.
//!
//! Runs the same kernels, in the same order, as the taped forward pass so
//! that a pruning schedule produces bit-identical class logits in both paths.

use super::compress::{assign_destinations, select_rows, MergeEntry};
use super::sort::{importance, sort_tokens, SortMetric};
use crate::autograd::{kernels, merge_rows_forward, Tensor};
use crate::cost::{BlockCounts, CompressionOrder, CompressionSchedule};
use crate::error::Result;
use crate::vit::{patchify, BackboneParams};

/// Current token rows and their original positions (ascending).
#[derive(Clone, Debug)]
pub struct Tokens {
    pub x: Tensor,
    pub positions: Vec<usize>,
}

/// Block state after attention, before compression.
#[derive(Clone, Debug)]
pub struct Attended {
    pub x_hat: Tensor,
    pub probs: Vec<Tensor>,
    pub values: Vec<Tensor>,
    pub positions: Vec<usize>,
}

/// What one block did, in original token positions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlockRecord {
    pub tokens_in: usize,
    pub tokens_out: usize,
    /// Original positions by descending importance.
    pub order: Vec<usize>,
    pub pruned: Vec<usize>,
    pub merges: Vec<MergeEntry>,
}

fn mm(macs: &mut u64, a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    *macs += (m * k * n) as u64;
    kernels::matmul(a, m, k, b, n)
}

/// Class token plus embedded patches with positions.
pub fn embed(params: &BackboneParams, image: &Tensor) -> Result<Tokens> {
    let cfg = &params.config;
    let patches = patchify(cfg, image)?;
    let d = cfg.embed_dim;
    let np = patches.rows();
    let mut proj = kernels::matmul(patches.data(), np, cfg.patch_dim(), params.patch_w.data(), d);
    kernels::add_bias_rows(&mut proj, d, params.patch_b.data());
    let mut data = params.cls.data().to_vec();
    data.extend_from_slice(&proj);
    let tokens = Tensor::matrix(np + 1, d, data)?;
    let x = tokens.zip_map(&params.pos, |a, b| a + b);
    Ok(Tokens {
        x,
        positions: (0..np + 1).collect(),
    })
}

/// `X̂ = X + Attn(LN(X))` over the current rows.
pub fn attend(params: &BackboneParams, block: usize, tokens: &Tokens, macs: &mut u64) -> Attended {
    let cfg = &params.config;
    let b = &params.blocks[block];
    let (n, d, dh) = (tokens.x.rows(), cfg.embed_dim, cfg.head_dim());
    let (ln, _, _) = kernels::layer_norm_rows(tokens.x.data(), n, d, b.ln1_g.data(), b.ln1_b.data());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = Vec::with_capacity(b.heads.len());
    let mut values = Vec::with_capacity(b.heads.len());
    let mut outs = Vec::with_capacity(b.heads.len());
    for h in &b.heads {
        let mut q = mm(macs, &ln, n, d, h.wq.data(), dh);
        kernels::add_bias_rows(&mut q, dh, h.bq.data());
        let mut k = mm(macs, &ln, n, d, h.wk.data(), dh);
        kernels::add_bias_rows(&mut k, dh, h.bk.data());
        let mut v = mm(macs, &ln, n, d, h.wv.data(), dh);
        kernels::add_bias_rows(&mut v, dh, h.bv.data());
        let kt = Tensor::matrix(n, dh, k).expect("key shape").transpose();
        let s: Vec<f64> = mm(macs, &q, n, dh, kt.data(), n).into_iter().map(|x| x * scale).collect();
        let p = kernels::softmax_rows(&s, n, n, None);
        let o = mm(macs, &p, n, n, &v, dh);
        probs.push(Tensor::matrix(n, n, p).expect("attention shape"));
        values.push(Tensor::matrix(n, dh, v).expect("value shape"));
        outs.push(o);
    }
    let mut cat = Vec::with_capacity(n * d);
    for i in 0..n {
        for o in &outs {
            cat.extend_from_slice(&o[i * dh..(i + 1) * dh]);
        }
    }
    let mut proj = mm(macs, &cat, n, d, b.wo.data(), d);
    kernels::add_bias_rows(&mut proj, d, b.bo.data());
    let proj = Tensor::matrix(n, d, proj).expect("projection shape");
    Attended {
        x_hat: tokens.x.zip_map(&proj, |a, b| a + b),
        probs,
        values,
        positions: tokens.positions.clone(),
    }
}

/// Sorts, prunes and merges per `counts`, removing rows physically.
pub fn compress(
    att: &Attended,
    counts: BlockCounts,
    order_kind: CompressionOrder,
    metric: SortMetric,
    block: usize,
    record: bool,
) -> Result<(Tokens, Option<BlockRecord>)> {
    let n = att.x_hat.rows();
    debug_assert_eq!(n, counts.tokens_in);
    if counts.tokens_out == n {
        let rec = record.then(|| BlockRecord {
            tokens_in: n,
            tokens_out: n,
            order: att.positions.clone(),
            pruned: vec![],
            merges: vec![],
        });
        return Ok((
            Tokens {
                x: att.x_hat.clone(),
                positions: att.positions.clone(),
            },
            rec,
        ));
    }
    let probs: Vec<&Tensor> = att.probs.iter().collect();
    let values: Vec<&Tensor> = att.values.iter().collect();
    let scores = importance(metric, &probs, &values, &vec![true; n], &att.positions, block);
    let order = sort_tokens(&scores, None)?.order;
    let (a, b) = (counts.after_first, counts.tokens_out);
    // Rank ranges: pruned and merge sources.
    let (pruned_ranks, source_ranks, dest_end) = match order_kind {
        CompressionOrder::PruneThenMerge => (a..n, b..a, b),
        CompressionOrder::MergeThenPrune => (b..a, a..n, a),
    };
    let sources: Vec<usize> = order[source_ranks].to_vec();
    let dests: Vec<usize> = order[1..dest_end].to_vec();
    let mut removed = vec![false; n];
    let mut pruned: Vec<usize> = order[pruned_ranks].to_vec();
    for &p in &pruned {
        removed[p] = true;
    }
    let mut merges = Vec::new();
    let x = if sources.is_empty() {
        att.x_hat.clone()
    } else if dests.is_empty() {
        for &s in &sources {
            removed[s] = true;
        }
        pruned.extend(&sources);
        att.x_hat.clone()
    } else {
        let assigned = assign_destinations(&att.x_hat, &sources, &dests);
        let mut dest_of = vec![None; n];
        for (&s, &dd) in sources.iter().zip(&assigned) {
            dest_of[s] = Some(dd);
            removed[s] = true;
        }
        if record {
            let mut sizes = vec![1usize; n];
            for &dd in &assigned {
                sizes[dd] += 1;
            }
            merges = sources
                .iter()
                .zip(&assigned)
                .map(|(&s, &dd)| MergeEntry {
                    source: att.positions[s],
                    destination: att.positions[dd],
                    group_size: sizes[dd],
                })
                .collect();
            merges.sort_by_key(|e| e.source);
        }
        merge_rows_forward(&att.x_hat, &vec![1.0; n], &dest_of, att.x_hat.cols())
    };
    let keep: Vec<usize> = (0..n).filter(|&i| !removed[i]).collect();
    debug_assert_eq!(keep.len(), b);
    let rec = record.then(|| {
        let mut pruned_pos: Vec<usize> = pruned.iter().map(|&i| att.positions[i]).collect();
        pruned_pos.sort_unstable();
        BlockRecord {
            tokens_in: n,
            tokens_out: keep.len(),
            order: order.iter().map(|&i| att.positions[i]).collect(),
            pruned: pruned_pos,
            merges,
        }
    });
    Ok((
        Tokens {
            x: select_rows(&x, &keep),
            positions: keep.iter().map(|&i| att.positions[i]).collect(),
        },
        rec,
    ))
}

/// `X + MLP(LN(X))` in place.
pub fn mlp(params: &BackboneParams, block: usize, tokens: &mut Tokens, macs: &mut u64) {
    let cfg = &params.config;
    let b = &params.blocks[block];
    let (n, d, hd) = (tokens.x.rows(), cfg.embed_dim, cfg.mlp_hidden());
    let (ln, _, _) = kernels::layer_norm_rows(tokens.x.data(), n, d, b.ln2_g.data(), b.ln2_b.data());
    let mut h = mm(macs, &ln, n, d, b.w1.data(), hd);
    kernels::add_bias_rows(&mut h, hd, b.b1.data());
    for v in &mut h {
        *v = kernels::gelu(*v);
    }
    let mut o = mm(macs, &h, n, hd, b.w2.data(), d);
    kernels::add_bias_rows(&mut o, d, b.b2.data());
    for (x, o) in tokens.x.data_mut().iter_mut().zip(&o) {
        *x += o;
    }
}

/// Class logits from the class token row.
pub fn head(params: &BackboneParams, tokens: &Tokens) -> Vec<f64> {
    let d = params.config.embed_dim;
    let k = params.config.class_count;
    let (ln, _, _) = kernels::layer_norm_rows(tokens.x.row(0), 1, d, params.norm_g.data(), params.norm_b.data());
    let mut logits = kernels::matmul(&ln, 1, d, params.head_w.data(), k);
    kernels::add_bias_rows(&mut logits, k, params.head_b.data());
    logits
}

/// Result of applying a schedule to one image.
#[derive(Clone, Debug)]
pub struct ImageApply {
    pub logits: Vec<f64>,
    /// Multiply-accumulates of all in-block matrix products.
    pub macs: u64,
    pub blocks: Vec<BlockRecord>,
}

/// Runs a prepared first-block attention through the rest of the network.
pub fn apply_from_first_block(
    params: &BackboneParams,
    schedule: &CompressionSchedule,
    metric: SortMetric,
    first: &Attended,
    first_macs: u64,
    record: bool,
) -> Result<ImageApply> {
    let counts = schedule.counts();
    let mut macs = first_macs;
    let mut blocks = Vec::new();
    let mut att_owned;
    let mut att = first;
    let mut tokens;
    let depth = params.blocks.len();
    let mut l = 0;
    loop {
        let (t, rec) = compress(att, counts[l], schedule.order, metric, l, record)?;
        tokens = t;
        blocks.extend(rec);
        mlp(params, l, &mut tokens, &mut macs);
        l += 1;
        if l == depth {
            break;
        }
        att_owned = attend(params, l, &tokens, &mut macs);
        att = &att_owned;
    }
    Ok(ImageApply {
        logits: head(params, &tokens),
        macs,
        blocks,
    })
}

/// First-block attention of an image, independent of any schedule.
pub fn first_block(params: &BackboneParams, image: &Tensor) -> Result<(Attended, u64)> {
    let tokens = embed(params, image)?;
    let mut macs = 0;
    let att = attend(params, 0, &tokens, &mut macs);
    Ok((att, macs))
}

/// Applies `schedule` to one image, recording per-block decisions.
pub fn apply_image(
    params: &BackboneParams,
    schedule: &CompressionSchedule,
    metric: SortMetric,
    image: &Tensor,
) -> Result<ImageApply> {
    schedule.check_model(params.config.depth, params.config.token_count())?;
    let (att, macs) = first_block(params, image)?;
    apply_from_first_block(params, schedule, metric, &att, macs, true)
}

/// Batch result of [`apply_schedule`].
#[derive(Clone, Debug)]
pub struct ApplyReport {
    pub logits: Vec<Vec<f64>>,
    /// Tokens leaving each block.
    pub token_counts: Vec<usize>,
    /// Measured multiply-accumulates per image.
    pub macs_per_image: u64,
}

/// Applies `schedule` to every image.
pub fn apply_schedule(
    params: &BackboneParams,
    schedule: &CompressionSchedule,
    metric: SortMetric,
    images: &[Tensor],
) -> Result<ApplyReport> {
    schedule.check_model(params.config.depth, params.config.token_count())?;
    let mut logits = Vec::with_capacity(images.len());
    let mut macs_per_image = 0;
    let mut token_counts = schedule.kept_profile();
    for img in images {
        let (att, m0) = first_block(params, img)?;
        let out = apply_from_first_block(params, schedule, metric, &att, m0, false)?;
        macs_per_image = out.macs;
        logits.push(out.logits);
    }
    if images.is_empty() {
        token_counts.clear();
    }
    Ok(ApplyReport {
        logits,
        token_counts,
        macs_per_image,
    })
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of images whose argmax logit equals the label.
pub fn accuracy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits.iter().zip(labels).filter(|(l, &y)| argmax(l) == y).count();
    hits as f64 / labels.len() as f64
}
