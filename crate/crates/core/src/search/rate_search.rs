use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::adam::{cosine_lr, Adam};
use super::config::{FlopsValue, SearchConfig};
use super::trace::{SearchTrace, TraceRow};
use crate::autograd::{Tape, Tensor, Var};
use crate::cost::{
    effective_alpha_vars, expected_hw_alpha, flops, flops_from_effective, flops_loss, hw_loss,
    min_flops, CompressionSchedule, HwConfig, HwCostModel, HwMetric,
};
use crate::ddp::{MaskedCompressor, RateSet};
use crate::error::{Error, Result};
use crate::vit::{cross_entropy, forward_image, BackboneParams};

/// A hardware cost model evaluated at one fixed configuration.
#[derive(Clone, Copy)]
pub struct HwFixed<'a> {
    pub model: &'a dyn HwCostModel,
    pub config: HwConfig,
}

/// Loss components of one step, each already a scalar var on the tape.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub cls: Option<Var>,
    pub flops: Option<Var>,
    pub latency: Option<Var>,
    pub power: Option<Var>,
}

/// `λ_cls L_cls + λ_f L_f + λ_la L_la + λ_pw L_pw` with the weights in
/// effect during `epoch`. Absent terms contribute nothing.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, cfg: &SearchConfig, epoch: usize) -> Result<Var> {
    let (lf, lla, lpw) = cfg.weights(epoch);
    let mut total = tape.constant(Tensor::scalar(0.0))?;
    for (term, w) in [
        (terms.cls, cfg.lambda_cls),
        (terms.flops, lf),
        (terms.latency, lla),
        (terms.power, lpw),
    ] {
        if let Some(t) = term {
            let scaled = tape.scale(t, w)?;
            total = tape.add(total, scaled)?;
        }
    }
    Ok(total)
}

/// Constraint terms built from the rates bound on `tape`.
pub(crate) struct CostTerms {
    pub terms: LossTerms,
    pub flops_expected: f64,
}

pub(crate) fn cost_terms(
    tape: &mut Tape,
    rates: &crate::ddp::BoundRates,
    embed_dim: usize,
    cfg: &SearchConfig,
    hw: Option<HwFixed<'_>>,
) -> Result<CostTerms> {
    let unit = cfg.flops_unit_for(rates.token_count, rates.depth, embed_dim)?;
    let effective = effective_alpha_vars(tape, &rates.alphas())?;
    let expected = flops_from_effective(tape, &effective, rates.token_count, embed_dim, unit)?;
    let flops_expected = tape.item(expected) * unit;
    let f = match cfg.flops_value {
        FlopsValue::Expected => expected,
        FlopsValue::Hard => {
            let hard = flops(&rates.schedule(), embed_dim)? as f64 / unit;
            let hard = tape.constant(Tensor::scalar(hard))?;
            tape.ste(hard, expected)?
        }
    };
    let mut terms = LossTerms::default();
    if let Some(t) = cfg.target_flops {
        terms.flops = Some(flops_loss(tape, f, t / unit)?);
    }
    if let Some(hw) = hw {
        let counts = rates.schedule().counts();
        for (target, metric, slot) in [
            (cfg.target_latency, HwMetric::Latency, &mut terms.latency),
            (cfg.target_power, HwMetric::Power, &mut terms.power),
        ] {
            if let Some(t) = target {
                let unit = cfg.hw_unit(metric, hw.model, &hw.config, rates.token_count, rates.depth);
                let costs = hw.model.block_costs(&counts, &hw.config, metric);
                let e = expected_hw_alpha(tape, &effective, &costs)?;
                *slot = Some(hw_loss(tape, e, t, unit)?);
            }
        }
    }
    Ok(CostTerms { terms, flops_expected })
}

/// Rates, optimizer state and trace of a search in progress.
pub struct RateSearch<'a> {
    pub params: &'a BackboneParams,
    pub images: &'a [Tensor],
    pub labels: &'a [usize],
    pub cfg: SearchConfig,
    pub rates: RateSet,
    pub trace: SearchTrace,
    adam: Adam,
    rng: ChaCha8Rng,
    step: usize,
    total_steps: usize,
    /// Hard schedules used during the current epoch, in step order.
    epoch_schedules: Vec<CompressionSchedule>,
}

struct ShardOut {
    grads: Vec<Vec<f64>>,
    cls: f64,
    cost: Option<(f64, f64, f64, f64)>,
}

impl<'a> RateSearch<'a> {
    pub fn new(
        params: &'a BackboneParams,
        images: &'a [Tensor],
        labels: &'a [usize],
        cfg: &SearchConfig,
        rounds: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        params.validate()?;
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::Config(format!(
                "search needs a non-empty dataset with one label per image ({} images, {} labels)",
                images.len(),
                labels.len()
            )));
        }
        let mc = &params.config;
        if let Some(t) = cfg.target_flops {
            let min = min_flops(mc) as f64;
            if t < min {
                return Err(Error::Infeasible { target: t, minimum: min });
            }
        }
        let rates = RateSet::new(mc.token_count(), mc.depth, cfg.prune, cfg.merge, cfg.order)?;
        let sizes: Vec<usize> = rates.prune.iter().chain(&rates.merge).map(|p| p.logits.len()).collect();
        let steps_per_epoch = images.len().div_ceil(cfg.batch_size);
        Ok(Self {
            params,
            images,
            labels,
            cfg: cfg.clone(),
            rates,
            trace: SearchTrace::default(),
            adam: Adam::new(&sizes),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            step: 0,
            total_steps: steps_per_epoch * cfg.epochs * rounds.max(1),
            epoch_schedules: Vec::new(),
        })
    }

    fn shard(&self, idx: &[usize], batch: usize, epoch: usize, hw: Option<HwFixed<'_>>, with_cost: bool) -> Result<ShardOut> {
        let mut tape = Tape::new();
        let br = self.rates.bind(&mut tape, true)?;
        let mut terms = LossTerms::default();
        let mut cls = 0.0;
        if self.cfg.lambda_cls > 0.0 && !idx.is_empty() {
            let bp = self.params.bind(&mut tape, false)?;
            let mut rows = Vec::with_capacity(idx.len());
            for &i in idx {
                let mut hook = MaskedCompressor::new(&br, self.cfg.metric);
                rows.push(forward_image(&mut tape, &self.params.config, &bp, &self.images[i], &mut hook)?.logits);
            }
            let logits = tape.concat_rows(&rows)?;
            let labels: Vec<usize> = idx.iter().map(|&i| self.labels[i]).collect();
            let ce = cross_entropy(&mut tape, logits, &labels)?;
            let ce = tape.scale(ce, idx.len() as f64 / batch as f64)?;
            cls = tape.item(ce);
            terms.cls = Some(ce);
        }
        let mut cost = None;
        if with_cost {
            let ct = cost_terms(&mut tape, &br, self.params.config.embed_dim, &self.cfg, hw)?;
            let val = |v: Option<Var>| v.map_or(0.0, |v| tape.item(v));
            cost = Some((val(ct.terms.flops), val(ct.terms.latency), val(ct.terms.power), ct.flops_expected));
            terms.flops = ct.terms.flops;
            terms.latency = ct.terms.latency;
            terms.power = ct.terms.power;
        }
        let loss = total_loss(&mut tape, &terms, &self.cfg, epoch)?;
        if !tape.item(loss).is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                loss: tape.item(loss),
            });
        }
        let g = tape.backward(loss)?;
        let grads = br
            .logit_vars()
            .into_iter()
            .map(|v| g.get(v).map_or_else(|| vec![0.0; self.rates.token_count], |t| t.data().to_vec()))
            .collect();
        Ok(ShardOut { grads, cls, cost })
    }

    /// One pass over the dataset with the hardware (if any) held fixed.
    pub fn run_epoch(&mut self, epoch: usize, hw: Option<HwFixed<'_>>) -> Result<()> {
        let mut order: Vec<usize> = (0..self.images.len()).collect();
        order.shuffle(&mut self.rng);
        self.epoch_schedules.clear();
        let embed_dim = self.params.config.embed_dim;
        for batch in order.chunks(self.cfg.batch_size) {
            let start = Instant::now();
            let schedule = self.rates.schedule()?;
            let shards = self.cfg.shards.min(batch.len()).max(1);
            let per = batch.len().div_ceil(shards);
            let parts: Vec<&[usize]> = batch.chunks(per).collect();
            let outs: Vec<ShardOut> = if parts.len() > 1 {
                parts
                    .par_iter()
                    .enumerate()
                    .map(|(s, p)| self.shard(p, batch.len(), epoch, hw, s == 0))
                    .collect::<Result<_>>()?
            } else {
                vec![self.shard(parts[0], batch.len(), epoch, hw, true)?]
            };
            let mut grads = outs[0].grads.clone();
            for o in &outs[1..] {
                for (g, h) in grads.iter_mut().zip(&o.grads) {
                    for (a, b) in g.iter_mut().zip(h) {
                        *a += b;
                    }
                }
            }
            let cls: f64 = outs.iter().map(|o| o.cls).sum();
            let (lf, lla, lpw, fexp) = outs[0].cost.expect("first shard carries the cost terms");
            let lr = cosine_lr(self.step, self.total_steps, self.cfg.lr, self.cfg.lr_min);
            self.adam.step(self.rates.logits_mut().map(|v| v.as_mut_slice()), &grads, lr);

            let flops_hard = flops(&schedule, embed_dim)?;
            self.trace.rows.push(TraceRow {
                step: self.step,
                epoch,
                lr,
                loss_cls: cls,
                loss_flops: lf,
                loss_latency: lla,
                loss_power: lpw,
                flops: flops_hard,
                flops_expected: fexp,
                latency: hw.map(|h| h.model.total(&schedule, &h.config, HwMetric::Latency)),
                power: hw.map(|h| h.model.total(&schedule, &h.config, HwMetric::Power)),
                alphas: expected_alphas(&self.rates)?,
                kept: schedule.kept_profile(),
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
            self.epoch_schedules.push(schedule);
            self.step += 1;
        }
        Ok(())
    }

    /// Whether `schedule` meets every target present in the config.
    pub fn feasible(&self, schedule: &CompressionSchedule, hw: Option<HwFixed<'_>>) -> Result<bool> {
        let mut ok = true;
        if let Some(t) = self.cfg.target_flops {
            ok &= flops(schedule, self.params.config.embed_dim)? as f64 <= t;
        }
        if let Some(h) = hw {
            if let Some(t) = self.cfg.target_latency {
                ok &= h.model.total(schedule, &h.config, HwMetric::Latency) <= t;
            }
            if let Some(t) = self.cfg.target_power {
                ok &= h.model.total(schedule, &h.config, HwMetric::Power) <= t;
            }
        }
        Ok(ok)
    }

    /// Largest relative distance `|v − T| / T` over the targets present.
    pub fn target_gap(&self, schedule: &CompressionSchedule, hw: Option<HwFixed<'_>>) -> Result<f64> {
        let mut gap: f64 = 0.0;
        if let Some(t) = self.cfg.target_flops {
            gap = gap.max((flops(schedule, self.params.config.embed_dim)? as f64 - t).abs() / t);
        }
        if let Some(h) = hw {
            for (target, metric) in [(self.cfg.target_latency, HwMetric::Latency), (self.cfg.target_power, HwMetric::Power)] {
                if let Some(t) = target {
                    gap = gap.max((h.model.total(schedule, &h.config, metric) - t).abs() / t);
                }
            }
        }
        Ok(gap)
    }

    /// The hard schedule of the final epoch closest to the targets. Ties go
    /// to a schedule meeting every target, then to the later one.
    pub fn select(&self, hw: Option<HwFixed<'_>>) -> Result<CompressionSchedule> {
        let mut best = self.rates.schedule()?;
        let mut key = (self.target_gap(&best, hw)?, !self.feasible(&best, hw)?);
        for s in self.epoch_schedules.iter().rev() {
            let k = (self.target_gap(s, hw)?, !self.feasible(s, hw)?);
            if k.0 < key.0 - 1e-12 || (k.0 <= key.0 + 1e-12 && k.1 < key.1) {
                best = s.clone();
                key = k;
            }
        }
        Ok(best)
    }
}

/// Expected effective rate per block under the current logits.
pub fn expected_alphas(rates: &RateSet) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let br = rates.bind(&mut tape, false)?;
    let eff = effective_alpha_vars(&mut tape, &br.alphas())?;
    Ok(eff.iter().map(|&v| tape.item(v)).collect())
}

/// Outcome of a rate search.
#[derive(Clone, Debug)]
pub struct SearchResult {
    pub schedule: CompressionSchedule,
    pub trace: SearchTrace,
    pub rates: RateSet,
    /// Operations of `schedule`.
    pub flops: u64,
    /// Selected hardware configuration (co-search only).
    pub hw: Option<HwConfig>,
}

/// Learns per-block pruning and merging rates for a frozen backbone.
///
/// Each batch runs the masked forward pass, adds the constraint terms and
/// takes one Adam step on the rate logits. With `hw`, latency and power
/// targets are measured on that fixed configuration.
pub fn search_rates(
    params: &BackboneParams,
    images: &[Tensor],
    labels: &[usize],
    cfg: &SearchConfig,
    hw: Option<HwFixed<'_>>,
) -> Result<SearchResult> {
    if hw.is_none() && cfg.target_flops.is_none() {
        return Err(Error::Config("latency and power targets need a hardware cost model".into()));
    }
    if let Some(h) = hw {
        check_hw_targets(params, cfg, &[h])?;
    }
    let mut s = RateSearch::new(params, images, labels, cfg, 1)?;
    for epoch in 0..cfg.epochs {
        s.run_epoch(epoch, hw)?;
    }
    let schedule = s.select(hw)?;
    Ok(SearchResult {
        flops: flops(&schedule, params.config.embed_dim)?,
        schedule,
        trace: s.trace,
        rates: s.rates,
        hw: None,
    })
}

/// Rejects latency or power targets below what the class-token-only
/// schedule reaches on the best of `candidates`.
pub(crate) fn check_hw_targets(params: &BackboneParams, cfg: &SearchConfig, candidates: &[HwFixed<'_>]) -> Result<()> {
    let mc = &params.config;
    let floor = CompressionSchedule::prune_only(mc.token_count(), vec![1; mc.depth]);
    for (target, metric) in [(cfg.target_latency, HwMetric::Latency), (cfg.target_power, HwMetric::Power)] {
        if let Some(t) = target {
            let min = candidates
                .iter()
                .map(|h| h.model.total(&floor, &h.config, metric))
                .fold(f64::INFINITY, f64::min);
            if t < min {
                return Err(Error::Infeasible { target: t, minimum: min });
            }
        }
    }
    Ok(())
}
