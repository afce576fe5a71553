use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::Adam;
use super::config::SearchConfig;
use super::rate_search::{check_hw_targets, HwFixed, RateSearch, SearchResult};
use crate::autograd::{Tape, Tensor};
use crate::cost::{flops, gumbel_select, hw_loss, CompressionSchedule, HwCostModel, HwMetric, HwSearchParam, HwSpace, HW_DIMS};
use crate::error::{Error, Result};
use crate::vit::BackboneParams;

/// Per-round record of the hardware phase.
#[derive(Clone, Debug, PartialEq)]
pub struct HwRound {
    pub round: usize,
    pub config: crate::cost::HwConfig,
    pub latency: f64,
    pub power: f64,
    pub loss: f64,
}

/// Outcome of a co-search: the rate search result plus the hardware
/// logits and the configuration chosen after each round.
#[derive(Clone, Debug)]
pub struct CoSearchResult {
    pub search: SearchResult,
    pub hw_param: HwSearchParam,
    pub rounds: Vec<HwRound>,
}

/// Takes `cfg.hw_steps` Adam steps on the hardware logits with `schedule`
/// fixed. Each step draws one Gumbel-softmax configuration and weights its
/// latency and power by the selection factor. Returns the last loss.
pub fn hw_phase(
    param: &mut HwSearchParam,
    adam: &mut Adam,
    space: &HwSpace,
    model: &dyn HwCostModel,
    schedule: &CompressionSchedule,
    cfg: &SearchConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut last = 0.0;
    let dims = HW_DIMS.len() as f64;
    for _ in 0..cfg.hw_steps {
        let mut tape = Tape::new();
        let sel = gumbel_select(&mut tape, param, space, rng)?;
        let mut total = tape.constant(Tensor::scalar(0.0))?;
        for (target, metric, w) in [
            (cfg.target_latency, HwMetric::Latency, cfg.lambda_latency),
            (cfg.target_power, HwMetric::Power, cfg.lambda_power),
        ] {
            if let Some(t) = target {
                let unit = cfg.hw_unit(metric, model, &sel.config, schedule.token_count, schedule.depth());
                let e = tape.scale(sel.factor, model.total(schedule, &sel.config, metric) / dims)?;
                let l = hw_loss(&mut tape, e, t, unit)?;
                let l = tape.scale(l, w)?;
                total = tape.add(total, l)?;
            }
        }
        last = tape.item(total);
        let g = tape.backward(total)?;
        let grads: Vec<Vec<f64>> = sel
            .logits
            .iter()
            .zip(&param.logits)
            .map(|(&v, l)| g.get(v).map_or_else(|| vec![0.0; l.len()], |t| t.data().to_vec()))
            .collect();
        adam.step(param.logits.iter_mut().map(|v| v.as_mut_slice()), &grads, cfg.hw_lr);
    }
    Ok(last)
}

/// Alternates one epoch of rate search with the hardware fixed at the
/// current argmax configuration and one hardware phase with the schedule
/// fixed, for `cfg.epochs` rounds.
pub fn cosearch_hw(
    params: &BackboneParams,
    images: &[crate::autograd::Tensor],
    labels: &[usize],
    cfg: &SearchConfig,
    model: &dyn HwCostModel,
    space: &HwSpace,
    init: Option<HwSearchParam>,
) -> Result<CoSearchResult> {
    space.validate()?;
    if cfg.target_latency.is_none() && cfg.target_power.is_none() {
        return Err(Error::Config("co-search needs a latency or power target".into()));
    }
    let mut hw_param = init.unwrap_or_else(|| HwSearchParam::uniform(space, cfg.gumbel_tau));
    // Units stay fixed while the hardware moves.
    let mc = &params.config;
    let cfg = &cfg.with_hw_units(model, &hw_param.argmax(space), mc.token_count(), mc.depth);
    let candidates = all_configs(space);
    let fixed: Vec<HwFixed<'_>> = candidates.iter().map(|&config| HwFixed { model, config }).collect();
    check_hw_targets(params, cfg, &fixed)?;

    let mut search = RateSearch::new(params, images, labels, cfg, 1)?;
    let sizes: Vec<usize> = hw_param.logits.iter().map(Vec::len).collect();
    let mut adam = Adam::new(&sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut rounds = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let hw = HwFixed {
            model,
            config: hw_param.argmax(space),
        };
        search.run_epoch(epoch, Some(hw))?;
        let (_, lla, lpw) = cfg.weights(epoch);
        let loss = if lla > 0.0 || lpw > 0.0 {
            let schedule = search.rates.schedule()?;
            hw_phase(&mut hw_param, &mut adam, space, model, &schedule, cfg, &mut rng)?
        } else {
            0.0
        };
        let config = hw_param.argmax(space);
        let schedule = search.rates.schedule()?;
        rounds.push(HwRound {
            round: epoch,
            config,
            latency: model.total(&schedule, &config, HwMetric::Latency),
            power: model.total(&schedule, &config, HwMetric::Power),
            loss,
        });
    }
    let config = hw_param.argmax(space);
    let hw = HwFixed { model, config };
    let schedule = search.select(Some(hw))?;
    Ok(CoSearchResult {
        search: SearchResult {
            flops: flops(&schedule, params.config.embed_dim)?,
            schedule,
            trace: search.trace,
            rates: search.rates,
            hw: Some(config),
        },
        hw_param,
        rounds,
    })
}

/// Every configuration of `space`, first dimension slowest.
pub fn all_configs(space: &HwSpace) -> Vec<crate::cost::HwConfig> {
    let sizes: Vec<usize> = (0..HW_DIMS.len()).map(|d| space.domain(d).len()).collect();
    let total: usize = sizes.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = [0usize; 8];
    for _ in 0..total {
        out.push(space.config(&idx));
        for d in (0..8).rev() {
            idx[d] += 1;
            if idx[d] < sizes[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}
