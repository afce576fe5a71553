use serde::{Deserialize, Serialize};

use crate::cost::{flops, CompressionOrder, CompressionSchedule, HwConfig, HwCostModel, HwMetric};
use crate::error::{Error, Result};
use crate::token_ops::SortMetric;

/// Value at which the FLOPs constraint is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopsValue {
    /// Operations of the hard-mask schedule, with the gradient of the
    /// expected-rate count routed through a straight-through pass.
    #[default]
    Hard,
    /// Operations implied by the expected rates.
    Expected,
}

/// Hyperparameters of the rate search and the hardware co-search.
///
/// Targets are absolute: operations for FLOPs, milliseconds for latency and
/// milliwatts for power. Each constraint term is computed in its `*_unit`,
/// so `λ_f ((F − T)/flops_unit)²` with a unit of 1e9 reads in G². Unset
/// units scale with the backbone: uncompressed, it measures 4.6 FLOPs units,
/// 68.1 latency units and 156 power units, which are a small ViT's GFLOPs
/// and its milliseconds and milliwatts on the reference accelerator. The
/// default weights therefore carry over across scales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub target_flops: Option<f64>,
    pub target_latency: Option<f64>,
    pub target_power: Option<f64>,
    pub lambda_flops: f64,
    pub lambda_latency: f64,
    pub lambda_power: f64,
    /// Weight of the classification loss; 0 gives a constraint-only run.
    pub lambda_cls: f64,
    pub flops_unit: Option<f64>,
    pub flops_value: FlopsValue,
    pub latency_unit: Option<f64>,
    pub power_unit: Option<f64>,
    pub epochs: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    /// Zero every constraint weight during the first epoch.
    pub warmup: bool,
    pub seed: u64,
    pub prune: bool,
    pub merge: bool,
    pub order: CompressionOrder,
    pub metric: SortMetric,
    /// Independent tapes per batch, run in parallel.
    pub shards: usize,
    /// Hardware-logit updates per co-search round.
    pub hw_steps: usize,
    pub hw_lr: f64,
    pub gumbel_tau: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            target_flops: None,
            target_latency: None,
            target_power: None,
            lambda_flops: 5.0,
            lambda_latency: 1.0,
            lambda_power: 1.0,
            lambda_cls: 1.0,
            flops_unit: None,
            flops_value: FlopsValue::Hard,
            latency_unit: None,
            power_unit: None,
            epochs: 3,
            lr: 0.01,
            lr_min: 0.001,
            batch_size: 32,
            warmup: true,
            seed: 0,
            prune: true,
            merge: true,
            order: CompressionOrder::PruneThenMerge,
            metric: SortMetric::ClassAttention,
            shards: 1,
            hw_steps: 20,
            hw_lr: 0.05,
            gumbel_tau: 1.0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_flops.is_none() && self.target_latency.is_none() && self.target_power.is_none() {
            return Err(Error::Config("at least one of the FLOPs, latency and power targets is required".into()));
        }
        for (name, v) in [
            ("target_flops", self.target_flops),
            ("target_latency", self.target_latency),
            ("target_power", self.target_power),
        ] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::Config(format!("{name} must be positive, got {v}")));
                }
            }
        }
        for (name, v) in [
            ("lambda_flops", self.lambda_flops),
            ("lambda_latency", self.lambda_latency),
            ("lambda_power", self.lambda_power),
            ("lambda_cls", self.lambda_cls),
            ("lr", self.lr),
            ("lr_min", self.lr_min),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        for (name, v) in [
            ("flops_unit", self.flops_unit.unwrap_or(1.0)),
            ("latency_unit", self.latency_unit.unwrap_or(1.0)),
            ("power_unit", self.power_unit.unwrap_or(1.0)),
            ("gumbel_tau", self.gumbel_tau),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 || self.shards == 0 {
            return Err(Error::Config("batch_size and shards must be positive".into()));
        }
        if !self.prune && !self.merge {
            return Err(Error::Config("at least one of pruning and merging must be enabled".into()));
        }
        Ok(())
    }

    /// FLOPs unit for a backbone of `depth` blocks, `token_count` tokens
    /// and width `embed_dim`.
    pub fn flops_unit_for(&self, token_count: usize, depth: usize, embed_dim: usize) -> Result<f64> {
        match self.flops_unit {
            Some(u) => Ok(u),
            None => Ok(flops(&CompressionSchedule::zero(token_count, depth), embed_dim)? as f64 / 4.6),
        }
    }

    /// Latency or power unit; unset units are the uncompressed backbone's
    /// cost on `reference` divided by 68.1 (latency) or 156 (power).
    pub fn hw_unit(
        &self,
        metric: HwMetric,
        model: &dyn HwCostModel,
        reference: &HwConfig,
        token_count: usize,
        depth: usize,
    ) -> f64 {
        let (set, scale) = match metric {
            HwMetric::Latency => (self.latency_unit, 68.1),
            HwMetric::Power => (self.power_unit, 156.0),
        };
        set.unwrap_or_else(|| model.total(&CompressionSchedule::zero(token_count, depth), reference, metric) / scale)
    }

    /// Copy with both hardware units fixed at their values on `reference`.
    pub fn with_hw_units(
        &self,
        model: &dyn HwCostModel,
        reference: &HwConfig,
        token_count: usize,
        depth: usize,
    ) -> Self {
        Self {
            latency_unit: Some(self.hw_unit(HwMetric::Latency, model, reference, token_count, depth)),
            power_unit: Some(self.hw_unit(HwMetric::Power, model, reference, token_count, depth)),
            ..self.clone()
        }
    }

    /// Constraint weights `(λ_f, λ_la, λ_pw)` in effect during `epoch`.
    pub fn weights(&self, epoch: usize) -> (f64, f64, f64) {
        if self.warmup && epoch == 0 && self.epochs > 1 {
            (0.0, 0.0, 0.0)
        } else {
            (self.lambda_flops, self.lambda_latency, self.lambda_power)
        }
    }
}
