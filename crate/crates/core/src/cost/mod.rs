//! Cost models: analytic operation counts, the accelerator design space and
//! a synthetic latency/power surrogate with differentiable constraint terms.

mod flops;
mod hardware;
mod schedule;

pub use flops::{
    attention_flops, baseline_flops, effective_alpha_vars, flops, flops_from_effective, flops_loss,
    flops_var, min_flops, mlp_flops, stem_and_head_flops,
};
pub use hardware::{
    expected_hw_alpha, expected_hw_beta, gumbel_select, hw_loss, CostCoefficients, HwConfig,
    HwCostModel, HwMetric, HwSearchParam, HwSelection, HwSpace, LatencyCoefficients, PowerCoefficients,
    SyntheticCostModel, HW_DIMS,
};
pub use schedule::{BlockCounts, CompressionOrder, CompressionSchedule};
