//! Rate search and its oracles.
//!
//! [`search_rates`] learns per-block rates for a frozen backbone under
//! FLOPs and optional latency/power targets; [`cosearch_hw`] alternates it
//! with updates of accelerator design logits. [`enumerate_schedules`]
//! scores explicit schedule lists off the shelf, and [`train`] /
//! [`finetune`] update backbone weights.

mod adam;
mod config;
mod cosearch;
mod enumerate;
mod rate_search;
mod trace;
mod train;

pub use adam::{cosine_lr, Adam};
pub use config::{FlopsValue, SearchConfig};
pub use cosearch::{all_configs, cosearch_hw, hw_phase, CoSearchResult, HwRound};
pub use enumerate::{
    enumerate_schedules, grid_schedules, pareto_front, random_schedules, Enumeration, EvalCache, Evaluated,
    RandomSpec,
};
pub use rate_search::{expected_alphas, search_rates, total_loss, HwFixed, LossTerms, RateSearch, SearchResult};
pub use trace::{SearchTrace, TraceRow};
pub use train::{evaluate, finetune, train, EpochMetrics, TrainConfig, TrainReport, Trainer};
