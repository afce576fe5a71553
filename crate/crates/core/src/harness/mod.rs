//! Datasets, persistence, rendering, reports and the command pipeline.

mod config;
mod dataset;
pub mod idx;
pub mod pipeline;
mod render;
mod schedule_file;

pub use config::{
    DataConfig, EnumerateConfig, EnumerateMode, HardwareConfig, IdxFiles, RenderConfig, RunConfig, Target, Targets,
};
pub use dataset::{gen_dataset, gen_splits, ToyDataset, ToyRecipe};
pub use idx::{ingest_idx, write_idx};
pub use render::{group_color, render_token_map, Rgb};
pub use schedule_file::{config_hash, Provenance, ScheduleFile, SCHEDULE_FORMAT};
