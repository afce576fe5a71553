//! Token sorting, pruning, merging, uncompression and schedule application.

mod apply;
mod compress;
mod sort;
mod taped;

pub use apply::{
    accuracy, apply_from_first_block, apply_image, apply_schedule, argmax, attend, compress, embed,
    first_block, head, mlp, ApplyReport, Attended, BlockRecord, ImageApply, Tokens,
};
pub use compress::{assign_destinations, merge, prune, uncompress, MergeEntry, MergeMap, PruneResult};
pub use sort::{importance, sort_tokens, ImportanceOrder, SortMetric};
pub use taped::ScheduleHook;
