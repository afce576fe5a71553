use super::compress::assign_destinations;
use super::sort::{importance, sort_tokens, SortMetric};
use crate::autograd::{Tape, Tensor};
use crate::cost::{BlockCounts, CompressionOrder, CompressionSchedule};
use crate::error::{Error, Result};
use crate::vit::{CompressionHook, HookInput, HookOutput};

/// Applies a fixed schedule on the tape by physically removing rows, so
/// weights can be trained with real token dropping.
pub struct ScheduleHook {
    counts: Vec<BlockCounts>,
    order: CompressionOrder,
    metric: SortMetric,
    positions: Vec<usize>,
}

impl ScheduleHook {
    pub fn new(schedule: &CompressionSchedule, metric: SortMetric) -> Result<Self> {
        schedule.validate()?;
        Ok(Self {
            counts: schedule.counts(),
            order: schedule.order,
            metric,
            positions: (0..schedule.token_count).collect(),
        })
    }
}

impl CompressionHook for ScheduleHook {
    fn compress(&mut self, tape: &mut Tape, input: HookInput<'_>) -> Result<HookOutput> {
        let l = input.block;
        let counts = *self
            .counts
            .get(l)
            .ok_or_else(|| Error::Schedule(format!("no schedule entry for block {l}")))?;
        let n = tape.value(input.x_hat).rows();
        if n != counts.tokens_in || n != self.positions.len() {
            return Err(Error::Schedule(format!("block {l}: {n} rows, schedule expects {}", counts.tokens_in)));
        }
        if counts.tokens_out == n {
            return Ok(HookOutput {
                x: input.x_hat,
                mask: None,
            });
        }
        let scores = {
            let probs: Vec<&Tensor> = input.attention.probs.iter().map(|&p| tape.value(p)).collect();
            let values: Vec<&Tensor> = input.attention.values.iter().map(|&v| tape.value(v)).collect();
            importance(self.metric, &probs, &values, &vec![true; n], &self.positions, l)
        };
        let order = sort_tokens(&scores, None)?.order;
        let (a, b) = (counts.after_first, counts.tokens_out);
        let (pruned, sources, dest_end) = match self.order {
            CompressionOrder::PruneThenMerge => (a..n, b..a, b),
            CompressionOrder::MergeThenPrune => (b..a, a..n, a),
        };
        let mut removed = vec![false; n];
        for &i in &order[pruned] {
            removed[i] = true;
        }
        let sources: Vec<usize> = order[sources].to_vec();
        for &s in &sources {
            removed[s] = true;
        }
        let dests = &order[1..dest_end];
        let mut x = input.x_hat;
        if !sources.is_empty() && !dests.is_empty() {
            let assigned = assign_destinations(tape.value(x), &sources, dests);
            let mut dest_of = vec![None; n];
            for (&s, &d) in sources.iter().zip(&assigned) {
                dest_of[s] = Some(d);
            }
            let w = tape.constant(Tensor::ones(&[n]))?;
            x = tape.merge_rows(x, w, &dest_of)?;
        }
        let keep: Vec<usize> = (0..n).filter(|&i| !removed[i]).collect();
        self.positions = keep.iter().map(|&i| self.positions[i]).collect();
        Ok(HookOutput {
            x: tape.gather_rows(x, &keep)?,
            mask: None,
        })
    }
}
