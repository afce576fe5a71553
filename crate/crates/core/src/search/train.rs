use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{cosine_lr, Adam};
use crate::autograd::{Tape, Tensor};
use crate::cost::CompressionSchedule;
use crate::error::{Error, Result};
use crate::token_ops::{accuracy, apply_schedule, ScheduleHook, SortMetric};
use crate::vit::{cross_entropy, forward_image, BackboneParams, CompressionHook, NoCompression};

/// Backbone training and fine-tuning hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    /// Standard deviation of Gaussian pixel noise added to training images.
    pub noise: f64,
    pub seed: u64,
    pub shards: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            lr: 3e-3,
            lr_min: 1e-4,
            batch_size: 32,
            noise: 0.02,
            seed: 0,
            shards: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.shards == 0 {
            return Err(Error::Config("batch_size and shards must be positive".into()));
        }
        for (name, v) in [("lr", self.lr), ("lr_min", self.lr_min), ("noise", self.noise)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Metrics after one training epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub val_accuracy: Option<f64>,
}

/// Weights, optimizer moments and position of a training run, enough to
/// resume it bit-exactly at an epoch boundary.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub params: BackboneParams,
    pub cfg: TrainConfig,
    pub adam: Adam,
    /// Epochs completed.
    pub epoch: usize,
    /// Per-batch losses of every completed epoch.
    pub losses: Vec<f64>,
    schedule: Option<CompressionSchedule>,
    metric: SortMetric,
    steps_per_epoch: usize,
}

impl Trainer {
    /// Trains all backbone weights; with `schedule`, tokens are dropped on
    /// the tape exactly as at inference.
    pub fn new(
        params: BackboneParams,
        cfg: &TrainConfig,
        schedule: Option<&CompressionSchedule>,
        metric: SortMetric,
        train_len: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        params.validate()?;
        if let Some(s) = schedule {
            s.check_model(params.config.depth, params.config.token_count())?;
        }
        let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.len()).collect();
        Ok(Self {
            params,
            cfg: cfg.clone(),
            adam: Adam::new(&sizes),
            epoch: 0,
            losses: Vec::new(),
            schedule: schedule.cloned(),
            metric,
            steps_per_epoch: train_len.div_ceil(cfg.batch_size),
        })
    }

    fn hook(&self) -> Result<Box<dyn CompressionHook>> {
        Ok(match &self.schedule {
            Some(s) => Box::new(ScheduleHook::new(s, self.metric)?),
            None => Box::new(NoCompression),
        })
    }

    fn shard_grads(&self, images: &[Tensor], labels: &[usize], batch: usize) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let bp = self.params.bind(&mut tape, true)?;
        let mut rows = Vec::with_capacity(images.len());
        for img in images {
            let mut hook = self.hook()?;
            rows.push(forward_image(&mut tape, &self.params.config, &bp, img, hook.as_mut())?.logits);
        }
        let logits = tape.concat_rows(&rows)?;
        let ce = cross_entropy(&mut tape, logits, labels)?;
        let ce = tape.scale(ce, images.len() as f64 / batch as f64)?;
        let g = tape.backward(ce)?;
        let grads = bp
            .vars()
            .into_iter()
            .map(|v| g.get(v).map_or_else(|| vec![0.0; tape.value(v).len()], |t| t.data().to_vec()))
            .collect();
        Ok((tape.item(ce), grads))
    }

    /// Runs one epoch. Shuffling and noise depend only on the seed and the
    /// epoch index.
    pub fn run_epoch(&mut self, images: &[Tensor], labels: &[usize]) -> Result<f64> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::Config(format!("{} images vs {} labels", images.len(), labels.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ self.epoch as u64);
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut rng);
        let noise = Normal::new(0.0, self.cfg.noise.max(f64::MIN_POSITIVE)).expect("valid noise");
        let total_steps = self.steps_per_epoch * self.cfg.epochs;
        let mut sum = 0.0;
        let mut count = 0;
        for batch in order.chunks(self.cfg.batch_size) {
            let step = self.epoch * self.steps_per_epoch + count;
            let imgs: Vec<Tensor> = batch
                .iter()
                .map(|&i| {
                    if self.cfg.noise > 0.0 {
                        let mut img = images[i].clone();
                        for v in img.data_mut() {
                            *v += noise.sample(&mut rng);
                        }
                        img
                    } else {
                        images[i].clone()
                    }
                })
                .collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let shards = self.cfg.shards.min(batch.len()).max(1);
            let per = batch.len().div_ceil(shards);
            let parts: Vec<(&[Tensor], &[usize])> = imgs.chunks(per).zip(ys.chunks(per)).collect();
            let outs: Vec<(f64, Vec<Vec<f64>>)> = if parts.len() > 1 {
                parts
                    .par_iter()
                    .map(|(x, y)| self.shard_grads(x, y, batch.len()))
                    .collect::<Result<_>>()?
            } else {
                vec![self.shard_grads(parts[0].0, parts[0].1, batch.len())?]
            };
            let loss: f64 = outs.iter().map(|o| o.0).sum();
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            let mut grads = outs[0].1.clone();
            for o in &outs[1..] {
                for (g, h) in grads.iter_mut().zip(&o.1) {
                    for (a, b) in g.iter_mut().zip(h) {
                        *a += b;
                    }
                }
            }
            let lr = cosine_lr(step, total_steps, self.cfg.lr, self.cfg.lr_min);
            self.adam
                .step(self.params.tensors_mut().into_iter().map(|t| t.data_mut()), &grads, lr);
            self.losses.push(loss);
            sum += loss;
            count += 1;
        }
        self.epoch += 1;
        Ok(sum / count as f64)
    }
}

/// Validation accuracy of `params` under `schedule` (uncompressed if `None`).
pub fn evaluate(
    params: &BackboneParams,
    images: &[Tensor],
    labels: &[usize],
    schedule: Option<&CompressionSchedule>,
    metric: SortMetric,
) -> Result<f64> {
    let zero = CompressionSchedule::zero(params.config.token_count(), params.config.depth);
    let s = schedule.unwrap_or(&zero);
    let report = apply_schedule(params, s, metric, images)?;
    Ok(accuracy(&report.logits, labels))
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub params: BackboneParams,
    pub epochs: Vec<EpochMetrics>,
    /// Per-batch training losses.
    pub losses: Vec<f64>,
}

/// Trains `params` for `cfg.epochs`, reporting validation accuracy per epoch
/// when a validation set is given.
pub fn train(
    params: BackboneParams,
    train_set: (&[Tensor], &[usize]),
    val_set: Option<(&[Tensor], &[usize])>,
    cfg: &TrainConfig,
    schedule: Option<&CompressionSchedule>,
    metric: SortMetric,
) -> Result<TrainReport> {
    let mut t = Trainer::new(params, cfg, schedule, metric, train_set.0.len())?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let loss = t.run_epoch(train_set.0, train_set.1)?;
        let val_accuracy = val_set
            .map(|(x, y)| evaluate(&t.params, x, y, schedule, metric))
            .transpose()?;
        epochs.push(EpochMetrics {
            epoch: t.epoch - 1,
            loss,
            val_accuracy,
        });
    }
    Ok(TrainReport {
        params: t.params,
        epochs,
        losses: t.losses,
    })
}

/// Fine-tunes every backbone weight with `schedule` applied by real token
/// dropping. The rates stay fixed. Zero epochs return the input unchanged.
pub fn finetune(
    params: &BackboneParams,
    images: &[Tensor],
    labels: &[usize],
    schedule: &CompressionSchedule,
    cfg: &TrainConfig,
    metric: SortMetric,
) -> Result<TrainReport> {
    train(params.clone(), (images, labels), None, cfg, Some(schedule), metric)
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    epoch: usize,
    losses: Vec<f64>,
    adam: Adam,
}

impl Trainer {
    /// Writes the weights (as a checkpoint) and the optimizer state.
    pub fn save(&self, checkpoint: &std::path::Path, state: &std::path::Path) -> Result<()> {
        crate::vit::checkpoint::save(&self.params, checkpoint)?;
        let st = TrainerState {
            epoch: self.epoch,
            losses: self.losses.clone(),
            adam: self.adam.clone(),
        };
        std::fs::write(state, serde_json::to_vec(&st)?)?;
        Ok(())
    }

    /// Restores a run written by [`Trainer::save`].
    pub fn resume(
        checkpoint: &std::path::Path,
        state: &std::path::Path,
        cfg: &TrainConfig,
        schedule: Option<&CompressionSchedule>,
        metric: SortMetric,
        train_len: usize,
    ) -> Result<Self> {
        let params = crate::vit::checkpoint::load(checkpoint)?;
        let st: TrainerState = serde_json::from_slice(&std::fs::read(state)?)?;
        let mut t = Self::new(params, cfg, schedule, metric, train_len)?;
        if st.adam.sizes() != t.adam.sizes() {
            return Err(Error::Format {
                what: "optimizer state",
                detail: "parameter sizes do not match the checkpoint".into(),
            });
        }
        t.adam = st.adam;
        t.epoch = st.epoch;
        t.losses = st.losses;
        Ok(t)
    }
}
