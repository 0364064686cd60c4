//! Training stages: multilingual pre-training, per-language warmup for
//! magnitude pruning, and joint adaptation of masked sub-networks.

mod checkpoint;
mod config;
mod optim;
mod trainer;

use std::collections::BTreeMap;
use std::path::Path;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
pub use config::{LrSchedule, Stage, TrainConfig};
pub use optim::{AdamConfig, AdamState};
pub use trainer::{config_digest, StepRecord, TrainContext, Trainer};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::ParamTree;
use crate::pruning::{magnitude_scores, taylor_scores, Group, ImportanceTable, MaskScorer, SubnetMask};
use crate::rng::Stream;
use crate::scalar::Scalar;

/// Initializes parameters from the root seed and runs the pre-training stage.
pub fn pretrain<S: Scalar>(ctx: &TrainContext<'_>, cfg: &TrainConfig, metrics: Option<&Path>) -> Result<Checkpoint<S>> {
    let params = ParamTree::init(ctx.model.config(), &mut Stream::new(ctx.seed, &["init"]));
    let mut t = Trainer::start(ctx, cfg, params, 0, &["pretrain"], None)?;
    if let Some(p) = metrics {
        t = t.with_metrics(p)?;
    }
    t.run(ctx.corpus)?;
    Ok(t.checkpoint())
}

/// Fine-tunes a copy of `base` on the pooled data of `group`. `base` is not
/// modified.
pub fn warmup_language<S: Scalar>(
    ctx: &TrainContext<'_>,
    base: &Checkpoint<S>,
    group: &Group,
    cfg: &TrainConfig,
    metrics: Option<&Path>,
) -> Result<ParamTree<S>> {
    let mut t = Trainer::start(ctx, cfg, base.params.clone(), base.global_step, &["warmup", &group.id], Some(&group.languages))?;
    if let Some(p) = metrics {
        t = t.with_metrics(p)?;
    }
    t.run(ctx.corpus)?;
    Ok(t.into_params())
}

/// Joint adaptation: each step trains the sub-network of its batch's
/// language, starting from `base` with fresh optimizer moments.
pub fn adapt_s3net<S: Scalar>(
    ctx: &TrainContext<'_>,
    base: &Checkpoint<S>,
    masks: BTreeMap<String, SubnetMask>,
    cfg: &TrainConfig,
    metrics: Option<&Path>,
) -> Result<Checkpoint<S>> {
    let mut t = Trainer::start(ctx, cfg, base.params.clone(), base.global_step, &["adapt"], None)?.with_masks(masks)?;
    if let Some(p) = metrics {
        t = t.with_metrics(p)?;
    }
    t.run(ctx.corpus)?;
    Ok(t.checkpoint())
}

/// Score source for mask extraction from a pre-trained checkpoint.
pub struct StageScorer<'a, 'c, S> {
    pub ctx: &'a TrainContext<'c>,
    pub base: &'a Checkpoint<S>,
    pub warmup: TrainConfig,
    /// Batches averaged per Taylor table.
    pub taylor_batches: usize,
    pub metrics: Option<&'a Path>,
}

impl<S: Scalar> MaskScorer<S> for StageScorer<'_, '_, S> {
    fn warmed_magnitude(&mut self, group: &Group) -> Result<ImportanceTable> {
        let warmed = warmup_language(self.ctx, self.base, group, &self.warmup, self.metrics)?;
        Ok(magnitude_scores(&warmed))
    }

    fn taylor(&mut self, language: &str) -> Result<ImportanceTable> {
        if self.taylor_batches == 0 {
            return Err(Error::validation("pruning.taylor_batches", "must be >= 1"));
        }
        let mut rng = Stream::new(self.ctx.seed, &["masks", "taylor", language]);
        let batches = (0..self.taylor_batches)
            .map(|i| {
                let plan = self.ctx.corpus.batch(language, Split::Train, self.warmup.batch_size, format!("taylor/{i}"), &mut rng)?;
                Ok(plan.windows.iter().map(|w| w.iter().map(|&x| S::lit(x as f64)).collect()).collect())
            })
            .collect::<Result<Vec<Vec<Vec<S>>>>>()?;
        let temperature = self.ctx.objective.temperature.at(self.base.global_step);
        taylor_scores(self.ctx.model, &self.base.params, &batches, self.ctx.objective, temperature, &mut rng)
    }
}
