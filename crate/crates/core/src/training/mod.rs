//! Multi-task pretraining: losses, optimizer recipe, augmentation, and the
//! training loop.

pub mod augment;
pub mod loss;
pub mod optim;
pub mod schedule;

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::{ImageInput, LabeledDataset, LabeledRecord};
use crate::model::{self, InputSpec, LossBreakdown, LossWeights, ModelConfig, ModelParams, Sample};
use crate::{par, seed};

pub use augment::{augment, AugmentConfig};
pub use loss::{cross_entropy, soft_cross_entropy};
pub use optim::{adamw_step, sgd_step, AdamWState, SgdState};
pub use schedule::{pretrain_base_lr, scaled_lr, LrSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Overrides the `0.1 / 256 * batch_size` rule when set.
    pub base_lr: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub decay_milestones: Vec<usize>,
    pub decay_factor: f64,
    pub total_iterations: usize,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            base_lr: None,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_fraction: 0.05,
            decay_milestones: Vec::new(),
            decay_factor: 0.5,
            total_iterations: 1000,
            loss_weights: LossWeights::default(),
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn base_lr(&self) -> f64 {
        self.base_lr
            .unwrap_or_else(|| pretrain_base_lr(self.batch_size))
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr(),
            total_iterations: self.total_iterations,
            warmup_fraction: self.warmup_fraction,
            milestones: self.decay_milestones.clone(),
            decay_factor: self.decay_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        let w = self.loss_weights;
        if !(w.comment >= 0.0 && w.reaction >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        self.schedule().validate()
    }
}

/// Learning rate for `iteration` under `config`'s warmup and decay.
pub fn lr_at(iteration: usize, config: &TrainConfig) -> f64 {
    config.schedule().lr_at(iteration)
}

/// Mean multi-task loss over a batch of records (no weight decay term).
pub fn batch_loss(
    params: &ModelParams,
    spec: &InputSpec,
    batch: &[LabeledRecord],
    weights: LossWeights,
) -> Result<LossBreakdown> {
    let inputs = batch
        .iter()
        .map(|r| model::eval_input(spec, &r.image))
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<Sample<'_>> = inputs
        .iter()
        .zip(batch)
        .map(|(x, r)| Sample {
            input: x,
            labels: &r.labels,
        })
        .collect();
    model::loss(params, &samples, weights)
}

/// Flattened training input: features unchanged, rasters augmented.
pub fn train_input(
    spec: &InputSpec,
    image: &ImageInput,
    seed_value: u64,
    cfg: &AugmentConfig,
) -> Result<Vec<f64>> {
    match (spec, image) {
        (InputSpec::Raster { size, channels }, ImageInput::Raster { pixels, h, w, c }) => {
            if c != channels {
                return Err(Error::Input(format!(
                    "raster has {c} channels, model expects {channels}"
                )));
            }
            Ok(augment(pixels, (*h, *w, *c), seed_value, *size, cfg))
        }
        _ => model::eval_input(spec, image),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_comment: Option<f64>,
    pub loss_reaction: Option<f64>,
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: ModelParams,
    pub log: Vec<LogRow>,
    /// Records dropped because they carried no target at all.
    pub excluded: usize,
}

/// Run the full pretraining recipe from a fresh seeded initialization.
pub fn pretrain(
    dataset: &LabeledDataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<PretrainOutcome> {
    let params = model::init_params(model_config, seed::derive(config.seed, "init"))?;
    pretrain_from(params, dataset, model_config, config)
}

/// Run the recipe starting from `params`.
pub fn pretrain_from(
    mut params: ModelParams,
    dataset: &LabeledDataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<PretrainOutcome> {
    config.validate()?;
    model_config.validate()?;
    let (records, excluded) = dataset.trainable();
    if excluded > 0 {
        log::info!("excluded {excluded} records with neither a comment nor a reaction target");
    }
    if records.is_empty() {
        return Err(Error::Input("no trainable records in the dataset".into()));
    }
    for r in &records {
        if let Some(t) = &r.labels.comment_target {
            if t.keys().any(|c| *c >= model_config.k_comment) {
                return Err(Error::Input(format!(
                    "record {:?} targets a comment cluster beyond k",
                    r.id
                )));
            }
        }
        if r.labels
            .reaction_label
            .is_some_and(|y| y >= model_config.k_reaction)
        {
            return Err(Error::Input(format!(
                "record {:?} targets a reaction cluster beyond k",
                r.id
            )));
        }
    }

    let schedule = config.schedule();
    let mut state = SgdState::new(&params);
    let shuffle_seed = seed::derive(config.seed, "shuffle");
    let augment_seed = seed::derive(config.seed, "augment");
    let per_epoch = records.len().div_ceil(config.batch_size);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(config.total_iterations);

    for it in 0..config.total_iterations {
        let (epoch, pos) = (it / per_epoch, it % per_epoch);
        if pos == 0 {
            order = (0..records.len()).collect();
            order.shuffle(&mut seed::rng(seed::derive_indexed(
                shuffle_seed,
                &[epoch as u64],
            )));
        }
        let idx = &order[pos * config.batch_size..((pos + 1) * config.batch_size).min(order.len())];
        let inputs = par::map(idx, |&i| {
            let s = seed::derive_indexed(augment_seed, &[it as u64, i as u64]);
            train_input(&model_config.input, &records[i].image, s, &config.augment)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let batch: Vec<Sample<'_>> = inputs
            .iter()
            .zip(idx)
            .map(|(x, &i)| Sample {
                input: x,
                labels: &records[i].labels,
            })
            .collect();
        // A batch can lack both targets only when every record in it was
        // filtered above, so this cannot fail on masking.
        let (loss, grads) = model::backward(&params, &batch, config.loss_weights, false)?;
        if !loss.total.is_finite() {
            return Err(Error::Training(format!(
                "loss became {} at iteration {it}",
                loss.total
            )));
        }
        let lr = schedule.lr_at(it);
        sgd_step(
            &mut params,
            &grads,
            &mut state,
            lr,
            config.momentum,
            config.weight_decay,
        )
        .map_err(|e| Error::Training(format!("iteration {it}: {e}")))?;
        log.push(LogRow {
            iteration: it,
            lr,
            loss: loss.total,
            loss_comment: loss.comment,
            loss_reaction: loss.reaction,
        });
    }
    Ok(PretrainOutcome {
        params,
        log,
        excluded,
    })
}
