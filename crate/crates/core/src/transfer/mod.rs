//! Downstream evaluation of a pretrained encoder: linear probe and
//! end-to-end fine-tuning, each with a learning-rate x weight-decay grid search.

pub mod metrics;

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::ImageInput;
use crate::model::{self, Encoder, InputSpec, Linear, Tensors};
use crate::training::loss::{cross_entropy_with_grad, softmax};
use crate::training::{
    adamw_step, scaled_lr, sgd_step, train_input, AdamWState, AugmentConfig, SgdState,
};
use crate::{io, par, seed};

pub use metrics::{accuracy, argmax, binary_auc, macro_auc, population_std, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    LinearEval,
    FineTune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    MacroAuc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One line of a downstream dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: String,
    pub split: Split,
    pub image: ImageInput,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_features: Option<Vec<f64>>,
}

/// A validated downstream dataset.
#[derive(Debug, Clone)]
pub struct TransferTask {
    pub records: Vec<TaskRecord>,
    pub num_classes: usize,
    /// Width of the text features when every record carries them.
    pub text_dim: Option<usize>,
}

impl TransferTask {
    pub fn new(records: Vec<TaskRecord>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for r in &records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Input(format!(
                    "task id {:?} appears more than once",
                    r.id
                )));
            }
            r.image.validate()?;
        }
        for split in [Split::Train, Split::Val, Split::Test] {
            if !records.iter().any(|r| r.split == split) {
                return Err(Error::Input(format!("task has no {split:?} records")));
            }
        }
        let with_text = records.iter().filter(|r| r.text_features.is_some()).count();
        let text_dim = if with_text == 0 {
            None
        } else if with_text < records.len() {
            return Err(Error::Input(
                "multimodal task is missing text features on some records".into(),
            ));
        } else {
            let d = records[0].text_features.as_ref().map_or(0, Vec::len);
            if records
                .iter()
                .any(|r| r.text_features.as_ref().map(Vec::len) != Some(d))
            {
                return Err(Error::Input(
                    "text feature widths differ across records".into(),
                ));
            }
            Some(d)
        };
        let num_classes = records.iter().map(|r| r.label).max().map_or(0, |m| m + 1);
        if num_classes < 2 {
            return Err(Error::Input(
                "a downstream task needs at least two classes".into(),
            ));
        }
        Ok(TransferTask {
            records,
            num_classes,
            text_dim,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(io::read_jsonl(path)?)
    }

    pub fn is_multimodal(&self) -> bool {
        self.text_dim.is_some()
    }

    fn split(&self, split: Split) -> Vec<&TaskRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    pub protocol: Protocol,
    pub metric: Metric,
    pub base_lrs: Vec<f64>,
    pub weight_decays: Vec<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub momentum: f64,
    pub seed: u64,
    /// Augmentation for raster inputs during fine-tuning.
    pub augment: AugmentConfig,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            protocol: Protocol::LinearEval,
            metric: Metric::Accuracy,
            base_lrs: vec![0.025, 0.0025, 0.00025],
            weight_decays: vec![0.01, 0.001, 0.0001],
            batch_size: 256,
            epochs: 50,
            momentum: 0.9,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TransferConfig {
    fn validate(&self) -> Result<()> {
        if self.base_lrs.is_empty() || self.weight_decays.is_empty() {
            return Err(Error::Config("the hyperparameter grid is empty".into()));
        }
        if self
            .base_lrs
            .iter()
            .chain(&self.weight_decays)
            .any(|v| !(*v >= 0.0) || !v.is_finite())
        {
            return Err(Error::Config(
                "grid values must be finite and non-negative".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Effective rate `base_lr / 256 * batch_size`.
    pub lr: f64,
    pub val_metric: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chosen {
    pub base_lr: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub protocol: Protocol,
    pub metric: Metric,
    pub multimodal: bool,
    pub base_lrs: Vec<f64>,
    pub weight_decays: Vec<f64>,
    /// Row-major over (base_lr, weight_decay).
    pub grid: Vec<GridCell>,
    pub chosen: Chosen,
    pub test_metric: f64,
    pub s_lr: f64,
    pub s_wd: f64,
}

impl TransferReport {
    pub fn grid(&self) -> Grid {
        Grid {
            base_lrs: self.base_lrs.clone(),
            weight_decays: self.weight_decays.clone(),
            values: self
                .grid
                .chunks(self.weight_decays.len())
                .map(|row| row.iter().map(|c| Some(c.val_metric)).collect())
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_string(path, &serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&io::read_string(path)?)?)
    }
}

/// Image embedding followed by text features.
pub fn concat_features(image: &[f64], text: Option<&[f64]>) -> Result<Vec<f64>> {
    let text =
        text.ok_or_else(|| Error::Input("multimodal task record lacks text features".into()))?;
    let mut out = Vec::with_capacity(image.len() + text.len());
    out.extend_from_slice(image);
    out.extend_from_slice(text);
    Ok(out)
}

/// One training example: input, optional text features, label.
type Example<'a> = (&'a [f64], Option<&'a [f64]>, usize);

/// Encoder (absent when frozen features are precomputed) plus a linear head.
#[derive(Debug, Clone, PartialEq)]
struct Classifier {
    encoder: Option<Encoder>,
    head: Linear,
}

impl Tensors for Classifier {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = self
            .encoder
            .as_ref()
            .map(Tensors::tensors)
            .unwrap_or_default();
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self
            .encoder
            .as_mut()
            .map(Tensors::tensors_mut)
            .unwrap_or_default();
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }
}

impl Classifier {
    fn zeros_like(&self) -> Self {
        Classifier {
            encoder: self.encoder.as_ref().map(Encoder::zeros_like),
            head: Linear::zeros(self.head.in_dim, self.head.out_dim),
        }
    }

    fn logits(&self, x: &[f64], text: Option<&[f64]>) -> Result<Vec<f64>> {
        let emb = match &self.encoder {
            Some(e) => e.forward(x),
            None => x.to_vec(),
        };
        let feat = match text {
            Some(t) => concat_features(&emb, Some(t))?,
            None => emb,
        };
        Ok(self.head.forward(&feat))
    }

    /// Mean cross-entropy gradient over `(input, text, label)` triples.
    fn gradient(&self, batch: &[Example<'_>]) -> Result<Classifier> {
        let scale = 1.0 / batch.len() as f64;
        let partials = par::map_chunks(batch, model::GRAD_CHUNK, |chunk| -> Result<Classifier> {
            let mut g = self.zeros_like();
            for &(x, text, y) in chunk {
                let trace = self.encoder.as_ref().map(|e| e.forward_traced(x));
                let emb = trace.as_ref().map_or(x, |t| t.output.as_slice());
                let feat = match text {
                    Some(t) => concat_features(emb, Some(t))?,
                    None => emb.to_vec(),
                };
                let logits = self.head.forward(&feat);
                let (_, mut d) = cross_entropy_with_grad(&logits, y)?;
                d.iter_mut().for_each(|v| *v *= scale);
                let dx = self.head.backward(&feat, &d, &mut g.head, trace.is_some());
                if let (Some(enc), Some(t), Some(ge)) = (&self.encoder, &trace, g.encoder.as_mut())
                {
                    enc.backward(t, &dx[..emb.len()], ge);
                }
            }
            Ok(g)
        });
        let mut total = self.zeros_like();
        for p in partials {
            let p = p?;
            for (a, b) in total.tensors_mut().into_iter().zip(p.tensors()) {
                a.iter_mut().zip(b.1).for_each(|(x, y)| *x += y);
            }
        }
        Ok(total)
    }
}

enum Optimizer {
    Sgd(SgdState),
    AdamW(AdamWState),
}

struct Prepared<'a> {
    /// Train inputs: embeddings (linear eval) or flattened images (fine-tune, no rasters).
    train: Vec<Vec<f64>>,
    train_records: Vec<&'a TaskRecord>,
    val: Vec<Vec<f64>>,
    val_records: Vec<&'a TaskRecord>,
    test: Vec<Vec<f64>>,
    test_records: Vec<&'a TaskRecord>,
}

fn prepare<'a>(
    task: &'a TransferTask,
    spec: &InputSpec,
    frozen: Option<&Encoder>,
) -> Result<Prepared<'a>> {
    let embed = |records: &[&TaskRecord]| -> Result<Vec<Vec<f64>>> {
        par::map(records, |r| {
            let x = model::eval_input(spec, &r.image)?;
            Ok(match frozen {
                Some(e) => e.forward(&x),
                None => x,
            })
        })
        .into_iter()
        .collect()
    };
    let train_records = task.split(Split::Train);
    let val_records = task.split(Split::Val);
    let test_records = task.split(Split::Test);
    Ok(Prepared {
        train: embed(&train_records)?,
        val: embed(&val_records)?,
        test: embed(&test_records)?,
        train_records,
        val_records,
        test_records,
    })
}

fn score(
    model: &Classifier,
    inputs: &[Vec<f64>],
    records: &[&TaskRecord],
    metric: Metric,
) -> Result<f64> {
    let scores = inputs
        .iter()
        .zip(records)
        .map(|(x, r)| {
            model
                .logits(x, r.text_features.as_deref())
                .map(|z| softmax(&z))
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    match metric {
        Metric::Accuracy => accuracy(&scores, &labels),
        Metric::MacroAuc => macro_auc(&scores, &labels),
    }
}

struct CellResult {
    val: f64,
    test: f64,
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    task: &TransferTask,
    data: &Prepared<'_>,
    encoder: Option<&Encoder>,
    spec: &InputSpec,
    cfg: &TransferConfig,
    base_lr: f64,
    weight_decay: f64,
    cell_seed: u64,
) -> Result<CellResult> {
    let emb_dim = match encoder {
        Some(e) => e.output_dim(),
        None => data.train.first().map_or(0, Vec::len),
    };
    let in_dim = emb_dim + task.text_dim.unwrap_or(0);
    let mut rng = seed::rng(seed::derive(cell_seed, "head"));
    let mut model = Classifier {
        encoder: encoder.cloned(),
        head: Linear::init(in_dim, task.num_classes, 0.0, &mut rng),
    };
    let lr = scaled_lr(base_lr, cfg.batch_size);
    let mut opt = if task.is_multimodal() {
        Optimizer::AdamW(AdamWState::new(&model))
    } else {
        Optimizer::Sgd(SgdState::new(&model))
    };
    let n = data.train_records.len();
    let mut order: Vec<usize> = (0..n).collect();
    let shuffle_seed = seed::derive(cell_seed, "shuffle");
    let augment_seed = seed::derive(cell_seed, "augment");
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng(seed::derive_indexed(
            shuffle_seed,
            &[epoch as u64],
        )));
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            // Fine-tuning on rasters re-augments every time an image is drawn.
            let augmented: Vec<Option<Vec<f64>>> = par::map(idx, |&i| {
                let r = data.train_records[i];
                match (&model.encoder, &r.image) {
                    (Some(_), ImageInput::Raster { .. }) => {
                        let s = seed::derive_indexed(
                            augment_seed,
                            &[epoch as u64, step as u64, i as u64],
                        );
                        Some(train_input(spec, &r.image, s, &cfg.augment))
                    }
                    _ => None,
                }
                .transpose()
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let batch: Vec<Example<'_>> = idx
                .iter()
                .zip(&augmented)
                .map(|(&i, aug)| {
                    let r = data.train_records[i];
                    let x = aug.as_deref().unwrap_or(&data.train[i]);
                    (x, r.text_features.as_deref(), r.label)
                })
                .collect();
            let grads = model.gradient(&batch)?;
            match &mut opt {
                Optimizer::Sgd(s) => {
                    sgd_step(&mut model, &grads, s, lr, cfg.momentum, weight_decay)?
                }
                Optimizer::AdamW(s) => adamw_step(&mut model, &grads, s, lr, weight_decay)?,
            }
        }
    }
    Ok(CellResult {
        val: score(&model, &data.val, &data.val_records, cfg.metric)?,
        test: score(&model, &data.test, &data.test_records, cfg.metric)?,
    })
}

fn evaluate(
    encoder: &Encoder,
    spec: &InputSpec,
    task: &TransferTask,
    cfg: &TransferConfig,
    protocol: Protocol,
) -> Result<TransferReport> {
    cfg.validate()?;
    if encoder.input_dim() != spec.flat_dim() {
        return Err(Error::Input(format!(
            "encoder expects {} inputs but the input spec flattens to {}",
            encoder.input_dim(),
            spec.flat_dim()
        )));
    }
    let data = match protocol {
        Protocol::LinearEval => prepare(task, spec, Some(encoder))?,
        Protocol::FineTune => prepare(task, spec, None)?,
    };
    let trainable = match protocol {
        Protocol::LinearEval => None,
        Protocol::FineTune => Some(encoder),
    };
    let cells: Vec<(usize, usize)> = (0..cfg.base_lrs.len())
        .flat_map(|i| (0..cfg.weight_decays.len()).map(move |j| (i, j)))
        .collect();
    let results = par::map(&cells, |&(i, j)| {
        let cell_seed = seed::derive_indexed(cfg.seed, &[i as u64, j as u64]);
        run_cell(
            task,
            &data,
            trainable,
            spec,
            cfg,
            cfg.base_lrs[i],
            cfg.weight_decays[j],
            cell_seed,
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let grid = Grid {
        base_lrs: cfg.base_lrs.clone(),
        weight_decays: cfg.weight_decays.clone(),
        values: results
            .chunks(cfg.weight_decays.len())
            .map(|row| row.iter().map(|c| Some(c.val)).collect())
            .collect(),
    };
    let (ci, cj) = grid.select()?;
    let (s_lr, s_wd) = grid.sensitivity()?;
    Ok(TransferReport {
        protocol,
        metric: cfg.metric,
        multimodal: task.is_multimodal(),
        base_lrs: cfg.base_lrs.clone(),
        weight_decays: cfg.weight_decays.clone(),
        grid: cells
            .iter()
            .zip(&results)
            .map(|(&(i, j), r)| GridCell {
                base_lr: cfg.base_lrs[i],
                weight_decay: cfg.weight_decays[j],
                lr: scaled_lr(cfg.base_lrs[i], cfg.batch_size),
                val_metric: r.val,
            })
            .collect(),
        chosen: Chosen {
            base_lr: cfg.base_lrs[ci],
            weight_decay: cfg.weight_decays[cj],
        },
        test_metric: results[ci * cfg.weight_decays.len() + cj].test,
        s_lr,
        s_wd,
    })
}

/// Train a fresh linear head on frozen embeddings; the encoder is never modified.
pub fn linear_eval(
    encoder: &Encoder,
    spec: &InputSpec,
    task: &TransferTask,
    cfg: &TransferConfig,
) -> Result<TransferReport> {
    evaluate(encoder, spec, task, cfg, Protocol::LinearEval)
}

/// Train the encoder and a fresh head end to end, starting from `encoder`.
pub fn fine_tune(
    encoder: &Encoder,
    spec: &InputSpec,
    task: &TransferTask,
    cfg: &TransferConfig,
) -> Result<TransferReport> {
    evaluate(encoder, spec, task, cfg, Protocol::FineTune)
}

/// Dispatch on `cfg.protocol`.
pub fn run_protocol(
    encoder: &Encoder,
    spec: &InputSpec,
    task: &TransferTask,
    cfg: &TransferConfig,
) -> Result<TransferReport> {
    evaluate(encoder, spec, task, cfg, cfg.protocol)
}
