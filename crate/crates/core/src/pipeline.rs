//! File-level pipeline stages: cluster-fit, label, pretrain and transfer.
//!
//! Every stage reads its inputs from disk, derives its seed from the global
//! seed and the stage name, writes its artifacts into the output directory and
//! re-reads them before reporting success.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::cluster::{self, ClusterModel, KMeansConfig};
use crate::error::{Error, Result};
use crate::features::{
    normalize_reactions, EngagementKind, EngagementVector, VocabConfig, Vocabulary,
};
use crate::labeling::{
    self, comment_seed, sample_comments, CorpusSplit, ImageInput, LabelRow, LabeledDataset,
    LabelingConfig, Post,
};
use crate::model::{self, Checkpoint, Encoder, InputSpec, ModelConfig};
use crate::synth::{self, SynthConfig, TaskSynthConfig};
use crate::training::{self, TrainConfig};
use crate::transfer::{self, TransferConfig, TransferReport, TransferTask};
use crate::{io, seed};

pub const SPLIT_FILE: &str = "split.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const COMMENT_CLUSTERS_FILE: &str = "comment_clusters.json";
pub const REACTION_CLUSTERS_FILE: &str = "reaction_clusters.json";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const CLASSES_FILE: &str = "classes.jsonl";
pub const TASK_FILE: &str = "task.jsonl";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus: PathBuf,
    /// Downstream dataset for the transfer stage.
    pub task: PathBuf,
    pub out_dir: PathBuf,
    /// Checkpoint used by the transfer stage; defaults to the one in `out_dir`.
    pub checkpoint: Option<PathBuf>,
    /// Report file name inside `out_dir`.
    pub report: String,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: PathBuf::from(CORPUS_FILE),
            task: PathBuf::from(TASK_FILE),
            out_dir: PathBuf::from("out"),
            checkpoint: None,
            report: REPORT_FILE.into(),
        }
    }
}

/// k-means settings for one engagement type; the seed comes from the global seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStage {
    pub k: usize,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub mini_batch: Option<usize>,
}

fn default_max_iters() -> usize {
    KMeansConfig::default().max_iters
}

fn default_tol() -> f64 {
    KMeansConfig::default().tol
}

fn default_restarts() -> usize {
    KMeansConfig::default().restarts
}

impl ClusterStage {
    pub fn with_k(k: usize) -> Self {
        ClusterStage {
            k,
            max_iters: default_max_iters(),
            tol: default_tol(),
            restarts: default_restarts(),
            mini_batch: None,
        }
    }

    fn kmeans(&self, k: usize, seed_value: u64) -> KMeansConfig {
        KMeansConfig {
            k,
            seed: seed_value,
            max_iters: self.max_iters,
            tol: self.tol,
            restarts: self.restarts,
            mini_batch: self.mini_batch,
        }
    }
}

/// Encoder shape; the input spec and head widths come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelStage {
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub prior: f64,
    /// Side length rasters are resized to; defaults to the corpus raster height.
    pub raster_size: Option<usize>,
}

impl Default for ModelStage {
    fn default() -> Self {
        let d = ModelConfig::new(InputSpec::Features { dim: 1 }, 1, 1);
        ModelStage {
            hidden_dims: d.hidden_dims,
            embedding_dim: d.embedding_dim,
            prior: d.prior,
            raster_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub vocab: VocabConfig,
    pub labeling: LabelingConfig,
    pub comment_clusters: ClusterStage,
    pub reaction_clusters: ClusterStage,
    pub model: ModelStage,
    pub train: TrainConfig,
    pub transfer: TransferConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            paths: Paths::default(),
            vocab: VocabConfig::default(),
            labeling: LabelingConfig::default(),
            comment_clusters: ClusterStage::with_k(5000),
            reaction_clusters: ClusterStage::with_k(128),
            model: ModelStage::default(),
            train: TrainConfig::default(),
            transfer: TransferConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Seed for a named stage.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        seed::derive(self.seed, stage)
    }

    fn out(&self, name: &str) -> PathBuf {
        self.paths.out_dir.join(name)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out(CHECKPOINT_FILE))
    }

    pub fn report_path(&self) -> PathBuf {
        self.out(&self.paths.report)
    }

    /// Model shape implied by the corpus images and fitted cluster counts.
    pub fn model_config(
        &self,
        sample: &ImageInput,
        k_comment: usize,
        k_reaction: usize,
    ) -> ModelConfig {
        let input = match sample {
            ImageInput::Features { features } => InputSpec::Features {
                dim: features.len(),
            },
            ImageInput::Raster { h, c, .. } => InputSpec::Raster {
                size: self.model.raster_size.unwrap_or(*h),
                channels: *c,
            },
        };
        ModelConfig {
            input,
            hidden_dims: self.model.hidden_dims.clone(),
            embedding_dim: self.model.embedding_dim,
            k_comment,
            k_reaction,
            prior: self.model.prior,
        }
    }
}

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
    _file: File,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => Error::State(format!(
                    "{} is locked by another run; remove {} if no run is active",
                    dir.display(),
                    path.display()
                )),
                _ => Error::io(&path, e),
            })?;
        Ok(OutputLock { path, _file: file })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Input(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

fn load_corpus(cfg: &PipelineConfig) -> Result<Vec<Post>> {
    require(&cfg.paths.corpus, "corpus")?;
    let corpus = labeling::load_corpus(&cfg.paths.corpus)?;
    labeling::validate_corpus(&corpus)?;
    if corpus.is_empty() {
        return Err(Error::Input(format!(
            "corpus {} is empty",
            cfg.paths.corpus.display()
        )));
    }
    Ok(corpus)
}

fn clamp_k(requested: usize, distinct: usize, what: &str) -> Result<usize> {
    if distinct == 0 {
        return Err(Error::Fit(format!(
            "the holdout has no {what} features to cluster"
        )));
    }
    if requested > distinct {
        warn!("{what} clusters: requested k = {requested} exceeds the {distinct} distinct holdout features; using k = {distinct}");
        Ok(distinct)
    } else {
        Ok(requested)
    }
}

fn fit_stage(
    features: &[EngagementVector],
    stage: &ClusterStage,
    seed_value: u64,
    what: &str,
) -> Result<ClusterModel> {
    let points: Vec<Vec<f64>> = features.iter().map(|f| f.values.clone()).collect();
    let k = clamp_k(stage.k, cluster::count_distinct(&points), what)?;
    cluster::fit_clusters(features, &stage.kmeans(k, seed_value))
}

#[derive(Debug, Clone)]
pub struct ClusterFitOutput {
    pub split: CorpusSplit,
    pub vocab: Vocabulary,
    pub comment_model: ClusterModel,
    pub reaction_model: ClusterModel,
}

/// Split the corpus, then fit the vocabulary and both cluster models on the holdout.
pub fn cluster_fit(cfg: &PipelineConfig) -> Result<ClusterFitOutput> {
    let corpus = load_corpus(cfg)?;
    let _lock = OutputLock::acquire(&cfg.paths.out_dir)?;
    let split = labeling::split_corpus(
        &corpus,
        cfg.labeling.holdout_fraction,
        cfg.stage_seed("split"),
    )?;
    let holdout: Vec<&Post> = {
        let ids: std::collections::BTreeSet<&str> =
            split.cluster_fit_ids.iter().map(String::as_str).collect();
        corpus
            .iter()
            .filter(|p| ids.contains(p.id.as_str()))
            .collect()
    };

    let comment_sample_seed = cfg.stage_seed("cluster-fit/comments");
    let comments: Vec<String> = holdout
        .iter()
        .flat_map(|p| {
            sample_comments(
                &p.comments,
                cfg.labeling.max_comments,
                comment_seed(comment_sample_seed, &p.id),
            )
        })
        .collect();
    if comments.is_empty() {
        return Err(Error::Fit(
            "the holdout has no comments to fit a vocabulary on".into(),
        ));
    }
    let vocab = Vocabulary::fit(&comments, &cfg.vocab)?.with_fit_ids(split.cluster_fit_ids.clone());
    let comment_features: Vec<EngagementVector> = comments
        .iter()
        .map(|c| vocab.embed_comment(c))
        .filter(|e| !e.skip)
        .map(|e| e.vector)
        .collect();
    let reaction_features: Vec<EngagementVector> = holdout
        .iter()
        .filter_map(|p| normalize_reactions(&p.reactions))
        .collect();
    info!(
        "cluster-fit: {} holdout posts, {} comment and {} reaction features",
        holdout.len(),
        comment_features.len(),
        reaction_features.len()
    );

    let comment_model = fit_stage(
        &comment_features,
        &cfg.comment_clusters,
        cfg.stage_seed("cluster-fit/comment-kmeans"),
        "comment",
    )?
    .with_fit_ids(split.cluster_fit_ids.clone());
    let reaction_model = fit_stage(
        &reaction_features,
        &cfg.reaction_clusters,
        cfg.stage_seed("cluster-fit/reaction-kmeans"),
        "reaction",
    )?
    .with_fit_ids(split.cluster_fit_ids.clone());

    io::write_string(&cfg.out(SPLIT_FILE), &serde_json::to_string_pretty(&split)?)?;
    vocab.save(&cfg.out(VOCAB_FILE))?;
    comment_model.save(&cfg.out(COMMENT_CLUSTERS_FILE))?;
    reaction_model.save(&cfg.out(REACTION_CLUSTERS_FILE))?;

    let written = read_cluster_fit(cfg)?;
    if written.split != split || written.comment_model.kind != EngagementKind::Comment {
        return Err(Error::Integrity(
            "cluster-fit outputs did not read back as written".into(),
        ));
    }
    Ok(written)
}

/// Load the artifacts written by [`cluster_fit`].
pub fn read_cluster_fit(cfg: &PipelineConfig) -> Result<ClusterFitOutput> {
    for name in [
        SPLIT_FILE,
        VOCAB_FILE,
        COMMENT_CLUSTERS_FILE,
        REACTION_CLUSTERS_FILE,
    ] {
        require(&cfg.out(name), "cluster-fit output")?;
    }
    Ok(ClusterFitOutput {
        split: serde_json::from_str(&io::read_string(&cfg.out(SPLIT_FILE))?)?,
        vocab: Vocabulary::load(&cfg.out(VOCAB_FILE))?,
        comment_model: ClusterModel::load(&cfg.out(COMMENT_CLUSTERS_FILE))?,
        reaction_model: ClusterModel::load(&cfg.out(REACTION_CLUSTERS_FILE))?,
    })
}

/// Pseudo-label every training post with the fitted models.
pub fn label(cfg: &PipelineConfig) -> Result<LabeledDataset> {
    let corpus = load_corpus(cfg)?;
    let fitted = read_cluster_fit(cfg)?;
    let _lock = OutputLock::acquire(&cfg.paths.out_dir)?;
    let dataset = labeling::build_dataset(
        &corpus,
        &fitted.split,
        &fitted.comment_model,
        &fitted.reaction_model,
        &fitted.vocab,
        cfg.stage_seed("label"),
        cfg.labeling.max_comments,
    )?;
    let (_, empty) = dataset.trainable();
    info!(
        "label: {} training posts, {empty} without any engagement target",
        dataset.records.len()
    );
    dataset.save(&cfg.out(LABELS_FILE))?;
    let rows: Vec<LabelRow> = io::read_jsonl(&cfg.out(LABELS_FILE))?;
    if rows != dataset.rows() {
        return Err(Error::Integrity(
            "labels did not read back as written".into(),
        ));
    }
    Ok(dataset)
}

/// Training configuration with the stage seed substituted.
pub fn train_config(cfg: &PipelineConfig) -> TrainConfig {
    TrainConfig {
        seed: cfg.stage_seed("pretrain"),
        ..cfg.train.clone()
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<training::LogRow>,
    pub excluded: usize,
}

/// Pretrain the encoder on the labeled training posts.
pub fn pretrain(cfg: &PipelineConfig) -> Result<PretrainOutput> {
    let corpus = load_corpus(cfg)?;
    let fitted = read_cluster_fit(cfg)?;
    require(&cfg.out(LABELS_FILE), "labels")?;
    let rows: Vec<LabelRow> = io::read_jsonl(&cfg.out(LABELS_FILE))?;
    let dataset = LabeledDataset::from_rows(rows, &corpus)?;
    let first = dataset
        .records
        .first()
        .ok_or_else(|| Error::Input("the labeled dataset is empty".into()))?;
    let model_cfg = cfg.model_config(
        &first.image,
        fitted.comment_model.k,
        fitted.reaction_model.k,
    );
    let _lock = OutputLock::acquire(&cfg.paths.out_dir)?;
    let train_cfg = train_config(cfg);
    let outcome = training::pretrain(&dataset, &model_cfg, &train_cfg)?;
    let checkpoint = Checkpoint::new(&model_cfg, &outcome.params, train_cfg.total_iterations);
    checkpoint.save(&cfg.out(CHECKPOINT_FILE))?;
    training::write_log(&cfg.out(TRAIN_LOG_FILE), &outcome.log)?;
    if Checkpoint::load(&cfg.out(CHECKPOINT_FILE))?.params()? != outcome.params {
        return Err(Error::Integrity(
            "checkpoint did not read back as written".into(),
        ));
    }
    Ok(PretrainOutput {
        checkpoint,
        log: outcome.log,
        excluded: outcome.excluded,
    })
}

/// Transfer configuration with the stage seed substituted.
pub fn transfer_config(cfg: &PipelineConfig) -> TransferConfig {
    TransferConfig {
        seed: cfg.stage_seed("transfer"),
        ..cfg.transfer.clone()
    }
}

/// Evaluate an arbitrary encoder on the configured downstream task.
pub fn transfer_with(
    cfg: &PipelineConfig,
    encoder: &Encoder,
    spec: &InputSpec,
) -> Result<TransferReport> {
    require(&cfg.paths.task, "task")?;
    let task = TransferTask::load(&cfg.paths.task)?;
    transfer::run_protocol(encoder, spec, &task, &transfer_config(cfg))
}

/// Evaluate the pretrained checkpoint and write the report.
pub fn transfer(cfg: &PipelineConfig) -> Result<TransferReport> {
    let ckpt_path = cfg.checkpoint_path();
    require(&ckpt_path, "checkpoint")?;
    let checkpoint = Checkpoint::load(&ckpt_path)?;
    let params = checkpoint.params()?;
    save_report(cfg, &params.encoder, &checkpoint.config.input)
}

/// Evaluate a freshly initialized encoder of the configured shape: the
/// no-pretraining baseline.
pub fn transfer_random(cfg: &PipelineConfig, model_cfg: &ModelConfig) -> Result<TransferReport> {
    let params = model::init_params(model_cfg, cfg.stage_seed("random-encoder"))?;
    save_report(cfg, &params.encoder, &model_cfg.input)
}

fn save_report(
    cfg: &PipelineConfig,
    encoder: &Encoder,
    spec: &InputSpec,
) -> Result<TransferReport> {
    let report = transfer_with(cfg, encoder, spec)?;
    let _lock = OutputLock::acquire(&cfg.paths.out_dir)?;
    report.save(&cfg.report_path())?;
    let back = TransferReport::load(&cfg.report_path())?;
    let (ci, cj) = back.grid().select()?;
    if back != report
        || (back.base_lrs[ci], back.weight_decays[cj])
            != (report.chosen.base_lr, report.chosen.weight_decay)
    {
        return Err(Error::Integrity(
            "report did not read back as written".into(),
        ));
    }
    Ok(report)
}

/// Write a synthetic corpus, its class sidecar and optionally a downstream task.
pub fn synth(
    out_dir: &Path,
    corpus_cfg: &SynthConfig,
    task_cfg: Option<&TaskSynthConfig>,
) -> Result<synth::SynthCorpus> {
    let _lock = OutputLock::acquire(out_dir)?;
    let corpus = synth::generate(corpus_cfg)?;
    corpus.save(&out_dir.join(CORPUS_FILE), &out_dir.join(CLASSES_FILE))?;
    if let Some(t) = task_cfg {
        io::write_jsonl(
            &out_dir.join(TASK_FILE),
            &synth::generate_task(corpus_cfg, t)?,
        )?;
        TransferTask::load(&out_dir.join(TASK_FILE))?;
    }
    let back = labeling::load_corpus(&out_dir.join(CORPUS_FILE))?;
    if back != corpus.posts {
        return Err(Error::Integrity(
            "corpus did not read back as written".into(),
        ));
    }
    Ok(corpus)
}
