use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use engage_core::model::Checkpoint;
use engage_core::pipeline::{self, PipelineConfig};
use engage_core::synth::{SynthConfig, TaskSynthConfig};
use engage_core::transfer::{Metric, Protocol};

#[derive(Parser)]
#[command(
    version,
    about = "Pretrain image encoders on engagement pseudo-labels and evaluate transfer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus, its class sidecar and a downstream task.
    Synth(SynthArgs),
    /// Split the corpus and fit the vocabulary and both cluster models on the holdout.
    ClusterFit(ClusterFitArgs),
    /// Pseudo-label every training post.
    Label(StageArgs),
    /// Pretrain the encoder on the pseudo-labels.
    Pretrain(PretrainArgs),
    /// Linear-probe or fine-tune the encoder on a downstream task.
    Transfer(TransferArgs),
    /// Print the default pipeline configuration.
    Config,
}

#[derive(Args)]
struct StageArgs {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Corpus JSONL; overrides the config.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

impl StageArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.paths.out_dir = o.clone();
        }
        if let Some(c) = &self.corpus {
            cfg.paths.corpus = c.clone();
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n_posts: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    feature_dim: usize,
    /// Emit square RGB rasters of this side length instead of feature vectors.
    #[arg(long)]
    raster_size: Option<usize>,
    /// Samples in the downstream task; 0 skips it.
    #[arg(long, default_value_t = 1000)]
    task_samples: usize,
    /// Attach text features of this width to the downstream task.
    #[arg(long)]
    text_dim: Option<usize>,
}

#[derive(Args)]
struct ClusterFitArgs {
    #[command(flatten)]
    stage: StageArgs,
    #[arg(long)]
    comment_k: Option<usize>,
    #[arg(long)]
    reaction_k: Option<usize>,
    #[arg(long)]
    holdout_fraction: Option<f64>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    stage: StageArgs,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    LinearEval,
    FineTune,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Accuracy,
    MacroAuc,
}

#[derive(Args)]
struct TransferArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Downstream task JSONL; overrides the config.
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    protocol: Option<ProtocolArg>,
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Evaluate a freshly initialized encoder of the checkpoint's shape instead.
    #[arg(long)]
    random_encoder: bool,
    /// Report file name inside the output directory.
    #[arg(long)]
    report: Option<String>,
}

fn synth(args: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_posts: args.n_posts,
        n_classes: args.classes,
        noise: args.noise,
        feature_dim: args.feature_dim,
        raster_size: args.raster_size,
        seed: args.seed,
        ..Default::default()
    };
    let task = (args.task_samples > 0).then(|| TaskSynthConfig {
        n_samples: args.task_samples,
        text_dim: args.text_dim,
        seed: engage_core::seed::derive(args.seed, "task"),
        ..Default::default()
    });
    let corpus = pipeline::synth(&args.out, &cfg, task.as_ref())?;
    info!(
        "wrote {} posts to {}",
        corpus.posts.len(),
        args.out.display()
    );
    Ok(())
}

fn transfer(args: &TransferArgs) -> Result<()> {
    let mut cfg = args.stage.load()?;
    if let Some(t) = &args.task {
        cfg.paths.task = t.clone();
    }
    if let Some(c) = &args.checkpoint {
        cfg.paths.checkpoint = Some(c.clone());
    }
    if let Some(p) = args.protocol {
        cfg.transfer.protocol = match p {
            ProtocolArg::LinearEval => Protocol::LinearEval,
            ProtocolArg::FineTune => Protocol::FineTune,
        };
    }
    if let Some(m) = args.metric {
        cfg.transfer.metric = match m {
            MetricArg::Accuracy => Metric::Accuracy,
            MetricArg::MacroAuc => Metric::MacroAuc,
        };
    }
    if let Some(e) = args.epochs {
        cfg.transfer.epochs = e;
    }
    match &args.report {
        Some(r) => cfg.paths.report = r.clone(),
        None if args.random_encoder => cfg.paths.report = "report_random.json".into(),
        None => {}
    }
    let report = if args.random_encoder {
        let ckpt = cfg.checkpoint_path();
        require(&ckpt, "checkpoint")?;
        let shape = Checkpoint::load(&ckpt)?.config;
        pipeline::transfer_random(&cfg, &shape)?
    } else {
        pipeline::transfer(&cfg)?
    };
    info!(
        "test metric {:.4} at base lr {} / wd {} (S_lr {:.4}, S_wd {:.4})",
        report.test_metric,
        report.chosen.base_lr,
        report.chosen.weight_decay,
        report.s_lr,
        report.s_wd
    );
    Ok(())
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => synth(&args),
        Command::ClusterFit(args) => {
            let mut cfg = args.stage.load()?;
            if let Some(k) = args.comment_k {
                cfg.comment_clusters.k = k;
            }
            if let Some(k) = args.reaction_k {
                cfg.reaction_clusters.k = k;
            }
            if let Some(f) = args.holdout_fraction {
                cfg.labeling.holdout_fraction = f;
            }
            let out = pipeline::cluster_fit(&cfg)?;
            info!(
                "fitted {} terms, {} comment and {} reaction clusters",
                out.vocab.len(),
                out.comment_model.k,
                out.reaction_model.k
            );
            Ok(())
        }
        Command::Label(args) => {
            let data = pipeline::label(&args.load()?)?;
            info!("labeled {} posts", data.records.len());
            Ok(())
        }
        Command::Pretrain(args) => {
            let mut cfg = args.stage.load()?;
            if let Some(n) = args.iterations {
                cfg.train.total_iterations = n;
            }
            if let Some(b) = args.batch_size {
                cfg.train.batch_size = b;
            }
            let out = pipeline::pretrain(&cfg)?;
            if let Some(last) = out.log.last() {
                info!(
                    "final loss {:.4} after {} iterations",
                    last.loss,
                    out.log.len()
                );
            }
            Ok(())
        }
        Command::Transfer(args) => transfer(&args),
        Command::Config => {
            print!("{}", toml::to_string_pretty(&PipelineConfig::default())?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
