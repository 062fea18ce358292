use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use xmodal::checkpoint::Checkpoint;
use xmodal::config::{AblationMode, ExperimentConfig};
use xmodal::dataset::{CrossModalDataset, Split};
use xmodal::eval::EvalTask;
use xmodal::io::{ingest, write_dataset, write_text, DatasetManifest, IngestOptions};
use xmodal::pipeline::{
    run_eval, stage2_needs_labels, sweep_margin, train_stage1, train_stage2, write_eval_outputs,
};
use xmodal::synthdata::{generate, SynthSpec};

#[derive(Parser)]
#[command(
    name = "xmodal",
    version,
    about = "Two-stage cross-modal correlation learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic paired dataset and its manifest.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = SynthPreset::Classes)]
        preset: SynthPreset,
        /// Leave the label file out of the written dataset.
        #[arg(long)]
        no_labels: bool,
    },
    /// Load a dataset and print what was found.
    IngestCheck {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train DBNs, CorrNets and fusion RBMs; write a stage-one checkpoint.
    TrainStage1 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the common-space mappings on top of a stage-one checkpoint.
    TrainStage2 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a stage-two checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "bi-modal")]
        task: EvalTask,
        /// Directory for metrics.txt and curve files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain stage two for each margin and report MAP.
    SweepAlpha {
        #[command(flatten)]
        common: Common,
        /// Stage-one checkpoint shared by every margin.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,1.5,2,2.5")]
        alphas: Vec<f64>,
        #[arg(long, default_value = "bi-modal")]
        task: EvalTask,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthPreset {
    /// Class-structured data for MAP experiments.
    Classes,
    /// Widely spread instances for label-free pair matching.
    Paired,
}

#[derive(Args)]
struct Common {
    /// Experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config ablation mode.
    #[arg(long)]
    mode: Option<AblationMode>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn dataset(&self, load_labels: bool) -> Result<CrossModalDataset> {
        let manifest = DatasetManifest::load(&self.manifest)?;
        Ok(ingest(&manifest, IngestOptions { load_labels })?)
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth {
            out,
            seed,
            preset,
            no_labels,
        } => {
            let spec = match preset {
                SynthPreset::Classes => SynthSpec::default(),
                SynthPreset::Paired => SynthSpec::paired(),
            };
            let mut data = generate(&SynthSpec { seed, ..spec })?;
            if no_labels {
                data.labels = None;
            }
            let manifest = write_dataset(&data, &out)?;
            println!("{}", manifest.display());
        }
        Command::IngestCheck { manifest } => {
            let m = DatasetManifest::load(&manifest)?;
            let data = ingest(&m, IngestOptions { load_labels: true })?;
            println!("name = {}", data.name);
            println!("instances = {}", data.len());
            println!("image_dim = {}", data.image.cols());
            println!("text_dim = {}", data.text.cols());
            for (split, key) in [
                (Split::Train, "train"),
                (Split::Val, "val"),
                (Split::Test, "test"),
            ] {
                println!("{key} = {}", data.indices(split).len());
            }
            println!("labels = {}", data.labels.is_some());
            let patches = |g: &Option<Vec<xmodal::fusion::PatchGroup>>| {
                g.as_ref()
                    .map_or(0, |g| g.iter().map(|p| p.features.rows()).sum::<usize>())
            };
            println!("image_patches = {}", patches(&data.image_patches));
            println!("text_patches = {}", patches(&data.text_patches));
        }
        Command::TrainStage1 { common, out } => {
            let cfg = common.config()?;
            let data = common.dataset(false)?;
            let outcome = train_stage1(&cfg, &data)?;
            for s in &outcome.summaries {
                println!("{s}");
            }
            outcome.checkpoint.save(&out)?;
            info!("wrote {}", out.display());
        }
        Command::TrainStage2 {
            common,
            checkpoint,
            out,
        } => {
            let cfg = common.config()?;
            let data = common.dataset(stage2_needs_labels(&cfg))?;
            let stage1 = load_checkpoint(&checkpoint)?;
            let outcome = train_stage2(&cfg, &data, &stage1)?;
            if let (Some(first), Some(last)) =
                (outcome.loss_history.first(), outcome.loss_history.last())
            {
                println!(
                    "multitask: {first:.6} -> {last:.6} over {} epochs",
                    outcome.loss_history.len()
                );
            }
            outcome.checkpoint.save(&out)?;
            info!("wrote {}", out.display());
        }
        Command::Eval {
            common,
            checkpoint,
            task,
            out,
        } => {
            let cfg = common.config()?;
            let data = common.dataset(true)?;
            let ck = load_checkpoint(&checkpoint)?;
            let report = run_eval(&cfg, &data, &ck, task)?;
            write_eval_outputs(&report, &out)?;
            print!("{}", report.to_text());
        }
        Command::SweepAlpha {
            common,
            checkpoint,
            alphas,
            task,
            out,
        } => {
            if alphas.is_empty() {
                bail!("no margins given");
            }
            let cfg = common.config()?;
            let data = common.dataset(true)?;
            let stage1 = load_checkpoint(&checkpoint)?;
            let mut text = String::new();
            for (alpha, report) in sweep_margin(&cfg, &data, &stage1, &alphas, task)? {
                text.push_str(&format!("alpha = {alpha}\n"));
                text.push_str(&report.to_text());
                write_eval_outputs(&report, &out.join(format!("alpha_{alpha}")))?;
            }
            write_text(&out.join("sweep.txt"), &text)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
