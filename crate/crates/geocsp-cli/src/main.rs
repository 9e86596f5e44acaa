//! Command-line interface for the geocsp pipeline: synthetic data
//! generation, pre-training, few-shot fine-tuning, evaluation, grid
//! embedding export, clustering, and the full experiment sweep.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use geocsp::dataset;
use geocsp::pipeline::{self, Checkpoint, RunReport, TrainConfig};

#[derive(Parser)]
#[command(
    name = "geocsp",
    about = "Contrastive spatial pre-training of location encoders over frozen image features",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines (# comments allowed).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory for checkpoints, reports, and exports.
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Per-key config override, e.g. --set pretrain.epochs=20 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let overrides: Vec<(String, String)> = self
            .set
            .iter()
            .map(|pair| {
                pair.split_once('=')
                    .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                    .with_context(|| format!("--set '{pair}' is not KEY=VALUE"))
            })
            .collect::<Result<_>>()?;
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path, &overrides)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => TrainConfig::from_overrides(None, &overrides)?,
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.validate()?;
        }
        Ok(cfg)
    }

    fn ensure_out(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.out)
            .with_context(|| format!("creating output directory {}", self.out.display()))?;
        Ok(&self.out)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/eval dataset files from the synth.* config.
    GenData(ConfigArgs),

    /// Pre-train the location encoder on the (unlabeled view of the)
    /// training data with the configured objective.
    Pretrain(ConfigArgs),

    /// Fine-tune on a stratified lambda% subset, starting from a checkpoint
    /// or (without one) from a random-init encoder.
    Finetune {
        #[command(flatten)]
        args: ConfigArgs,
        /// Pre-trained checkpoint; omit for the supervised-only baseline.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },

    /// Evaluate a fine-tuned checkpoint on the eval split.
    Eval {
        #[command(flatten)]
        args: ConfigArgs,
        /// Fine-tuned checkpoint to score.
        #[arg(long)]
        checkpoint: PathBuf,
    },

    /// Export eval-mode embeddings of a regular world grid.
    ExportGrid {
        #[command(flatten)]
        args: ConfigArgs,
        /// Checkpoint whose encoder embeds the grid.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Grid resolution in degrees (1 gives 360x180 rows).
        #[arg(long)]
        resolution: f64,
    },

    /// Ward-cluster an exported embedding table into k clusters.
    Cluster {
        #[command(flatten)]
        args: ConfigArgs,
        /// Embedding table written by export-grid.
        #[arg(long)]
        table: PathBuf,
        /// Number of clusters to cut the dendrogram at.
        #[arg(long)]
        k: usize,
    },

    /// Full protocol: gen-data, pretrain, stratified fine-tune at each
    /// lambda in lambda_list, evaluate; one report per cell.
    RunExperiment(ConfigArgs),
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(args) => {
            let cfg = args.resolve()?;
            let out = args.ensure_out()?;
            let (train, eval) = pipeline::generate_data(&cfg)?;
            let train_path = out.join("train.txt");
            let eval_path = out.join("eval.txt");
            dataset::save(&train_path, &train)?;
            dataset::save(&eval_path, &eval)?;
            println!(
                "wrote {} ({} examples) and {} ({} examples)",
                train_path.display(),
                train.len(),
                eval_path.display(),
                eval.len()
            );
        }
        Command::Pretrain(args) => {
            let cfg = args.resolve()?;
            let out = args.ensure_out()?;
            let (train, _) = pipeline::resolve_data(&cfg)?;
            let outcome = pipeline::pretrain(&cfg, &train)?;
            let ckpt_path = out.join("pretrained.ckpt");
            outcome.checkpoint.save(&ckpt_path)?;
            let mut report = RunReport::new(cfg.variant_label(), cfg.seed, cfg.config_hash());
            report.pretrain_epoch_losses = outcome.epoch_losses.clone();
            report.save(&out.join("pretrain_report.txt"))?;
            println!(
                "pre-trained {} for {} epochs: loss {} -> {}",
                cfg.variant_label(),
                outcome.epoch_losses.len(),
                outcome.epoch_losses.first().unwrap_or(&f64::NAN),
                outcome.epoch_losses.last().unwrap_or(&f64::NAN)
            );
            println!("wrote {}", ckpt_path.display());
        }
        Command::Finetune { args, checkpoint } => {
            let cfg = args.resolve()?;
            let out = args.ensure_out()?;
            let (train, _) = pipeline::resolve_data(&cfg)?;
            let loaded = checkpoint
                .map(|p| Checkpoint::load(&p))
                .transpose()
                .context("loading pre-trained checkpoint")?;
            let subset = pipeline::stratified_for_cell(&cfg, &train, cfg.lambda, 0)?;
            let outcome = pipeline::finetune(&cfg, loaded.as_ref(), &subset)?;
            let ckpt_path = out.join(format!("finetuned_lambda{}.ckpt", cfg.lambda));
            outcome.checkpoint.save(&ckpt_path)?;
            println!(
                "fine-tuned on {} examples (lambda {}%): presence-absence loss {} -> {}",
                subset.len(),
                cfg.lambda,
                outcome.finetune_epoch_losses.first().unwrap_or(&f64::NAN),
                outcome.finetune_epoch_losses.last().unwrap_or(&f64::NAN)
            );
            println!("wrote {}", ckpt_path.display());
        }
        Command::Eval { args, checkpoint } => {
            let cfg = args.resolve()?;
            let out = args.ensure_out()?;
            let (_, eval) = pipeline::resolve_data(&cfg)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let acc = pipeline::evaluate(&ckpt, &eval)?;
            let mut report = RunReport::new(cfg.variant_label(), cfg.seed, cfg.config_hash());
            report.lambda = Some(cfg.lambda);
            report.accuracy = Some(acc);
            report.save(&out.join("eval_report.txt"))?;
            println!(
                "top-1 on {} examples: image-only {:.4}, location-only {:.4}, combined {:.4}",
                eval.len(),
                acc.image_only,
                acc.location_only,
                acc.combined
            );
        }
        Command::ExportGrid {
            args,
            checkpoint,
            resolution,
        } => {
            let out = args.ensure_out()?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let path = out.join("grid_embeddings.txt");
            let rows = pipeline::export_grid_embeddings(&ckpt, resolution, &path)?;
            println!("wrote {rows} grid embeddings to {}", path.display());
        }
        Command::Cluster { args, table, k } => {
            let out = args.ensure_out()?;
            let path = out.join("clusters.txt");
            let rows = pipeline::cluster_embeddings(&table, k, &path)?;
            println!("wrote {rows} cluster assignments to {}", path.display());
        }
        Command::RunExperiment(args) => {
            let cfg = args.resolve()?;
            let out = args.ensure_out()?;
            let reports = pipeline::run_experiment(&cfg, Some(out))?;
            for report in &reports {
                let acc = report.accuracy.expect("experiment cells are evaluated");
                println!(
                    "{} seed {} lambda {:>5}: image-only {:.4}, location-only {:.4}, combined {:.4}",
                    report.variant,
                    report.seed,
                    report.lambda.unwrap_or(f64::NAN),
                    acc.image_only,
                    acc.location_only,
                    acc.combined
                );
            }
            println!("wrote {} report(s) under {}", reports.len(), out.display());
        }
    }
    Ok(())
}
