//! `lens` — train and evaluate the toy reasoning-segmentation stack.
//!
//! Stages must run in order: `bootstrap` → `align` → `rl`. `eval` works on
//! any stage's checkpoint; `ablate` runs the comparison harnesses from a
//! bootstrap checkpoint; `export-data` materializes the synthetic dataset;
//! `score` grades a prediction file offline.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use lens_core::pipeline::{
    cmd_ablate, cmd_align, cmd_bootstrap, cmd_eval, cmd_rl, resolve_split, score_predictions,
    RunConfig,
};
use lens_core::policy::Vocab;
use lens_core::synthworld::export_dataset;

#[derive(Parser)]
#[command(name = "lens", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults to the built-in toy config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Load the reference-scale hyperparameter table instead of the toy
    /// defaults (visible in Tables of the training recipe).
    #[arg(long)]
    paper_scale: bool,
    /// Accept a checkpoint whose stored config hash does not match.
    #[arg(long)]
    override_config_hash: bool,
}

impl Common {
    fn config(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = if self.paper_scale {
            RunConfig::paper_scale()
        } else if let Some(path) = &self.config {
            RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?
        } else {
            RunConfig::default()
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Stage 0: supervised bootstrap of the policy and mask head.
    Bootstrap {
        #[command(flatten)]
        common: Common,
    },
    /// Stage 1: train the context module (queries + connector) only.
    Align {
        #[command(flatten)]
        common: Common,
        /// Bootstrap checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Stage 2: GRPO with unified rewards and the joint segmentation loss.
    Rl {
        #[command(flatten)]
        common: Common,
        /// Align checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Greedy evaluation of a checkpoint on a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// `train`, `heldout`, or a dataset JSONL path.
        #[arg(long, default_value = "heldout")]
        split: String,
    },
    /// Ablation harnesses from a bootstrap checkpoint.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// One of: queries, connector, rewards.
        #[arg(long)]
        experiment: String,
    },
    /// Write the train/heldout dataset files and the vocabulary.
    ExportData {
        #[command(flatten)]
        common: Common,
    },
    /// Score a prediction JSONL offline against a dataset split.
    Score {
        #[command(flatten)]
        common: Common,
        /// `train`, `heldout`, or a dataset JSONL path.
        #[arg(long)]
        split: String,
        /// Prediction file ({"id", "pred_box", "pred_mask_rle"} per line).
        #[arg(long)]
        pred: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::Bootstrap { common } => {
            let cfg = common.config()?;
            let art = cmd_bootstrap(&cfg, &common.out)?;
            println!("bootstrap checkpoint: {}", art.checkpoint.display());
            println!("metrics: {}", art.metrics.display());
        }
        Cmd::Align { common, ckpt } => {
            let cfg = common.config()?;
            let art = cmd_align(&cfg, &ckpt, &common.out, common.override_config_hash)?;
            println!("align checkpoint: {}", art.checkpoint.display());
            println!("metrics: {}", art.metrics.display());
        }
        Cmd::Rl { common, ckpt } => {
            let cfg = common.config()?;
            let art = cmd_rl(&cfg, &ckpt, &common.out, common.override_config_hash)?;
            println!("rl checkpoint: {}", art.checkpoint.display());
            println!("metrics: {}", art.metrics.display());
        }
        Cmd::Eval {
            common,
            ckpt,
            split,
        } => {
            let cfg = common.config()?;
            let (report, path) =
                cmd_eval(&cfg, &ckpt, &split, &common.out, common.override_config_hash)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            eprintln!("report written to {}", path.display());
        }
        Cmd::Ablate {
            common,
            ckpt,
            experiment,
        } => {
            let cfg = common.config()?;
            let (csv, rows) = cmd_ablate(&cfg, &experiment, &ckpt, &common.out)?;
            print!("{}", lens_core::pipeline::rows_to_csv(&rows));
            eprintln!("csv written to {}", csv.display());
        }
        Cmd::ExportData { common } => {
            let cfg = common.config()?;
            std::fs::create_dir_all(&common.out)?;
            let train = lens_core::pipeline::train_split(&cfg)?;
            let heldout = lens_core::pipeline::heldout_split(&cfg)?;
            let train_path = common.out.join("train.jsonl");
            let heldout_path = common.out.join("heldout.jsonl");
            export_dataset(&train, &train_path)?;
            export_dataset(&heldout, &heldout_path)?;
            Vocab::new().save(&common.out.join("vocab.json"))?;
            println!(
                "wrote {} train and {} heldout samples under {}",
                train.len(),
                heldout.len(),
                common.out.display()
            );
        }
        Cmd::Score {
            common,
            split,
            pred,
        } => {
            let cfg = common.config()?;
            let samples = resolve_split(&cfg, &split)?;
            if samples.is_empty() {
                bail!("empty split {split:?}");
            }
            let report = score_predictions(&samples, &pred)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}
