use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use sslprof_core::evaluate::{EvalMode, Metric};
use sslprof_core::postprocess::{GridAlignment, MergeMode, SiteMode};
use sslprof_core::ChannelSet;

#[derive(Debug, Parser)]
#[command(name = "sslprof", version, about = "Self-supervised profiling of multi-site cell images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// JSON config; flags given on the command line override its fields.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,

    #[arg(long)]
    pub seed: Option<u64>,

    /// Validate configs and inputs, then exit without writing anything.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic plate/well/site dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train one channel model with self-distillation.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        #[arg(long)]
        channel_set: Option<ChannelSet>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Replace the adapted augmentations with random crops only.
        #[arg(long)]
        crop_only: bool,
        /// Drop the local-aggregation loss term.
        #[arg(long)]
        no_local_aggregation: bool,
    },
    /// Embed every site with a trained teacher.
    Embed {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file, or a training output directory (latest epoch is used).
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
    },
    /// Merge site embeddings into well representations.
    Aggregate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        embeddings: PathBuf,
        #[arg(long, value_parser = snake_enum::<SiteMode>)]
        site_mode: Option<SiteMode>,
        #[arg(long, value_parser = snake_enum::<MergeMode>)]
        merge_mode: Option<MergeMode>,
        #[arg(long, value_parser = snake_enum::<GridAlignment>)]
        grid_alignment: Option<GridAlignment>,
    },
    /// Shrink wells toward the cross-plate mean of their well position.
    Align {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        embeddings: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Concatenate fluorescent and brightfield well representations.
    Fuse {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        fluorescent: PathBuf,
        #[arg(long, value_name = "FILE")]
        brightfield: PathBuf,
    },
    /// kNN evaluation of well representations.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        embeddings: PathBuf,
        /// Manifest supplying perturbation and cell-line labels.
        #[arg(long, value_name = "FILE")]
        labels: PathBuf,
        /// Site-level table for the intra-well consistency diagnostic.
        #[arg(long, value_name = "FILE")]
        sites: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        metric: Option<Metric>,
        #[arg(long)]
        n_folds: Option<usize>,
        #[arg(long, value_parser = snake_enum::<EvalMode>)]
        mode: Option<EvalMode>,
    },
    /// Render training metrics and evaluation reports into plots and a summary.
    Report {
        #[command(flatten)]
        common: Common,
        /// `NAME=PATH` of a metrics.jsonl file; repeatable.
        #[arg(long = "metrics", value_name = "NAME=PATH", value_parser = named_path)]
        metrics: Vec<(String, PathBuf)>,
        /// `NAME=PATH` of an evaluation report; repeatable, rows keep this order.
        #[arg(long = "eval", value_name = "NAME=PATH", value_parser = named_path)]
        evals: Vec<(String, PathBuf)>,
    },
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::Synth { common }
            | Command::Train { common, .. }
            | Command::Embed { common, .. }
            | Command::Aggregate { common, .. }
            | Command::Align { common, .. }
            | Command::Fuse { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Report { common, .. } => common,
        }
    }
}

fn snake_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn named_path(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), path.into())),
        _ => Err(format!("expected NAME=PATH, got {s:?}")),
    }
}
