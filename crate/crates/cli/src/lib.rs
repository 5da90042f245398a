//! Command-line wiring for the traversability mapping pipeline.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid input.

mod commands;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use travmap::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "travmap", version, about = "Adaptive BEV cost and speed maps from driving experience")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit VLAD cluster centers from an embeddings file.
    FitClusters {
        /// Text file: one embedding per line, space-separated reals.
        #[arg(long)]
        embeddings: PathBuf,
        /// Cluster count.
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output cluster file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit roughness bandpower parameters from scored segments.
    FitRoughness {
        /// Line-delimited JSON segments (window + score).
        #[arg(long)]
        segments: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output parameters TOML.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a closed-loop episode in the synthetic world.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's lap count.
        #[arg(long)]
        laps: Option<usize>,
        /// Output directory (episode log, metrics, snapshots).
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run perception and learning over a recorded episode log.
    Replay {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rasterize cost layers per query speed and speed layers per roughness
    /// budget from an exported map snapshot.
    ExportMaps {
        /// Path to a snapshot's meta.json.
        #[arg(long)]
        snapshot: PathBuf,
        /// Query speeds, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        speed: Vec<f64>,
        /// Roughness budgets, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        rmax: Vec<f64>,
        /// CVaR level applied to both layers.
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::FitClusters { embeddings, k, seed, out } => {
            commands::fit_clusters(&embeddings, k, seed, &out)
        }
        Command::FitRoughness { segments, seed, out } => {
            commands::fit_roughness(&segments, seed, &out)
        }
        Command::Simulate { config, laps, out } => commands::simulate(&config, laps, &out),
        Command::Replay { log, config, out } => commands::replay(&log, &config, &out),
        Command::ExportMaps { snapshot, speed, rmax, alpha, out } => {
            commands::export_maps(&snapshot, &speed, &rmax, alpha, &out)
        }
    }
}

pub use commands::{export_maps, fit_clusters, fit_roughness, replay, simulate};
