//! Command-line pipeline: ground-truth correction, patch preparation,
//! training, prediction and evaluation, all driven by one config file.

pub mod commands;
pub mod config;
pub mod layout;
pub mod scene;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{Overrides, PipelineConfig};

pub const EXIT_OK: u8 = 0;
pub const EXIT_INVALID: u8 = 1;
pub const EXIT_PARTIAL: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "cloudfcn", version, about = "Cloud masking pipeline for 4-band satellite scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Pipeline config file (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Replaces the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replaces the prediction threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Remove snow and ice from the QA cloud masks.
    CorrectGt(Common),
    /// Cut scenes and ground truths into training patches.
    Prepare(Common),
    /// Train the network on the prepared patches.
    Train(Common),
    /// Predict cloud probability maps and masks for every scene.
    Predict(Common),
    /// Compare predicted masks with reference masks.
    Evaluate(Common),
}

/// Scenes that failed in a batch command, with the reason.
#[derive(Debug, Default)]
pub struct Summary {
    pub failed: Vec<(String, String)>,
}

impl Summary {
    pub fn fail(&mut self, scene: &str, err: &anyhow::Error) {
        eprintln!("scene {scene}: {err:#}");
        self.failed.push((scene.to_owned(), format!("{err:#}")));
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> u8 {
    let (common, cmd): (&Common, fn(&PipelineConfig) -> anyhow::Result<Summary>) = match &cli.command {
        Command::CorrectGt(c) => (c, commands::correct_gt::run),
        Command::Prepare(c) => (c, commands::prepare::run),
        Command::Train(c) => (c, commands::train::run),
        Command::Predict(c) => (c, commands::predict::run),
        Command::Evaluate(c) => (c, commands::evaluate::run),
    };
    let overrides = Overrides { seed: common.seed, threshold: common.threshold };
    let result = PipelineConfig::load(&common.config, overrides).and_then(|cfg| cmd(&cfg));
    match result {
        Ok(s) if s.failed.is_empty() => EXIT_OK,
        Ok(s) => {
            eprintln!("{} scene(s) failed", s.failed.len());
            EXIT_PARTIAL
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_INVALID
        }
    }
}
