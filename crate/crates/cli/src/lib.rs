//! `video-r4`: one entry point for matching, synthesis, validation, review,
//! training and evaluation.
//!
//! Settings come from a TOML file, then `VIDEOR4_*` environment variables,
//! then command-line flags; later sources win.

pub mod captioner;
pub mod commands;
pub mod error;
pub mod server;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use videor4_core::config::PipelineConfig;

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "video-r4",
    version,
    about = "Evidence matching, rumination trajectories, curriculum training and QC review"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Corpus root directory.
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic planted-text corpus to the corpus path.
    GenerateCorpus(commands::GenerateArgs),
    /// Match every question against the corpus annotations.
    Match,
    /// Render, fill and validate trajectories from the evidence file.
    Synthesize(commands::SynthesizeArgs),
    /// Re-validate a trajectories file and quarantine failures.
    Validate(commands::ValidateArgs),
    /// Run the staged curriculum on the toy policy.
    Train(commands::TrainArgs),
    /// Score predictions (or a trained checkpoint) with ANLS, EM and F1.
    Eval(commands::EvalArgs),
    /// Serve the review API.
    QcServe(commands::QcArgs),
    /// Replay the decision log and write the curated export.
    QcExport(commands::QcExportArgs),
    /// Summarize the reports found in the output directory.
    Report,
}

/// Resolves the configuration: file, then environment, then flags.
pub fn resolve_config<I>(global: &GlobalArgs, env: I) -> Result<PipelineConfig, CliError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut cfg = match &global.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    cfg.apply_env(env)?;
    if let Some(seed) = global.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &global.out {
        cfg.paths.out = out.clone();
    }
    if let Some(corpus) = &global.corpus {
        cfg.paths.corpus = corpus.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli.global, std::env::vars())?;
    match cli.command {
        Command::GenerateCorpus(a) => commands::generate_corpus(&cfg, &a),
        Command::Match => commands::cmd_match(&cfg),
        Command::Synthesize(a) => commands::synthesize(&cfg, &a),
        Command::Validate(a) => commands::validate(&cfg, &a),
        Command::Train(a) => commands::train(&cfg, &a),
        Command::Eval(a) => commands::eval(&cfg, &a),
        Command::QcServe(a) => commands::qc_serve(&cfg, &a),
        Command::QcExport(a) => commands::qc_export(&cfg, &a),
        Command::Report => commands::report(&cfg),
    }
}
