//! Command-line driver: prepare corpora, build training pairs, train model
//! variants, run the property suite and merge reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod fsutil;
pub mod svg;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use v2t_core::augment::PairMode;

use config::{parse_list, ExperimentConfig, Overrides};
use error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "v2t", version, about = "Vector-to-text autoencoder lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    pub log: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the corpus split, vocabulary and topic file.
    Prepare(Common),
    /// Write training pair files for the configured modes.
    Augment(Common),
    /// Train (or resume) one model on one pair file.
    Train(Common),
    /// Run the property suite on a trained model.
    Eval(Common),
    /// Merge eval runs into one long-format CSV.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<PairMode>,
    #[arg(long)]
    pub dropout_p: Option<f64>,
    #[arg(long)]
    pub bottleneck: Option<usize>,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Comma-separated, e.g. `0.5,1,2`.
    #[arg(long, value_parser = parse_list_arg)]
    pub alphas: Option<Vec<f64>>,
    #[arg(long, value_parser = parse_list_arg)]
    pub etas: Option<Vec<f64>>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub plots: bool,
    #[arg(long)]
    pub mt_endpoint: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Model directory name; defaults to `<mode>-b<bottleneck>`.
    #[arg(long)]
    pub tag: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// `eval/<tag>` directories.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
    #[arg(long)]
    pub plots: bool,
}

fn parse_mode(s: &str) -> Result<PairMode, String> {
    s.parse().map_err(|e: v2t_core::Error| e.to_string())
}

fn parse_list_arg(s: &str) -> Result<Vec<f64>, String> {
    parse_list(s)
}

impl Common {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            mode: self.mode,
            dropout_p: self.dropout_p,
            bottleneck: self.bottleneck,
            steps: self.steps,
            alphas: self.alphas.clone(),
            etas: self.etas.clone(),
            samples: self.samples,
            plots: self.plots,
            mt_endpoint: self.mt_endpoint.clone(),
            tag: self.tag.clone(),
        }
    }

    pub fn resolve(&self) -> CliResult<ExperimentConfig> {
        ExperimentConfig::resolve(self.config.as_deref(), &self.overrides())
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Prepare(c) => commands::prepare::run(&c.resolve()?),
        Command::Augment(c) => commands::augment::run(&c.resolve()?),
        Command::Train(c) => commands::train::run(&c.resolve()?),
        Command::Eval(c) => commands::eval::run(&c.resolve()?),
        Command::Report(r) => commands::report::run(&r.runs, &r.out, r.plots),
    }
}
