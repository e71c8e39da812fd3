use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use deeptile::explorer::Method;
use deeptile::modelgen::Template;

#[derive(Debug, Parser)]
#[command(
    name = "deeptile",
    version,
    about = "Reduce the peak working memory of DNN inference graphs by tiling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tile a model to lower its peak memory and write the result.
    Optimize(OptimizeArgs),
    /// Write a synthetic model.
    Gen(GenArgs),
    /// Compare two models on the same inputs.
    Check(CheckArgs),
    /// Report peak memory, schedule and layout of a model as is.
    Report(ReportArgs),
}

/// Solver settings shared by `optimize` and `report`.
#[derive(Debug, Args)]
pub struct SolverArgs {
    /// Time limit for each exact scheduling or layout search, in seconds.
    #[arg(long, default_value_t = 30, value_parser = clap::value_parser!(u64).range(1..))]
    pub exact_timeout_secs: u64,
    /// Round every buffer up to a multiple of four bytes.
    #[arg(long)]
    pub align4: bool,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// Model in `.dnn.json` format.
    pub input: PathBuf,
    /// Where to write the tiled model; defaults to `<input>.tiled.dnn.json`.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value = "both")]
    pub method: Method,
    /// Largest partition count, and largest tile count for feature-map tiling.
    #[arg(long, default_value_t = 25, value_parser = clap::value_parser!(u64).range(2..=1024))]
    pub max_partitions: u64,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Execute the original and tiled models on random inputs afterwards.
    #[arg(long)]
    pub verify: bool,
    /// Random inputs used by `--verify`.
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the report here instead of standard output.
    #[arg(long)]
    pub json_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// One of kws, txt, dense-pair, cnn, depthwise, random-sp.
    pub template: Template,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Width multiplier.
    #[arg(long, default_value_t = 1)]
    pub scale: usize,
    /// Quantized variant; txt and dense-pair only.
    #[arg(long)]
    pub int8: bool,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Model under test.
    pub model: PathBuf,
    /// Reference model.
    #[arg(long)]
    pub against: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: u64,
    /// Use this tensor file for a model input (`name=path`), in place of
    /// random values. When given, one sample is run.
    #[arg(long = "input", value_parser = parse_binding)]
    pub inputs: Vec<(String, PathBuf)>,
    /// Write the last sample's outputs of the model under test here, one
    /// `<name>.bin` tensor file per output.
    #[arg(long)]
    pub outputs_dir: Option<PathBuf>,
    #[arg(long)]
    pub json_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub input: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub json_out: Option<PathBuf>,
}

fn parse_binding(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_owned(), PathBuf::from(path)))
        }
        _ => Err(format!("expected NAME=PATH, got `{s}`")),
    }
}
