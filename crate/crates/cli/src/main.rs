//! `protoseg`: preprocess, train, infer, adapt and evaluate from one config.

mod commands;
mod workspace;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use protoseg_core::evaluation::Variant;

#[derive(Parser, Debug)]
#[command(name = "protoseg", version, about = "Few-shot prototype segmentation of volumetric scans")]
struct Cli {
    /// TOML run configuration; the synthetic preset when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Restrict to one organ group.
    #[arg(long, global = true)]
    fold: Option<String>,
    /// Restrict to one evaluation variant.
    #[arg(long, global = true, value_enum)]
    variant: Option<VariantArg>,
    /// Output directory shared by all stages.
    #[arg(long, global = true, default_value = "protoseg-run")]
    out: PathBuf,
    /// Overwrite outputs produced under a different config.
    #[arg(long, global = true)]
    force: bool,
    /// Training episodes, overriding the config.
    #[arg(long, global = true)]
    episodes: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Build the slice and superpixel caches.
    Preprocess,
    /// Self-supervised episodic training, one model per organ group.
    Train,
    /// Segment every test scan and store the predictions.
    Infer,
    /// Test-time training on stored predictions, then re-segment.
    Ttt,
    /// Score stored predictions and write the metric tables.
    Eval,
    /// Generate the synthetic dataset.
    Synth,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
#[value(rename_all = "snake_case")]
enum VariantArg {
    Base,
    Cca,
    Ttt,
    SliceAdapter,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Base => Variant::Base,
            VariantArg::Cca => Variant::Cca,
            VariantArg::Ttt => Variant::Ttt,
            VariantArg::SliceAdapter => Variant::SliceAdapter,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let opts = commands::Options {
        config: cli.config,
        seed: cli.seed,
        fold: cli.fold,
        variant: cli.variant.map(Variant::from),
        out: cli.out,
        force: cli.force,
        episodes: cli.episodes,
    };
    let result = match cli.command {
        Command::Preprocess => commands::preprocess(&opts),
        Command::Train => commands::train(&opts),
        Command::Infer => commands::infer(&opts),
        Command::Ttt => commands::ttt(&opts),
        Command::Eval => commands::eval(&opts),
        Command::Synth => commands::synth(&opts),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
