use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mmot::sampling::GuidanceMode;
use mmot::training::SchedulerMode;

mod commands;

#[derive(Parser)]
#[command(name = "mmot", version, about = "Composed multimodal conditional token synthesis on toy scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Balanced,
    Uniform,
}

impl From<ModeArg> for SchedulerMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Balanced => SchedulerMode::Balanced,
            ModeArg::Uniform => SchedulerMode::Uniform,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GuidanceArg {
    Fixed,
    Jsd,
}

impl From<GuidanceArg> for GuidanceMode {
    fn from(g: GuidanceArg) -> Self {
        match g {
            GuidanceArg::Fixed => GuidanceMode::Fixed,
            GuidanceArg::Jsd => GuidanceMode::Jsd,
        }
    }
}

/// Overrides on top of the checkpoint's guidance section.
#[derive(Args, Clone, Default)]
struct GuidanceFlags {
    #[arg(long, value_enum)]
    guidance: Option<GuidanceArg>,
    /// Per-modality scale for fixed guidance, e.g. `--lambda text=1.5`.
    #[arg(long = "lambda", value_name = "M=V")]
    lambda: Vec<String>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long = "temp")]
    temperature: Option<f64>,
    #[arg(long = "topk")]
    top_k: Option<usize>,
    #[arg(long)]
    greedy: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Concatenation fusion instead of the token mixer.
        #[arg(long)]
        no_mixer: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint of the same run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Log every this many steps; 0 is silent.
        #[arg(long, default_value_t = 100)]
        log_every: u64,
    },
    /// Draw images for each condition set of a JSONL file.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        conditions: PathBuf,
        #[command(flatten)]
        guidance: GuidanceFlags,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a JSONL test set.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        testset: PathBuf,
        /// Sampled images for accuracy and Fréchet distance; defaults to the config.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        guidance: GuidanceFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump combination-weight, attention and divergence maps for one example.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        example: PathBuf,
        /// Line of the example file to use.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the base, +mixer, +balanced and +guidance rows.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        log_every: u64,
    },
    /// Write a JSONL dataset of examples for `eval`, `inspect` or `sample`.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Write only the condition sets.
        #[arg(long)]
        conditions_only: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
