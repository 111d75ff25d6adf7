//! The `promptdet` command line: config loading, one subcommand per
//! pipeline stage, and versioned output files.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

pub use config::{apply_override, load_config, PathsConfig, RunConfig};

use crate::error::Error;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Debug, Parser)]
#[command(name = "promptdet", version, about = "Multi-prompt open-vocabulary detection on a synthetic shape world")]
pub struct Cli {
    /// TOML config file; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set training.total_steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Worker threads; defaults to the available parallelism. Results do
    /// not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for crate::dataset::Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => crate::dataset::Split::Train,
            SplitArg::Val => crate::dataset::Split::Val,
            SplitArg::Test => crate::dataset::Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    All,
    TextG,
    VisualG,
    VisualI,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VisualSourceArg {
    InImage,
    OutImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    Forward,
    Backward,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a shape-world dataset.
    Synth {
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Train the prompt encoders.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Continue from a bundle checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also write a checkpoint every N steps.
        #[arg(long, default_value_t = 0)]
        save_every: u64,
        #[arg(long, value_enum, default_value_t = VisualSourceArg::OutImage)]
        visual_source: VisualSourceArg,
        /// Validate the config and inputs without writing anything.
        #[arg(long)]
        dry_run: bool,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Evaluate a checkpoint under the prompting protocols, or score a
    /// detection file.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        /// Score this detection file instead of running a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        detections: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ProtocolArg::All)]
        protocol: ProtocolArg,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Run the instance-detection post-processing cascade and report the
    /// per-stage AP ladder.
    Insdet {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Few-shot adaptation: train the factor grid, select per domain,
    /// search thresholds and predict on test.
    Fsod {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Pick an informative, diverse subset of scenes.
    Curate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Add caption-first and region-first auto-labels to a dataset.
    Autolabel {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum, default_value_t = DirectionArg::Both)]
        direction: DirectionArg,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Detect categories by name and write a detection file.
    Detect {
        #[command(flatten)]
        model: ModelArgs,
        /// Category names to prompt; all categories when omitted.
        #[arg(long = "prompt")]
        prompts: Vec<String>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Run test-time augmentation with the fsod.tta settings.
        #[arg(long)]
        tta: bool,
        #[command(flatten)]
        out: OutArgs,
    },
}

/// 1 for usage and configuration problems, 2 for runtime failures.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

pub fn run() -> ExitCode {
    run_from(std::env::args_os())
}

pub fn run_from<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.workers {
        Some(0) => Err(Error::Config("--workers must be positive".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))
            .and_then(|pool| pool.install(|| commands::execute(&cli))),
        None => commands::execute(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = exit_code(&e);
            if code == 1 {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            ExitCode::from(code)
        }
    }
}
