//! `cyclingnet`: flow extraction, fusion preview, training, evaluation,
//! prediction, model summary and self-test.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 data
//! error, 4 failed check.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cyclingnet::pipeline::Split;
use cyclingnet::selftest::SelftestOptions;
use log::LevelFilter;

use config::{FlagOverrides, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("check failed: {0}")]
    Check(String),

    #[error(transparent)]
    Core(#[from] cyclingnet::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use cyclingnet::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::InvalidArgument(_)) => 2,
            CliError::Data(_)
            | CliError::Core(
                E::ShapeMismatch(_)
                | E::Manifest { .. }
                | E::FlowCache(_)
                | E::Dataset(_)
                | E::WeightFormat(_)
                | E::Image { .. }
                | E::Io(_)
                | E::Csv(_),
            ) => 3,
            CliError::Check(_) => 4,
            CliError::Core(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cyclingnet", version, about = "Near-miss detection for cycling video")]
struct Cli {
    /// TOML config file with dotted keys (flow.*, model.*, train.*, data.*, paths.*).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set train.max_epochs=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,

    /// Seed for weight init, shuffling, dropout and augmentation.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; 1 makes every command fully deterministic.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Decision threshold on the predicted probability.
    #[arg(long, global = true)]
    threshold: Option<f64>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute and cache optical flow for every clip in the manifest.
    Flow {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Also write each flow field as a color image.
        #[arg(long)]
        emit_color: bool,
    },
    /// Write fused network inputs as images.
    Fuse {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Only this clip.
        #[arg(long)]
        clip: Option<String>,
        /// At most this many frames per clip.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train on the manifest's train split with early stopping on validation.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Evaluate saved weights on a split.
    Eval {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Also report metrics at thresholds 0.05, 0.10, ..., 0.95.
        #[arg(long)]
        sweep: bool,
    },
    /// Per-frame predictions for a directory of frames.
    Predict {
        clip_dir: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Print the layer table and parameter totals.
    Summary {
        /// Compare against the reference layer table; exit 4 on mismatch.
        #[arg(long)]
        golden: bool,
    },
    /// Run gradient checks, the layer-table check, flow oracles and
    /// fusion/metric identities.
    Selftest {
        /// Random seeds per gradient check.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Corrupt the analytic gradient of the named check.
        #[arg(long, hide = true)]
        perturb: Option<String>,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse()
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Flow { .. } => "flow",
            Command::Fuse { .. } => "fuse",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Predict { .. } => "predict",
            Command::Summary { .. } => "summary",
            Command::Selftest { .. } => "selftest",
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let mut flags = FlagOverrides { seed: cli.seed, threshold: cli.threshold, ..Default::default() };
    match &cli.command {
        Command::Flow { manifest, .. } | Command::Fuse { manifest, .. } | Command::Train { manifest } => {
            flags.manifest = manifest.clone();
        }
        Command::Eval { manifest, weights, .. } => {
            flags.manifest = manifest.clone();
            flags.weights = weights.clone();
        }
        Command::Predict { weights, .. } => flags.weights = weights.clone(),
        Command::Summary { .. } | Command::Selftest { .. } => {}
    }
    let config = RunConfig::resolve(cli.config.as_deref(), &cli.sets, &flags)?;
    let echo = config.echo(cli.command.name())?;
    log::info!("resolved config written to {}", echo.display());
    match cli.command {
        Command::Flow { emit_color, .. } => commands::flow(&config, emit_color),
        Command::Fuse { clip, limit, .. } => commands::fuse(&config, clip.as_deref(), limit),
        Command::Train { .. } => commands::train_cmd(&config),
        Command::Eval { split, sweep, .. } => commands::eval(&config, split, sweep),
        Command::Predict { clip_dir, .. } => commands::predict(&config, &clip_dir),
        Command::Summary { golden } => commands::summary(&config, golden),
        Command::Selftest { seeds, perturb } => commands::selftest(&SelftestOptions { seeds, perturb }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => LevelFilter::Warn,
        1 => LevelFilter::Info,
        _ => LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
