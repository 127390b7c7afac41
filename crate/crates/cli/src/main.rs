//! `patchframe`: synthetic data, toy detector training, patch attacks,
//! white-frame defenses and evaluation from one binary.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ConfigError, RunConfig};

/// Environment variable that sizes the worker pool.
const THREADS_ENV: &str = "PATCHFRAME_THREADS";

#[derive(Debug, Parser)]
#[command(name = "patchframe", version, about = "Adversarial patches and white-frame defenses for person detectors")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Detector weights artifact.
    #[arg(long, global = true)]
    detector: Option<PathBuf>,
    /// Dataset directory (`<id>.png` images plus `annotations.txt`).
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic person dataset.
    Synth {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train the toy detector on a dataset.
    TrainToy,
    /// Optimize a shared adversarial patch.
    Attack {
        /// adv-patch, adv-tshirt or adv-cloak.
        #[arg(long)]
        variant: Option<String>,
        /// Frozen frame applied during optimization (adaptive attack).
        #[arg(long)]
        frame: Option<PathBuf>,
    },
    /// Optimize a white frame.
    Defend {
        /// swf (one image) or uwf (universal).
        #[arg(long)]
        mode: Option<String>,
        /// Image id for swf.
        #[arg(long)]
        image: Option<String>,
    },
    /// Score attack/defense conditions on a test set.
    Eval {
        #[arg(long)]
        patch: Option<PathBuf>,
        #[arg(long)]
        frame: Option<PathBuf>,
        /// Comma-separated `attack+defense` pairs.
        #[arg(long)]
        conditions: Option<String>,
        /// Also run the adaptive attack against the frame.
        #[arg(long)]
        adaptive: bool,
        /// Also run the per-image attack protocol.
        #[arg(long)]
        per_image: bool,
        /// Comma-separated nominal thicknesses to sweep.
        #[arg(long)]
        sweep: Option<String>,
        /// Objectness maps for this many test images.
        #[arg(long)]
        maps: Option<usize>,
        /// Training set for the adaptive attack and the sweep.
        #[arg(long)]
        train_dataset: Option<PathBuf>,
    },
    /// Print the results of an eval run.
    Report {
        /// Eval output directory; defaults to --out.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<patchframe_core::Error> for CliError {
    fn from(e: patchframe_core::Error) -> Self {
        match e {
            patchframe_core::Error::MissingArtifact(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.into()),
        }
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn opt_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

/// Defaults, then the config file, then `--set`, then explicit flags.
fn resolve(common: &Common, command: &Command) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.merge_file(path)?;
    }
    for kv in &common.set {
        cfg.merge_assignment(kv)?;
    }
    let mut flags: Vec<(&str, Option<String>)> = vec![
        ("seed", common.seed.map(|s| s.to_string())),
        ("out", opt_str(&common.out)),
        ("detector", opt_str(&common.detector)),
        ("dataset", opt_str(&common.dataset)),
    ];
    match command {
        Command::Synth { n } => flags.push(("synth.n", n.map(|n| n.to_string()))),
        Command::TrainToy | Command::Report { .. } => {}
        Command::Attack { variant, frame } => {
            flags.push(("attack.variant", variant.clone()));
            flags.push(("frame", opt_str(frame)));
        }
        Command::Defend { mode, image } => {
            flags.push(("defense.mode", mode.clone()));
            flags.push(("image", image.clone()));
        }
        Command::Eval {
            patch,
            frame,
            conditions,
            adaptive,
            per_image,
            sweep,
            maps,
            train_dataset,
        } => {
            flags.push(("patch", opt_str(patch)));
            flags.push(("frame", opt_str(frame)));
            flags.push(("eval.conditions", conditions.clone()));
            flags.push(("eval.adaptive", adaptive.then(|| "true".to_string())));
            flags.push(("eval.per_image", per_image.then(|| "true".to_string())));
            flags.push(("eval.thicknesses", sweep.clone()));
            flags.push(("eval.maps", maps.map(|m| m.to_string())));
            flags.push(("train_dataset", opt_str(train_dataset)));
        }
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.into()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let cfg = resolve(&cli.common, &cli.command)?;
    match cli.command {
        Command::Synth { .. } => commands::synth(&cfg),
        Command::TrainToy => commands::train_toy(&cfg),
        Command::Attack { .. } => commands::attack(&cfg),
        Command::Defend { .. } => commands::defend(&cfg),
        Command::Eval { .. } => commands::eval(&cfg),
        Command::Report { input } => commands::report(&cfg, input),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
