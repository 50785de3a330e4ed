//! `stmu`: train, evaluate, ablate and inspect the segmentation model.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stm_unet::config::RunConfig;
use stm_unet::Error;

#[derive(Debug, Parser)]
#[command(name = "stmu", version, about = "Segmentation model with Swin skips and a shift-MLP bottleneck")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write `best.stmu` plus `train.log`.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory.
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train the three skip/bottleneck variants on one split and compare.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Also write each variant's best checkpoint here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Report the parameter count of a configuration.
    Params {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write synthetic image/mask pairs as PPM/PGM.
    Synth {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "data/synth")]
        out: PathBuf,
    },
}

/// Configuration layering: defaults (or `--desk`), then `--config`, then
/// `--set`, then the dedicated flags.
#[derive(Debug, Clone, Args)]
struct RunArgs {
    /// File of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set model.window=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Start from the small preset instead of the full recipe.
    #[arg(long)]
    desk: bool,
    /// `synth` or a folder with `images/` and `masks/`.
    #[arg(long)]
    data: Option<String>,
    /// Number of generated samples when `--data synth`.
    #[arg(long)]
    synth_count: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Square input side.
    #[arg(long)]
    size: Option<usize>,
    /// Five comma-separated stage widths.
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    shift_size: Option<usize>,
    /// Seeds model init, shuffling, splitting and synthetic data.
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = if self.desk { RunConfig::desk() } else { RunConfig::default() };
        if let Some(path) = &self.config {
            cfg.apply_file(path).map_err(usage)?;
        }
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{pair}`")))?;
            cfg.set(k, v).map_err(usage)?;
        }
        let flags: [(&str, Option<String>); 10] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("data.source", self.data.clone()),
            ("data.synth_count", self.synth_count.map(|v| v.to_string())),
            ("train.epochs", self.epochs.map(|v| v.to_string())),
            ("train.lr", self.lr.map(|v| v.to_string())),
            ("train.batch_size", self.batch.map(|v| v.to_string())),
            ("model.input_size", self.size.map(|v| v.to_string())),
            ("model.channels", self.channels.clone()),
            ("model.window", self.window.map(|v| v.to_string())),
            ("model.shift_size", self.shift_size.map(|v| v.to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v).map_err(usage)?;
            }
        }
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Tsv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Subset {
    All,
    Train,
    Val,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// `synth` or a folder with `images/` and `masks/`.
    #[arg(long, default_value = "synth")]
    data: String,
    #[arg(long, default_value_t = 200)]
    synth_count: usize,
    /// Seed of the synthetic data and the split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Which side of the 8:2 split to score.
    #[arg(long, value_enum, default_value = "all")]
    subset: Subset,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Debug)]
enum CliError {
    /// Bad flags or configuration; nothing was written.
    Usage(String),
    Runtime(Error),
    /// Training diverged or a numerical check failed.
    Check(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Check(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Check(m) => f.write_str(m),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Divergence { .. } => CliError::Check(e.to_string()),
            other => CliError::Runtime(other),
        }
    }
}

fn usage(e: Error) -> CliError {
    CliError::Usage(match e {
        Error::Config(msg) => msg,
        other => other.to_string(),
    })
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("STMU_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("STMU_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Train { run, out } => commands::train(&run.resolve()?, &out),
        Command::Eval(args) => commands::eval(&args),
        Command::Ablate { run, out } => commands::ablate(&run.resolve()?, out.as_deref()),
        Command::Gradcheck { seed } => commands::gradcheck(seed),
        Command::Params { run } => commands::params(&run.resolve()?),
        Command::Synth { n, size, seed, out } => commands::synth(n, size, seed, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
