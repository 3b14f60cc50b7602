use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use coopdet::experiment::{cmd_compare, cmd_generate, cmd_inspect, cmd_train_attention, Error, ExperimentConfig};

/// Cooperative vehicle/infrastructure 3D detection experiments.
#[derive(Debug, Parser)]
#[command(name = "coopdet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `run.frames`.
    #[arg(long)]
    frames: Option<usize>,
    /// Comma-separated policy list, e.g. `LocVehicle,Learn2com`.
    #[arg(long, value_delimiter = ',')]
    policies: Option<Vec<String>>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with splits and oracle labels.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; defaults to `run.output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the attention matrix on the train split.
    TrainAttention {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; defaults to `run.output`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate policies on the test split and write report tables.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report directory; defaults to `<data>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump one frame's protocol messages and bandwidth ledger.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        frame: u32,
        /// Trace directory; defaults to `<data>/inspect`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut config = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        config.run.seed = s;
    }
    if let Some(f) = common.frames {
        config.run.frames = f;
    }
    if let Some(p) = &common.policies {
        config.run.policies = p.iter().map(|s| s.trim().to_string()).collect();
    }
    config.validate()?;
    Ok(config)
}

fn dataset(config: &ExperimentConfig, flag: &Option<PathBuf>) -> PathBuf {
    flag.clone().unwrap_or_else(|| PathBuf::from(&config.run.output))
}

fn run(cli: Cli) -> Result<String, Error> {
    match cli.command {
        Command::Generate { common, out } => {
            let c = load(&common)?;
            cmd_generate(&c, &dataset(&c, &out))
        }
        Command::TrainAttention { common, data } => {
            let c = load(&common)?;
            cmd_train_attention(&c, &dataset(&c, &data))
        }
        Command::Compare { common, data, out } => {
            let c = load(&common)?;
            let data = dataset(&c, &data);
            let out = out.unwrap_or_else(|| data.join("report"));
            cmd_compare(&c, &data, &out)
        }
        Command::Inspect { common, data, frame, out } => {
            let c = load(&common)?;
            let data = dataset(&c, &data);
            let out = out.unwrap_or_else(|| data.join("inspect"));
            cmd_inspect(&c, &data, frame, &out)
        }
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("COOPDET_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("COOPDET_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Usage(e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match configure_threads().and_then(|_| run(cli)) {
        Ok(msg) => {
            print!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
