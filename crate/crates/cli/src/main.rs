mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ensure_consumed, read_config, section, GenFlags, SweepFlags, TrainFlags, GEN_KEYS, SWEEP_KEYS, TRAIN_KEYS};
use error::{CliError, CliResult};

/// Treatment-effect estimation with Kolmogorov-Arnold networks.
#[derive(Parser, Debug)]
#[command(name = "kanite", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with known potential outcomes.
    Gen {
        #[command(flatten)]
        gen: GenFlags,
        /// Generator seed (alias of --data-seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV path; metadata goes beside it.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Flat JSON config; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one model, then evaluate it.
    Train {
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        gen: GenFlags,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train over a grid of spline sizes and degrees.
    Sweep {
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        gen: GenFlags,
        #[command(flatten)]
        axes: SweepFlags,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let mut file = match &cli.command {
        Command::Gen { config, .. } | Command::Train { config, .. } | Command::Sweep { config, .. } => {
            config.as_deref().map(read_config).transpose()?.unwrap_or_default()
        }
    };
    match cli.command {
        Command::Gen { gen, seed, out, .. } => {
            let extra: GenExtra = section(&mut file, &["seed", "out"])?;
            let file_gen: GenFlags = section(&mut file, GEN_KEYS)?;
            ensure_consumed(&file)?;
            let mut flags = gen.or(file_gen);
            flags.data_seed = seed.or(flags.data_seed).or(extra.seed);
            let out = out.or(extra.out).ok_or_else(|| CliError::Usage("gen needs --out <csv>".into()))?;
            commands::gen(&flags, &out)
        }
        Command::Train { train, gen, .. } => {
            let ft: TrainFlags = section(&mut file, TRAIN_KEYS)?;
            let fg: GenFlags = section(&mut file, GEN_KEYS)?;
            ensure_consumed(&file)?;
            commands::train_cmd(&train.or(ft), &gen.or(fg))
        }
        Command::Sweep { train, gen, axes, .. } => {
            let ft: TrainFlags = section(&mut file, TRAIN_KEYS)?;
            let fg: GenFlags = section(&mut file, GEN_KEYS)?;
            let fa: SweepFlags = section(&mut file, SWEEP_KEYS)?;
            ensure_consumed(&file)?;
            commands::sweep_cmd(&train.or(ft), &gen.or(fg), &axes.or(fa))
        }
    }
}

/// Keys of `gen` that are not generator parameters.
#[derive(serde::Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct GenExtra {
    seed: Option<u64>,
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
