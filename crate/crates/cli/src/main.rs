mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ConfigError, Settings};

/// Latent Markov adherence profiling and survival analysis.
#[derive(Debug, Parser)]
#[command(name = "lmadhere", version)]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the output directory of the configuration.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort from the simulator configuration.
    Simulate,
    /// Compute monthly adherence panels.
    Adherence,
    /// Select the number of states and covariates, save the best model.
    Fit,
    /// Decode latent paths and count latent-behavioural profiles.
    Profile {
        /// Model document (default: <output>/model.json).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Survival comparison of the retained profiles.
    Survival {
        /// Profile assignments (default: <output>/profiles.csv).
        #[arg(long)]
        profiles: Option<PathBuf>,
    },
    /// Run adherence, fit, profile and survival in sequence.
    Report,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<lmadhere::Error>() {
            return match e.kind() {
                lmadhere::ErrorKind::Validation => 1,
                lmadhere::ErrorKind::Computation => 2,
                lmadhere::ErrorKind::Io => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(ConfigError("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let Some(config) = cli.config.as_deref() else {
        return Err(ConfigError("--config is required".into()).into());
    };
    let settings = Settings::load(config, cli.seed, cli.output.as_deref())?;
    match cli.command {
        Command::Simulate => commands::simulate(&settings, cli.seed),
        Command::Adherence => commands::adherence(&settings),
        Command::Fit => commands::fit(&settings),
        Command::Profile { model } => commands::profile(&settings, model.as_deref()),
        Command::Survival { profiles } => commands::survival(&settings, profiles.as_deref()),
        Command::Report => commands::report(&settings),
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
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
