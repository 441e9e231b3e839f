use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dslq_cli::{cmd_ensemble_study, cmd_report, cmd_run, cmd_synth, cmd_target, load_run_config, CliError};

#[derive(Debug, Parser)]
#[command(name = "dslq", version, about = "Portfolio decisions by supervised learning")]
struct Cli {
    /// Worker threads; all cores when absent.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overrides the base seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic OHLCV market from a synth config.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// CSV path, or a directory that receives market.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the target portfolio schedule.
    Target {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, decide and backtest every configured strategy.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bootstrap ensemble-size study over a trained member pool.
    EnsembleStudy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge the summaries under a directory into report.csv.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::Validation("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    match cli.command {
        Command::Synth { config, out } => {
            let (path, digest) = cmd_synth(&config, &out, cli.seed)?;
            println!("{digest}  {}", path.display());
        }
        Command::Target { config, out } => {
            let loaded = load_run_config(&config, cli.seed)?;
            cmd_target(&loaded, &out)?;
        }
        Command::Run { config, out } => {
            let loaded = load_run_config(&config, cli.seed)?;
            let outcome = cmd_run(&loaded, &out)?;
            for f in &outcome.manifest.failures {
                eprintln!("{} failed: {}", f.strategy, f.error);
            }
            if outcome.failed() {
                return Err(CliError::Runtime(format!(
                    "{} of {} strategies failed",
                    outcome.manifest.failures.len(),
                    loaded.config.strategies.len()
                )));
            }
        }
        Command::EnsembleStudy { config, out } => {
            let loaded = load_run_config(&config, cli.seed)?;
            cmd_ensemble_study(&loaded, &out)?;
        }
        Command::Report { out } => {
            let rows = cmd_report(&out)?;
            println!("{} rows -> {}", rows.len(), out.join("report.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DSLQ_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // Help and version are not errors.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
