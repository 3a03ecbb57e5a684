use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use ber_core::config::RunConfig;
use ber_core::harness::{self, AblationMatrix};
use ber_core::Error;

/// Continual-learning runs with batch-level experience replay.
///
/// Log verbosity is controlled by the BER_LOG environment variable
/// (error, warn, info, debug, trace).
#[derive(Parser)]
#[command(name = "ber", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configured run and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides seeds.base.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides output.dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Run every method x seed arm of a matrix file and print a comparison table.
    Ablation {
        #[arg(long)]
        matrix: PathBuf,
    },
    /// Print the metrics of a finished run.
    Inspect {
        #[arg(long)]
        run: PathBuf,
    },
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            resume,
        } => {
            let mut cfg: RunConfig = harness::read_config(&config)?;
            if let Some(s) = seed {
                cfg.seeds.base = s;
            }
            if let Some(o) = out {
                cfg.output.dir = o;
            }
            cfg.validate()?;
            let dir = cfg.output.dir.clone();
            let summary = harness::run(&cfg, &dir, resume)
                .with_context(|| format!("run failed; partial state is in {}", dir.display()))?;
            print!("{}", summary.render());
            println!("artifacts       {}", dir.display());
        }
        Command::Ablation { matrix } => {
            let (m, base) = AblationMatrix::read(&matrix)?;
            let (_, rows) = harness::ablation(&base, &m)?;
            print!("{}", harness::render_table(&rows));
        }
        Command::Inspect { run } => {
            print!("{}", harness::inspect(&run)?.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BER_LOG", "warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Config(_))));
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}
