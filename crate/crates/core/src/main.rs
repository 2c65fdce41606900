use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use isyana::config::parse_config;
use isyana::report::{cmd_report, cmd_run};
use isyana::Error;

/// Continual-learning experiments on MNIST task streams.
#[derive(Parser)]
#[command(name = "isyana", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured method and seed, writing a result bundle.
    Run {
        /// Experiment config (TOML).
        config: PathBuf,
        /// Replace an existing bundle in the output directory.
        #[arg(long)]
        force: bool,
    },
    /// Summarize a result bundle into tables and plots.
    Report {
        /// Bundle directory written by `run`.
        bundle: PathBuf,
    },
}

const EXIT_RUN_FAILURE: u8 = 1;
const EXIT_CONFIG_ERROR: u8 = 2;

fn exit_code(err: &Error) -> ExitCode {
    match err {
        Error::Config(_) => ExitCode::from(EXIT_CONFIG_ERROR),
        _ => ExitCode::from(EXIT_RUN_FAILURE),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, force } => {
            let cfg = match parse_config(&config) {
                Ok(cfg) => cfg,
                Err(e @ Error::Io { .. }) => {
                    error!("{e}");
                    return ExitCode::from(EXIT_CONFIG_ERROR);
                }
                Err(e) => {
                    error!("{e}");
                    return exit_code(&e);
                }
            };
            match cmd_run(&cfg, force) {
                Ok(reports) => {
                    println!("wrote {} run reports to {}", reports.len(), cfg.output_dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    error!("{e}");
                    exit_code(&e)
                }
            }
        }
        Command::Report { bundle } => match cmd_report(&bundle) {
            Ok(out) => {
                print!("{}", std::fs::read_to_string(&out.summary_csv).unwrap_or_default());
                if let Some((_, table)) = &out.ablation {
                    print!("\n{table}");
                }
                for p in &out.plots {
                    println!("plot: {}", p.display());
                }
                ExitCode::SUCCESS
            }
            Err(e) => {
                error!("{e}");
                exit_code(&e)
            }
        },
    }
}
