use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tamdp_lab::config::{load_config, seed_offset_from_env, validate_config};
use tamdp_lab::experiments::run_experiment;
use tamdp_lab::LabError;

/// Desk-scale laboratory for GRPO on tool-augmented MDPs.
#[derive(Parser)]
#[command(name = "tamdp-lab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        /// Path to the TOML experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for the parallel pool.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Validate a config file and report every violation.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the version.
    Version,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn exit_for(err: &LabError) -> u8 {
    match err {
        LabError::Config { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Version => {
            println!("tamdp-lab {}", env!("CARGO_PKG_VERSION"));
            ExitCode::SUCCESS
        }
        Command::Validate { config } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("config error: {e}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            let diags = validate_config(&cfg);
            if diags.is_empty() {
                println!("ok: {}", config.display());
                ExitCode::SUCCESS
            } else {
                for d in &diags {
                    eprintln!("invalid: {d}");
                }
                ExitCode::from(EXIT_CONFIG)
            }
        }
        Command::Run { config, out, jobs } => {
            if let Some(n) = jobs {
                if let Err(e) = tamdp_lab::parallel::configure_threads(n) {
                    eprintln!("runtime error: {e}");
                    return ExitCode::from(EXIT_RUNTIME);
                }
            }
            let offset = match seed_offset_from_env() {
                Ok(o) => o,
                Err(e) => {
                    eprintln!("config error: {e}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("config error: {e}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            let diags = validate_config(&cfg);
            if !diags.is_empty() {
                for d in &diags {
                    eprintln!("invalid: {d}");
                }
                return ExitCode::from(EXIT_CONFIG);
            }
            match run_experiment(&cfg, out.as_deref(), offset) {
                Ok(dir) => {
                    println!("wrote {}", dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("runtime error: {e}");
                    ExitCode::from(exit_for(&e))
                }
            }
        }
    }
}
