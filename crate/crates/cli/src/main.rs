use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ssd_core::experiment::{self, RunOptions};
use ssd_core::{ExperimentConfig, SsdError};

const SHIPPED: [(&str, &str); 3] = [
    ("appendix_g_toy", include_str!("../../../configs/appendix_g_toy.json")),
    (
        "appendix_e_sweep",
        include_str!("../../../configs/appendix_e_sweep.json"),
    ),
    ("transient_modes", include_str!("../../../configs/transient_modes.json")),
];

const EXIT_FAILURE: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "ssd",
    version,
    about = "Score-distillation experiments on Gaussian-mixture targets"
)]
struct Cli {
    /// Suppress the summary table and progress lines.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every experiment in a config and write its artifacts.
    Run {
        /// Config file, or the name of a shipped config.
        config: String,
        /// Output directory; falls back to $SSD_OUT_DIR, then the config's output_dir.
        #[arg(long, env = "SSD_OUT_DIR")]
        out: Option<PathBuf>,
        /// Replace the config's seed list with this single seed.
        #[arg(long)]
        seed_override: Option<u64>,
        /// Replace existing artifacts.
        #[arg(long)]
        overwrite: bool,
    },
    /// Check a config without running it; lists every violation.
    Validate { config: String },
    /// List the shipped configs.
    ListExperiments,
}

fn load(arg: &str) -> Result<ExperimentConfig, String> {
    let path = Path::new(arg);
    if path.exists() {
        return ExperimentConfig::load(path).map_err(|e| format!("{}: {e}", path.display()));
    }
    let name = arg.strip_suffix(".json").unwrap_or(arg);
    match SHIPPED.iter().find(|(n, _)| *n == name) {
        Some((_, text)) => ExperimentConfig::parse(text).map_err(|e| format!("{name}: {e}")),
        None => Err(format!("{arg}: no such file or shipped config")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::ListExperiments => {
            let mut stdout = std::io::stdout().lock();
            for (name, text) in SHIPPED {
                let description = ExperimentConfig::parse(text).map(|c| c.description).unwrap_or_default();
                // A closed pipe (`| head`) is not an error here.
                if writeln!(stdout, "{name}\n    {description}").is_err() {
                    break;
                }
            }
            ExitCode::SUCCESS
        }
        Command::Validate { config } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(msg) => {
                    eprintln!("error: {msg}");
                    return ExitCode::from(EXIT_INVALID);
                }
            };
            let violations = cfg.violations();
            if violations.is_empty() {
                if !cli.quiet {
                    println!("{}: ok", cfg.name);
                }
                ExitCode::SUCCESS
            } else {
                for v in &violations {
                    println!("{v}");
                }
                ExitCode::from(EXIT_INVALID)
            }
        }
        Command::Run {
            config,
            out,
            seed_override,
            overwrite,
        } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(msg) => {
                    eprintln!("error: {msg}");
                    return ExitCode::from(EXIT_INVALID);
                }
            };
            let violations = cfg.violations();
            if !violations.is_empty() {
                for v in &violations {
                    eprintln!("invalid config: {v}");
                }
                return ExitCode::from(EXIT_INVALID);
            }
            let options = RunOptions {
                out_dir: out,
                seed_override,
                overwrite,
            };
            match experiment::run(&cfg, &options) {
                Ok(report) => {
                    if !cli.quiet {
                        print!("{}", report.table());
                        println!("{} artifact(s) in {}", report.artifacts.len(), report.out_dir.display());
                    }
                    ExitCode::SUCCESS
                }
                Err(err @ SsdError::Divergence { .. }) => {
                    eprintln!("error: {err} (partial artifacts written)");
                    ExitCode::from(EXIT_DIVERGED)
                }
                Err(err @ SsdError::InvalidConfig(_)) => {
                    eprintln!("error: {err}");
                    ExitCode::from(EXIT_INVALID)
                }
                Err(err) => {
                    eprintln!("error: {err}");
                    ExitCode::from(EXIT_FAILURE)
                }
            }
        }
    }
}
