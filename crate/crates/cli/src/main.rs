//! `dmap`: ingest mortality panels, fit spatiotemporal disease-mapping
//! models and run simulation studies.

mod commands;
mod manifest;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dmap_core::epi::{Basis, CauseClass};

#[derive(Debug, Parser)]
#[command(name = "dmap", version, about = "Bayesian spatiotemporal disease mapping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Seed for every random draw of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory for artifacts and the run manifest.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct PanelArgs {
    /// Death records: area_id,week,sex,age_group,cause,count
    #[arg(long)]
    pub deaths: PathBuf,
    /// Population: area_id,sex,age_group,count
    #[arg(long)]
    pub population: PathBuf,
    /// Area covariate: area_id,value
    #[arg(long)]
    pub covariate: Option<PathBuf>,
    /// Adjacency edge list: src,dst
    #[arg(long)]
    pub edges: PathBuf,
    /// Week range, `LO-HI` or a single week.
    #[arg(long)]
    pub weeks: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Model configuration file (key = value).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Overrides the configured cause class.
    #[arg(long, value_parser = parse_cause)]
    pub cause: Option<CauseClass>,
    /// Overrides the configured standardization basis.
    #[arg(long, value_parser = parse_basis)]
    pub basis: Option<Basis>,
    /// Posterior draws for DIC; 0 disables it.
    #[arg(long, default_value_t = 1000)]
    pub dic_samples: usize,
}

fn parse_cause(s: &str) -> Result<CauseClass, String> {
    s.parse().map_err(|e: dmap_core::error::Error| e.to_string())
}

fn parse_basis(s: &str) -> Result<Basis, String> {
    s.parse().map_err(|e: dmap_core::error::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate the input tables and report what was read.
    Ingest {
        #[command(flatten)]
        panel: PanelArgs,
    },
    /// Period rates by sex and age group, and weekly rates.
    Rates {
        #[command(flatten)]
        panel: PanelArgs,
        #[arg(long, value_parser = parse_cause, default_value = "total")]
        cause: CauseClass,
    },
    /// Expected counts by indirect standardization.
    Expected {
        #[command(flatten)]
        panel: PanelArgs,
        #[arg(long, value_parser = parse_cause, default_value = "total")]
        cause: CauseClass,
        #[arg(long, value_parser = parse_basis, default_value = "period")]
        basis: Basis,
    },
    /// Fit a model and write the posterior report.
    Fit {
        #[command(flatten)]
        panel: PanelArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Fit a model and write relative-risk tables.
    Summarize {
        #[command(flatten)]
        panel: PanelArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Also fit each week separately and write the covariate series.
        #[arg(long)]
        weekly: bool,
    },
    /// Simulate a panel from a scenario.
    Simulate {
        /// Scenario file (key = value); defaults apply otherwise.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Covariate-recovery experiment over simulated replicates.
    Recover {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        replicates: usize,
    },
}

/// Failure of a run, split by exit code.
#[derive(Debug)]
pub enum CliError {
    Input(String),
    Numerical(String),
}

impl From<dmap_core::error::Error> for CliError {
    fn from(e: dmap_core::error::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Input(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("DMAP_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn main() -> ExitCode {
    init_logging();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Numerical(m)) => {
            eprintln!("numerical failure: {m}");
            ExitCode::from(2)
        }
    }
}
