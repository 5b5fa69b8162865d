use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tangents_cli::commands;
use tangents_cli::config::RunConfig;

/// Infinite-width Transformer kernels, NTK recursions, per-group scaling
/// plans, and finite-width Monte-Carlo verification.
///
/// Thread count is controlled by the RAYON_NUM_THREADS environment variable.
#[derive(Parser)]
#[command(name = "tangents", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Emit the per-group scaling plan (plan.json + plan.txt).
    Plan {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Propagate the kernel and NTK recursions (kernels.csv + ntk.csv).
    Propagate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the theory-vs-simulation verification suite (report.json + CSVs).
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the width sweep, e.g. --widths 64,128,256.
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<usize>>,
    },
    /// Render SVG plots from previously written CSV files.
    Report {
        #[arg(long, name = "in")]
        in_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: anyhow::Result<bool> = (|| match cli.command {
        Command::Plan { config, out } => {
            let config = RunConfig::load(&config)?;
            commands::cmd_plan(&config, &out)?;
            Ok(true)
        }
        Command::Propagate { config, out } => {
            let config = RunConfig::load(&config)?;
            commands::cmd_propagate(&config, &out)?;
            Ok(true)
        }
        Command::Verify { config, out, widths } => {
            let config = RunConfig::load(&config)?;
            commands::cmd_verify(&config, &out, widths)
        }
        Command::Report { in_dir, out } => {
            commands::cmd_report(&in_dir, &out)?;
            Ok(true)
        }
    })();
    match result {
        Ok(true) => ExitCode::SUCCESS,
        // A verification run completed but some check failed.
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
