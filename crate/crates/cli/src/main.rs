use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use equinas_cli::config::Overrides;

#[derive(Parser)]
#[command(name = "equinas", version, about = "Group-equivariant CNNs and equivariance-aware architecture search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn overrides(&self, workers: Option<usize>) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            workers,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the built-in correctness suites.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write verify.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train (or with --eval-only, evaluate) a fixed architecture.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        eval_only: bool,
    },
    /// Evolutionary search over per-layer groups.
    Evo {
        #[command(flatten)]
        run: RunArgs,
        /// Threads training population members.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Differentiable search over mixed layers.
    Diff {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Convert a mixed checkpoint to plain convolutions.
    Collapse {
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Side of the random probe images.
        #[arg(long, default_value_t = 28)]
        image_size: usize,
    },
    /// Rebuild figures and print results for a run directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Verify { seed, out } => match equinas_cli::cmd_verify(*seed, out.as_deref()) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("verification failed");
                return ExitCode::FAILURE;
            }
            Err(e) => Err(e),
        },
        Command::Train { run, eval_only } => equinas_cli::cmd_train(&run.config, &run.overrides(None), *eval_only),
        Command::Evo { run, workers } => equinas_cli::cmd_evo(&run.config, &run.overrides(*workers)),
        Command::Diff { run } => equinas_cli::cmd_diff(&run.config, &run.overrides(None)),
        Command::Collapse { checkpoint, out, seed, image_size } => {
            equinas_cli::cmd_collapse(checkpoint, out.as_deref(), *seed, *image_size).map(|_| ())
        }
        Command::Report { out } => equinas_cli::cmd_report(out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
