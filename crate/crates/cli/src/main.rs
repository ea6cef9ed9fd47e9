//! `showcase`: pipeline driver for personalized multi-modal explanation
//! experiments. Subcommands compose: fixture → distill → select-train →
//! select → train → generate → evaluate.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod manifest;

use config::PipelineConfig;

#[derive(Parser)]
#[command(name = "showcase", version, about = "Personalized showcase pipeline")]
struct Cli {
    /// TOML configuration; every field has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every stage seed for a fully reproducible run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts, reports and manifests.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the bundled synthetic dataset.
    Fixture,
    /// Train the alignment classifier and distill the explanation corpus.
    Distill,
    /// Train the image-selection relevance model.
    SelectTrain,
    /// Select diverse image sets and report ranking/diversity metrics.
    Select {
        /// Random-selection baseline instead of the trained model.
        #[arg(long)]
        random: bool,
        /// Relevance checkpoint (defaults to the artifact path).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the explanation generator.
    Train {
        /// Loss mode: ce | ce+cl | ce+ccl | ce+pcl | ce+ccl+pcl.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Generate explanations for selected showcases.
    Generate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        showcases: Option<PathBuf>,
    },
    /// Score generations against references.
    Evaluate {
        #[arg(long)]
        generations: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = PipelineConfig::load(cli.config.as_deref())?;
    config.override_seed(cli.seed);
    let out = &cli.out;
    match &cli.command {
        Command::Fixture => commands::cmd_fixture(&config, out, cli.seed),
        Command::Distill => commands::cmd_distill(&config, out, cli.seed),
        Command::SelectTrain => commands::cmd_select_train(&config, out, cli.seed),
        Command::Select { random, checkpoint } => {
            commands::cmd_select(&config, out, cli.seed, *random, checkpoint.as_deref())
        }
        Command::Train { mode } => commands::cmd_train(&config, out, cli.seed, mode.as_deref()),
        Command::Generate {
            checkpoint,
            showcases,
        } => commands::cmd_generate(
            &config,
            out,
            cli.seed,
            checkpoint.as_deref(),
            showcases.as_deref(),
        ),
        Command::Evaluate { generations } => {
            commands::cmd_evaluate(&config, out, cli.seed, generations.as_deref())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<showcase_core::Error>() {
        Some(core_err) if core_err.is_numerical() => 3,
        _ => 2,
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own message; usage problems exit with 1.
            let _ = e.print();
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code(&err));
    }
}
