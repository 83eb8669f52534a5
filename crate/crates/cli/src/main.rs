use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fsied_cli::commands;
use fsied_cli::config::ExperimentConfig;
use fsied_cli::failure::Outcome;

/// Few-shot incremental event detection experiments.
///
/// Settings come from a flat `key = value` config file; environment
/// variables `FSIED_<KEY>` (dots as underscores) and `--set key=value`
/// override it. Exit codes: 2 config error, 3 data error, 4 internal error.
#[derive(Parser)]
#[command(name = "fsied", version)]
struct Cli {
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set loss.alpha=0.2`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus, frame file and curated map.
    GenerateSynthetic {
        #[arg(long)]
        out: PathBuf,
        /// Number of classes; 0 writes the 70-class layout.
        #[arg(long, default_value_t = 0)]
        classes: usize,
        #[arg(long, default_value_t = 40)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build the round manifest and split files from the corpus.
    BuildDataset,
    /// Parse the frame file and map the dataset's event types to frames.
    IngestFrames,
    /// Train one session over all rounds.
    Train {
        /// Disable components: no-ek, no-ml, no-ps (comma separated or repeated).
        #[arg(long)]
        ablate: Vec<String>,
        /// Continue after the given completed round using its checkpoint.
        #[arg(long, value_name = "ROUND")]
        resume: Option<usize>,
    },
    /// Compute matrices, curves, forgetting rates and OOD tables.
    Evaluate {
        /// A session result or a reference-matrix file.
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use the signed mean of successive differences as forgetting rate.
        #[arg(long)]
        eq15_literal: bool,
    },
    /// Train the full model and each single-component ablation.
    Ablate {
        /// ifsed-k or ifsed-kp; defaults to model.variant.
        #[arg(long)]
        model: Option<String>,
    },
    /// One session per setting of shot, way or retained exemplars.
    Sweep {
        #[arg(long)]
        axis: Option<String>,
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
    },
    /// Combine finished runs into one set of tables.
    Report {
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
        #[arg(long)]
        eq15_literal: bool,
    },
}

fn run(cli: Cli) -> Outcome<String> {
    let load = || ExperimentConfig::load(cli.config.as_deref(), &cli.overrides);
    match &cli.command {
        Command::GenerateSynthetic { out, classes, per_class, seed } => {
            commands::generate_synthetic(out, *classes, *per_class, *seed)
        }
        Command::BuildDataset => commands::build_dataset(&load()?),
        Command::IngestFrames => commands::ingest(&load()?),
        Command::Train { ablate, resume } => commands::train(&load()?, ablate, *resume),
        Command::Evaluate { input, out, eq15_literal } => {
            let config = load()?;
            let out = out.clone().unwrap_or_else(|| {
                let stem = input.file_stem().map_or("result".into(), |s| s.to_string_lossy().into_owned());
                input.with_file_name(format!("{stem}-report"))
            });
            commands::evaluate(input, &out, *eq15_literal, config.ood_steps)
        }
        Command::Ablate { model } => commands::ablate(&load()?, model.as_deref()),
        Command::Sweep { axis, values } => commands::sweep(&load()?, axis.as_deref(), values),
        Command::Report { runs, out, eq15_literal } => commands::report(runs, out, *eq15_literal),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.code() as u8)
        }
    }
}
