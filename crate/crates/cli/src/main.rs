mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kegraph::harness::Mode;
use kegraph::{Error, ErrorClass};

use config::RunConfig;

/// Knowledge-enhanced graph fraud detection: data generation, training and reporting.
#[derive(Debug, Parser)]
#[command(name = "kegraph", version)]
struct Cli {
    /// Flat TOML file with run settings (see README for the keys).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides one config key, e.g. `--set kge_dim=16`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Root for relative output paths [default: results].
    #[arg(long, global = true, env = "KEGRAPH_RESULTS_DIR", value_name = "DIR")]
    results_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground truth.
    Synth {
        /// Output dataset directory.
        #[arg(long, default_value = "synth")]
        out: PathBuf,
    },
    /// Check a dataset against the graph schema invariants.
    Validate {
        /// Directory with triples.tsv, attributes.csv and labels.csv.
        #[arg(long)]
        data: PathBuf,
    },
    /// Pretrain TransE embeddings for every entity and relation.
    KgeTrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "kge")]
        out: PathBuf,
    },
    /// Write the company meta-path weight matrices.
    Subgraphs {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "subgraphs")]
        out: PathBuf,
    },
    /// Run an experiment over the configured seeds.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Pipeline: full, wo_ke, wo_attr, wo_attn or wo_robust. Overrides the config.
        #[arg(long)]
        mode: Option<Mode>,
        /// Comma-separated seeds. Overrides the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Run directory [default: <dataset>_<mode>].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a trained seed of a run directory on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Output JSON file [default: <run>/seed_<seed>/eval.json].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collect metrics.json files into one CSV table of means and standard errors.
    Report {
        /// Run directories or metrics.json files.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// CSV file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Validate { .. } => "validate",
            Command::KgeTrain { .. } => "kge-train",
            Command::Subgraphs { .. } => "subgraphs",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Report { .. } => "report",
        }
    }
}

/// Relative paths land under the results root.
fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn run(cli: Cli) -> kegraph::Result<()> {
    let mut config = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    let root = cli.results_dir.unwrap_or_else(|| PathBuf::from("results"));
    match cli.command {
        Command::Synth { out } => commands::synth(&config, &resolve(&root, &out)),
        Command::Validate { data } => commands::validate(&data),
        Command::KgeTrain { data, out } => commands::kge_train(&config, &data, &resolve(&root, &out)),
        Command::Subgraphs { data, out } => commands::subgraphs(&config, &data, &resolve(&root, &out)),
        Command::Train { data, mode, seeds, out } => {
            if let Some(m) = mode {
                config.mode = m;
            }
            if let Some(s) = seeds {
                config.seeds = s;
            }
            let out = out.unwrap_or_else(|| PathBuf::from(format!("{}_{}", commands::dataset_name(&data), config.mode)));
            commands::train(&config, &data, &resolve(&root, &out))
        }
        Command::Eval { data, run, seed, out } => {
            let out = out.map(|o| resolve(&root, &o));
            commands::eval(&data, &run, seed, out.as_deref())
        }
        Command::Report { runs, out } => commands::report(&runs, out.map(|o| resolve(&root, &o)).as_deref()),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numeric => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let name = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kegraph {name}: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
