use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use mdm_scaffold::experiment::{cmd_gen_data, cmd_report, cmd_sweep, cmd_train, ExperimentConfig, RunPaths};

#[derive(Parser)]
#[command(name = "mdm-scaffold", version, about = "Masked diffusion extraction experiments")]
struct Cli {
    /// Experiment config (JSON); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the corpus and model seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory that artifact paths are resolved against.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and held-out corpora and the vocabulary.
    GenData,
    /// Train the model on the generated corpus.
    Train {
        /// Continue from the saved checkpoint instead of starting fresh.
        #[arg(long)]
        resume: bool,
    },
    /// Decode the held-out set for every method and step count and evaluate.
    Sweep,
    /// Turn a report CSV into per-metric tables.
    Report {
        /// Report to read; defaults to the run's report.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also render an SVG chart per metric.
        #[arg(long)]
        charts: bool,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let out = &cli.out;
    let log = |msg: &str| eprintln!("{msg}");
    match cli.command {
        Command::GenData => {
            let s = cmd_gen_data(&cfg, out)?;
            println!(
                "wrote {} training examples ({} null-padded) and {} held-out examples; vocabulary {} tokens",
                s.n_train, s.padded, s.n_eval, s.vocab_size
            );
            println!("shared name/enum combinations between splits: {}", s.overlap);
        }
        Command::Train { resume } => {
            let s = cmd_train(&cfg, out, resume, log)?;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            println!(
                "trained steps {}..{}; moving-average loss {} -> {}",
                s.start_step,
                s.end_step,
                fmt(s.first_moving_average),
                fmt(s.final_moving_average)
            );
        }
        Command::Sweep => {
            let s = cmd_sweep(&cfg, out, log)?;
            let paths = RunPaths::new(&cfg, out);
            println!("wrote {} report rows to {}", s.reports.len(), paths.report.display());
        }
        Command::Report { report, charts } => {
            let paths = RunPaths::new(&cfg, out);
            let report = report.unwrap_or(paths.report.clone());
            let tables = cmd_report(&report, &paths.tables(), charts)?;
            println!("wrote {} tables to {}", tables.len(), paths.tables().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
