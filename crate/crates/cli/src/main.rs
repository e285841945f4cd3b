use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nme_cli::commands;
use nme_cli::config::ExperimentConfig;
use nme_cli::error::CliResult;

#[derive(Parser)]
#[command(name = "nme", version, about = "Neural mixed effects models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its run record.
    Train(RunArgs),
    /// Paired group-clustered bootstrap of two runs' test metrics.
    Compare {
        run_a: PathBuf,
        run_b: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        resamples: usize,
        /// Also write the result as JSON to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Data-fraction ablation over nme, unme and generic training.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated fractions, e.g. 0.1,0.5,1.0.
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
    },
    /// Export delta norms, bias deltas and CRF transitions of a run.
    Inspect {
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Hyperparameter grid search on validation data.
    Gridsearch(RunArgs),
    /// Generate a synthetic dataset and its ground truth.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load(args: RunArgs) -> CliResult<(ExperimentConfig, PathBuf)> {
    let base = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let cfg = ExperimentConfig::load(&args.config)?.resolve(args.seed, args.deterministic, args.out);
    cfg.validate_static()?;
    Ok((cfg, base))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(args) => {
            let (cfg, base) = load(args)?;
            let (record, path) = commands::train(cfg, &base)?;
            println!(
                "{}: test {} = {:.6} over {} groups",
                path.display(),
                record.test.metric.name(),
                record.test.aggregate,
                record.test.group_count
            );
        }
        Command::Compare {
            run_a,
            run_b,
            seed,
            resamples,
            out,
        } => {
            let result = commands::compare(&run_a, &run_b, seed, resamples)?;
            let json = serde_json::to_string_pretty(&result).expect("bootstrap result serializes");
            if let Some(p) = out {
                std::fs::write(p, &json)?;
            }
            println!("{json}");
        }
        Command::Ablate { run, fractions } => {
            let (cfg, base) = load(run)?;
            let (rows, path) = commands::ablate(cfg, &base, fractions)?;
            println!("{}: {} rows", path.display(), rows.len());
        }
        Command::Inspect { run, out } => {
            for p in commands::inspect(&run, out)? {
                println!("{}", p.display());
            }
        }
        Command::Gridsearch(args) => {
            let (cfg, base) = load(args)?;
            let (record, path) = commands::gridsearch(cfg, &base)?;
            println!(
                "{}: test {} = {:.6}",
                path.display(),
                record.test.metric.name(),
                record.test.aggregate
            );
        }
        Command::Synth { config, out, seed } => {
            let (csv, truth) = commands::synth(&config, &out, seed)?;
            println!("{}\n{}", csv.display(), truth.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
