use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stag_core::accounting::cost_table;
use stag_core::model::Strategy;
use stag_core::{Error, Result};
use stag_harness::dataset::{generate_splits, load_dataset};
use stag_harness::experiment::{cost_inputs, evaluate_params, run_experiment, sweep, SweepAxis};
use stag_harness::verify::{verify, VerifyOptions};
use stag_harness::ExperimentConfig;

#[derive(Parser)]
#[command(name = "stag", version, about = "Side token adaptation on a neighborhood graph for frozen point-cloud Transformers")]
struct Cli {
    /// Flat TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces the config's seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Fixed FPS start and zeroed wall-time columns for byte-identical reruns.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true, value_parser = ["single", "double"])]
    precision: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes the synthetic primitive dataset (train/ and test/ splits).
    Generate,
    /// Fine-tunes once per seed and writes metrics, summary, cost and parameters.
    Train,
    /// Test accuracy of a saved parameter file.
    Evaluate {
        #[arg(long)]
        params: PathBuf,
    },
    /// Runs one experiment per value of an ablation axis.
    Sweep {
        /// A, k or refine_fn.
        axis: String,
        #[arg(required = true)]
        values: Vec<String>,
    },
    /// Prints the cost comparison of the four strategies.
    Cost {
        /// Number of classes of the head.
        #[arg(long, default_value_t = 4)]
        classes: usize,
    },
    /// Runs every verification suite; exits nonzero on any failure.
    Verify,
}

fn effective_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
        cfg.data_seed = seed;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    if let Some(p) = &cli.precision {
        cfg.precision = p.clone();
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = effective_config(cli)?;
    match &cli.command {
        Command::Generate => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("data"));
            let (train, test) =
                generate_splits(&out, cfg.train_per_class, cfg.test_per_class, cfg.points, cfg.noise_sigma, cfg.data_seed)?;
            println!("wrote {} train and {} test clouds under {}", train.entries.len(), test.entries.len(), out.display());
        }
        Command::Train => {
            let summary = run_experiment(&cfg)?;
            print!("{}", summary.summary_csv());
            print!("{}", stag_core::accounting::CostTable { rows: vec![summary.cost] }.to_text());
        }
        Command::Evaluate { params } => {
            let seed = cfg.seeds.first().copied().unwrap_or(0);
            println!("test_acc,{:.6}", evaluate_params(&cfg, params, seed)?);
        }
        Command::Sweep { axis, values } => {
            let table = sweep(&cfg, axis.parse::<SweepAxis>()?, values)?;
            print!("{}", table.to_csv());
        }
        Command::Cost { classes } => {
            let classes = if cli.config.is_some() {
                load_dataset(&cfg.train_manifest, &cfg.test_manifest).map(|d| d.classes()).unwrap_or(*classes)
            } else {
                *classes
            };
            let table = cost_table(&cost_inputs(&cfg, classes)?, &Strategy::TABLE)?;
            print!("{}", table.to_text());
            if let Some(out) = &cli.out {
                std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
                let path = out.join("cost.csv");
                std::fs::write(&path, table.to_csv()).map_err(|e| Error::io(&path, e))?;
            }
        }
        Command::Verify => {
            let outcomes = verify(&VerifyOptions::default());
            for o in &outcomes {
                println!("{o}");
            }
            return Ok(outcomes.iter().all(|o| o.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error\t{}\t{e}", e.kind());
            ExitCode::FAILURE
        }
    }
}
