use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use stgd_core::checkpoint::{load_checkpoint, save_checkpoint};
use stgd_core::data::{generate_dataset, read_jsonl, write_jsonl};
use stgd_core::eval::evaluate;
use stgd_core::tensor::GradCheckOptions;
use stgd_core::train::{check_model_gradients, train};
use stgd_core::{Error, StgdModel, TrainConfig};

/// Parameter-efficient spatio-temporal video grounding on synthetic clips.
///
/// Every subcommand reads one JSON config. Fields left out take the
/// defaults listed at the end of `stgd --help`.
#[derive(Parser)]
#[command(name = "stgd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset as JSON lines.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Train adapters and heads; the backbone stays frozen.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Optional validation set, evaluated at every log step.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Checkpoint manifest path; the payload goes next to it as `.bin`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and write the metrics report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Finite-difference check of all trainable gradients.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Print total, frozen and trainable parameter counts.
    CountParams {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e.to_string())
    }
}

fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("no such file: {}", path.display())))
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig, Failure> {
    match path {
        Some(p) => {
            require_file(p)?;
            Ok(TrainConfig::load(p)?)
        }
        None => Ok(TrainConfig::default()),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData {
            config,
            out,
            n,
            seed,
        } => {
            let cfg = load_config(config.as_deref())?;
            let samples = generate_dataset(&cfg, n, seed)?;
            write_jsonl(&out, &samples).map_err(Failure::from)?;
            println!("wrote {} samples to {}", samples.len(), out.display());
        }
        Command::Train {
            config,
            data,
            val,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            require_file(&data)?;
            let train_set = read_jsonl(&data)?;
            let val_set = match &val {
                Some(v) => {
                    require_file(v)?;
                    Some(read_jsonl(v)?)
                }
                None => None,
            };
            let (model, mut store) = StgdModel::build(&cfg)?;
            train(&model, &mut store, &train_set, val_set.as_deref(), |log| {
                println!("{}", serde_json::to_string(log).expect("serializable"));
            })?;
            save_checkpoint(&out, &cfg, &store)?;
            eprintln!("checkpoint written to {}", out.display());
        }
        Command::Eval { ckpt, data, report } => {
            require_file(&ckpt)?;
            require_file(&data)?;
            let checkpoint = load_checkpoint(&ckpt)?;
            let (model, mut store) = StgdModel::build(&checkpoint.manifest.config)?;
            checkpoint.restore_into(&mut store)?;
            let samples = read_jsonl(&data)?;
            let r = evaluate(&model, &store, &samples)?;
            std::fs::write(&report, to_json(&r) + "\n").map_err(|e| Failure::Run(e.to_string()))?;
            println!("{}", to_json(&r));
        }
        Command::Gradcheck { config, tol } => {
            let cfg = load_config(config.as_deref())?;
            if !(tol.is_finite() && tol > 0.0) {
                return Err(Failure::Usage(format!("--tol must be positive, got {tol}")));
            }
            let opts = GradCheckOptions {
                tol,
                seed: cfg.seed,
                ..GradCheckOptions::default()
            };
            let report = check_model_gradients(&cfg, &opts)?;
            for t in &report.tensors {
                println!(
                    "{:<48} coords {:>3}  max rel {:.3e}",
                    t.name, t.coords, t.max_rel_error
                );
            }
            println!(
                "checked {} coordinates in {} tensors: max rel error {:.3e} (tol {:.1e})",
                report.coords_checked(),
                report.tensors.len(),
                report.max_rel_error,
                tol
            );
            if !report.passed {
                return Err(Failure::Run("gradient check failed".into()));
            }
            println!("PASS");
        }
        Command::CountParams { config } => {
            let cfg = load_config(config.as_deref())?;
            let (_, store) = StgdModel::build(&cfg)?;
            let total = store.count_total();
            let trainable = store.count_trainable();
            println!("total      {total}");
            println!("frozen     {}", total - trainable);
            println!("trainable  {trainable}");
            println!("fraction   {:.6}", trainable as f64 / total as f64);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let defaults = format!("Config defaults:\n{}", TrainConfig::default().to_json());
    let matches = Cli::command().after_long_help(defaults).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
