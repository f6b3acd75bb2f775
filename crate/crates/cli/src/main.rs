use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use cscct::checkpoint::Checkpoint;
use cscct::compare::Comparison;
use cscct::experiment::{run_experiment, ExperimentConfig, RunOptions, OUTPUT_ROOT_ENV};
use cscct::metrics::embeddings_csv;
use cscct::stream::{load_csv_dataset, CsvSchema, LabeledExample};

#[derive(Parser)]
#[command(name = "cscct", version, about = "Class-incremental learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment config.
    Run {
        config: PathBuf,
        /// Replace the config's seed list with this single seed.
        #[arg(long)]
        seed_override: Option<u64>,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Default parent directory for runs without an explicit output.
        #[arg(long, env = OUTPUT_ROOT_ENV)]
        output_root: Option<PathBuf>,
        /// Replace an existing run directory.
        #[arg(long)]
        force: bool,
        /// Number of seeds to run concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Write per-phase feature dumps of the seen test sets.
        #[arg(long)]
        emit_embeddings: bool,
    },
    /// Tabulate two or more run summaries.
    Compare {
        #[arg(required = true, num_args = 2..)]
        summaries: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Dump features of a CSV dataset under a checkpointed model.
    ExportEmbeddings {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long, default_value = "label")]
        label_column: String,
        /// Comma-separated feature columns; default is every other column.
        #[arg(long, value_delimiter = ',')]
        feature_columns: Option<Vec<String>>,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run {
            config,
            seed_override,
            out,
            output_root,
            force,
            parallel,
            emit_embeddings,
        } => {
            let mut cfg = ExperimentConfig::from_file(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(seed) = seed_override {
                cfg.seeds = vec![seed];
            }
            let options = RunOptions {
                out_dir: out,
                output_root,
                force,
                parallel,
                emit_embeddings,
            };
            let (dir, summary) = run_experiment(&cfg, &options)?;
            for r in &summary.seeds {
                match (&r.error, r.average_incremental_accuracy) {
                    (Some(e), _) => println!("seed {}: FAILED after {} phases: {e}", r.seed, r.phases_completed),
                    (None, Some(a)) => println!(
                        "seed {}: avg_inc_acc {a:.4} apt {} act {}",
                        r.seed,
                        fmt_opt(r.apt),
                        fmt_opt(r.act)
                    ),
                    (None, None) => println!("seed {}: no metrics", r.seed),
                }
            }
            if let Some(s) = summary.aggregate.average_incremental_accuracy {
                println!("mean avg_inc_acc {:.4} ± {:.4} over {} seeds", s.mean, s.std, s.n);
            }
            println!("summary: {}", dir.join(cscct::experiment::SUMMARY_FILE).display());
            Ok(if summary.succeeded() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Compare { summaries, csv } => {
            let table = Comparison::from_paths(&summaries)?;
            print!("{}", table.to_text());
            if let Some(path) = csv {
                std::fs::write(&path, table.to_csv()).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::ExportEmbeddings {
            checkpoint,
            dataset,
            label_column,
            feature_columns,
            out,
        } => {
            let text = export(&checkpoint, &dataset, label_column, feature_columns)?;
            match out {
                Some(path) => std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{text}"),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

fn export(checkpoint: &Path, dataset: &Path, label_column: String, feature_columns: Option<Vec<String>>) -> Result<String> {
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let data = load_csv_dataset(
        dataset,
        &CsvSchema {
            label_column,
            feature_columns,
        },
    )?;
    if data.dim != ckpt.model.input_dim() {
        bail!("dataset has {} features but the model expects {}", data.dim, ckpt.model.input_dim());
    }
    // Report labels as the training run saw them when the file's labels
    // appear in the checkpoint's table; otherwise keep the file's order.
    let internal = |file_class: usize| -> usize {
        let original = data.label_remap.iter().find(|(_, c)| *c == file_class).map(|(o, _)| *o);
        original
            .and_then(|o| ckpt.data_labels.iter().find(|(lo, _)| *lo == o).map(|(_, c)| *c))
            .unwrap_or(file_class)
    };
    let examples: Vec<LabeledExample> = data
        .examples
        .into_iter()
        .map(|mut e| {
            ckpt.standardizer.apply_in_place(&mut e.features);
            e.label = internal(e.label);
            e
        })
        .collect();
    Ok(embeddings_csv(&ckpt.model, &examples, ckpt.phase as usize)?)
}
