//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{self, Format};
use crate::error::{Error, Result};
use crate::pipeline::{self, PreparedData, Stream};
use crate::prediction::{self, BaseCacheRow};
use crate::synth;

#[derive(Debug, Parser)]
#[command(name = "uedkl", version, about = "Uncertainty-aware ensemble deep kernel learning for web attack detection")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
    Unseen,
    /// Test and unseen items together.
    Mixed,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled payload corpus.
    Synth {
        /// Payloads per class.
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value = "corpus.csv")]
        out: PathBuf,
        #[arg(long, value_enum)]
        format: Option<Format>,
    },
    /// Split a labeled corpus and build the vocabulary.
    Prep {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        format: Option<Format>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the base learners and cache their outputs for the ensemble.
    TrainBase {
        /// Directory written by `prep`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        parallel: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the attention ensemble on cached base-learner outputs.
    TrainEnsemble {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a split (or a labeled file) and write a prediction file.
    Predict {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        /// Labeled CSV or JSON-lines file to score instead of a split.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics and uncertainty groups for a prediction file.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// High-uncertainty-ratio / F-score curve and the random-order baseline.
    Curve {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        baseline_out: Option<PathBuf>,
    },
}

fn base_config(cli: &Cli, stored: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, stored) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) if p.exists() => RunConfig::load(p)?,
        _ => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn checkpoint_for(data: Option<&Path>, explicit: &Option<PathBuf>) -> Result<PathBuf> {
    match (explicit, data) {
        (Some(p), _) => Ok(p.clone()),
        (None, Some(d)) => Ok(pipeline::checkpoint_path(d)),
        (None, None) => Err(Error::config("give --checkpoint or --data")),
    }
}

/// Runs one command. Output that is not written to a file goes to stdout.
pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { n, out, format } => {
            if *n == 0 {
                return Err(Error::config("--n must be >= 1"));
            }
            let seed = cli.seed.unwrap_or(base_config(cli, None)?.seed);
            let records = synth::synth_generate(seed, *n);
            dataset::write_records(out, &records, format.unwrap_or_else(|| Format::from_path(out)))?;
            info!("wrote {} records to {}", records.len(), out.display());
        }
        Command::Prep { input, format, out } => {
            let cfg = base_config(cli, None)?;
            let records = dataset::ingest(input, format.unwrap_or_else(|| Format::from_path(input)))?;
            PreparedData::build(&records, &cfg)?.save(out)?;
        }
        Command::TrainBase {
            data,
            parallel,
            checkpoint: ckpt,
        } => {
            let mut cfg = base_config(cli, Some(&data.join(pipeline::CONFIG_FILE)))?;
            cfg.parallel |= parallel;
            let prepared = PreparedData::load(data, Some(cfg))?;
            let stage = pipeline::train_stage1(&prepared)?;
            let path = checkpoint_for(Some(data), ckpt)?;
            checkpoint::save(&stage.model, &path)?;
            if let Some(d) = stage.divergence {
                return Err(Error::Divergence {
                    epoch: 0,
                    batch: 0,
                    detail: format!("{d}; last good state saved to {}", path.display()),
                });
            }
            let (train, val) = pipeline::stage1_caches(&stage.model, &prepared)?;
            prediction::write_jsonl(&data.join(pipeline::TRAIN_CACHE_FILE), &train)?;
            prediction::write_jsonl(&data.join(pipeline::VAL_CACHE_FILE), &val)?;
            for (h, hist) in stage.histories.iter().enumerate() {
                if let Some(last) = hist.last() {
                    println!(
                        "learner {h}: {} epochs, final val loss {:.4}, val acc {:.4}",
                        hist.len(),
                        last.val_loss,
                        last.val_accuracy
                    );
                }
            }
        }
        Command::TrainEnsemble { data, checkpoint: ckpt } => {
            let path = checkpoint_for(Some(data), ckpt)?;
            let mut model = checkpoint::load(&path)?;
            if cli.config.is_some() || cli.seed.is_some() {
                warn!("train-ensemble uses the configuration stored in the checkpoint");
            }
            let train: Vec<BaseCacheRow> = prediction::read_jsonl(&data.join(pipeline::TRAIN_CACHE_FILE))?;
            let val: Vec<BaseCacheRow> = prediction::read_jsonl(&data.join(pipeline::VAL_CACHE_FILE))?;
            let trained = pipeline::train_stage2(&mut model, &train, &val)?;
            checkpoint::save(&model, &path)?;
            if let Some(d) = trained.divergence {
                return Err(Error::Divergence {
                    epoch: 0,
                    batch: 0,
                    detail: format!("{d}; last good state saved to {}", path.display()),
                });
            }
            if let Some(best) = trained.history.get(trained.best_epoch) {
                println!(
                    "ensemble: best epoch {}, val loss {:.4}, val acc {:.4}",
                    best.epoch, best.val_loss, best.val_accuracy
                );
            }
        }
        Command::Predict {
            data,
            split,
            input,
            checkpoint: ckpt,
            out,
        } => {
            let model = checkpoint::load(&checkpoint_for(data.as_deref(), ckpt)?)?;
            let (items, stream) = match (input, data) {
                (Some(file), _) => {
                    let records = dataset::ingest(file, Format::from_path(file))?;
                    let items = records
                        .into_iter()
                        .enumerate()
                        .map(|(id, r)| dataset::Item {
                            id,
                            payload: r.payload,
                            label: r.label,
                        })
                        .collect();
                    (items, Stream::External)
                }
                (None, Some(dir)) => {
                    let prepared = PreparedData::load(dir, Some(model.config.clone()))?;
                    let s = prepared.splits;
                    match split {
                        SplitName::Train => (s.train, Stream::Train),
                        SplitName::Val => (s.val, Stream::Val),
                        SplitName::Test => (s.test, Stream::Test),
                        SplitName::Unseen => (s.unseen, Stream::Unseen),
                        SplitName::Mixed => (s.test.into_iter().chain(s.unseen).collect(), Stream::Test),
                    }
                }
                (None, None) => return Err(Error::config("give --data or --input")),
            };
            let rows = pipeline::predict_items(&model, &items, stream)?;
            prediction::write_jsonl(out, &rows)?;
            info!("wrote {} predictions to {}", rows.len(), out.display());
        }
        Command::Evaluate { predictions, json } => {
            let rows = prediction::read_predictions(predictions)?;
            let e = pipeline::evaluate_rows(&rows)?;
            print!("{}", pipeline::report_text(&e));
            if let Some(p) = json {
                checkpoint::write_atomic(p, &serde_json::to_vec_pretty(&e)?)?;
            }
        }
        Command::Curve {
            predictions,
            out,
            baseline_out,
        } => {
            let rows = prediction::read_predictions(predictions)?;
            let seed = cli.seed.unwrap_or(0);
            let (curve, baseline) = pipeline::curves(&rows, seed)?;
            match out {
                Some(p) => checkpoint::write_atomic(p, curve.to_text().as_bytes())?,
                None => print!("{}", curve.to_text()),
            }
            if let Some(p) = baseline_out {
                checkpoint::write_atomic(p, baseline.to_text().as_bytes())?;
            }
        }
    }
    Ok(())
}
