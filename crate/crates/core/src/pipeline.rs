//! End-to-end orchestration shared by the command line and the tests:
//! prepared data on disk, the two training stages, prediction and reports.

use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::base_learner::{derive_seed, train_base, BasePrediction, EpochStats, Example, Trained};
use crate::checkpoint::UedklModel;
use crate::config::RunConfig;
use crate::dataset::{self, DatasetRecord, Item, Splits};
use crate::ensemble::{train_ensemble, EnsembleExample};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport, HufCurve, UncertaintyGroups};
use crate::prediction::{self, BaseCacheRow, LearnerOutput, PredictionRow};
use crate::prep::{self, EncodedPayload, Vocabulary};

/// Seed streams for Monte-Carlo prediction noise, one per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Train = 1,
    Val = 2,
    Test = 3,
    Unseen = 4,
    External = 5,
}

const ENSEMBLE_STREAM: u64 = 0xe5;

/// Splits plus the vocabulary and class table built from the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub config: RunConfig,
    pub classes: Vec<String>,
    pub vocab: Vocabulary,
    pub splits: Splits,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    classes: Vec<String>,
    unseen_classes: Vec<String>,
}

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_CACHE_FILE: &str = "base_train.jsonl";
pub const VAL_CACHE_FILE: &str = "base_val.jsonl";

impl PreparedData {
    pub fn build(records: &[DatasetRecord], config: &RunConfig) -> Result<Self> {
        let splits = dataset::split(records, &config.split, config.seed)?;
        let train_records: Vec<DatasetRecord> = splits
            .train
            .iter()
            .map(|i| DatasetRecord {
                payload: i.payload.clone(),
                label: i.label.clone(),
            })
            .collect();
        let classes = dataset::label_table(&train_records);
        if classes.len() < 2 {
            return Err(Error::config("need at least two trained classes"));
        }
        let t = &config.tokenizer;
        let seqs: Vec<_> = splits
            .train
            .iter()
            .map(|i| prep::prepare(&i.payload, t.mode, t.ngram_unit))
            .collect();
        let vocab = Vocabulary::build(&seqs, t.vocab_size, t.mode);
        info!(
            "prepared {} train / {} val / {} test / {} unseen, {} classes, vocabulary {}",
            splits.train.len(),
            splits.val.len(),
            splits.test.len(),
            splits.unseen.len(),
            classes.len(),
            vocab.len()
        );
        Ok(Self {
            config: config.clone(),
            classes,
            vocab,
            splits,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        crate::checkpoint::write_atomic(&dir.join(CONFIG_FILE), self.config.to_toml().as_bytes())?;
        let meta = Meta {
            classes: self.classes.clone(),
            unseen_classes: self.config.split.unseen.clone(),
        };
        crate::checkpoint::write_atomic(&dir.join("classes.json"), &serde_json::to_vec_pretty(&meta)?)?;
        crate::checkpoint::write_atomic(&dir.join("vocab.json"), &serde_json::to_vec(&self.vocab)?)?;
        for (name, items) in self.split_files() {
            prediction::write_jsonl(&dir.join(name), items)?;
        }
        Ok(())
    }

    fn split_files(&self) -> [(&'static str, &Vec<Item>); 4] {
        [
            ("train.jsonl", &self.splits.train),
            ("val.jsonl", &self.splits.val),
            ("test.jsonl", &self.splits.test),
            ("unseen.jsonl", &self.splits.unseen),
        ]
    }

    /// Loads a prepared directory. `config` replaces the stored config when given.
    pub fn load(dir: &Path, config: Option<RunConfig>) -> Result<Self> {
        let config = match config {
            Some(c) => c,
            None => RunConfig::load(&dir.join(CONFIG_FILE))?,
        };
        let meta: Meta = serde_json::from_slice(&std::fs::read(dir.join("classes.json"))?)?;
        let vocab: Vocabulary = serde_json::from_slice(&std::fs::read(dir.join("vocab.json"))?)?;
        let read = |name: &str| prediction::read_jsonl::<Item>(&dir.join(name));
        Ok(Self {
            config,
            classes: meta.classes,
            vocab,
            splits: Splits {
                train: read("train.jsonl")?,
                val: read("val.jsonl")?,
                test: read("test.jsonl")?,
                unseen: read("unseen.jsonl")?,
            },
        })
    }

    pub fn encode(&self, payload: &str) -> EncodedPayload {
        let t = &self.config.tokenizer;
        self.vocab.encode(&prep::prepare(payload, t.mode, t.ngram_unit), t.max_len)
    }

    pub fn examples(&self, items: &[Item]) -> Result<Vec<Example>> {
        items
            .iter()
            .map(|i| {
                let label = self
                    .classes
                    .iter()
                    .position(|c| *c == i.label)
                    .ok_or_else(|| Error::config(format!("label `{}` is not a trained class", i.label)))?;
                Ok(Example {
                    input: self.encode(&i.payload),
                    label,
                })
            })
            .collect()
    }
}

/// Stage-1 result: the model without ensemble and each learner's history.
pub struct Stage1 {
    pub model: UedklModel,
    pub histories: Vec<Vec<EpochStats>>,
    pub divergence: Option<String>,
}

/// Trains `config.ensemble.learners` base learners with seeds derived from
/// the master seed.
pub fn train_stage1(data: &PreparedData) -> Result<Stage1> {
    let cfg = &data.config;
    let base_cfg = cfg.base_learner(data.vocab.len(), data.classes.len());
    base_cfg.validate()?;
    let train = data.examples(&data.splits.train)?;
    let val = data.examples(&data.splits.val)?;
    let tc = cfg.base_training();
    let run = |h: usize| train_base(base_cfg, &train, &val, &tc, h, derive_seed(cfg.seed, h as u64));
    let ids: Vec<usize> = (0..cfg.ensemble.learners).collect();
    let results: Vec<Result<Trained<_>>> = if cfg.parallel {
        ids.par_iter().map(|&h| run(h)).collect()
    } else {
        ids.iter().map(|&h| run(h)).collect()
    };
    let mut learners = Vec::new();
    let mut histories = Vec::new();
    let mut divergence = None;
    for r in results {
        let t = r?;
        if divergence.is_none() {
            divergence = t.divergence;
        }
        histories.push(t.history);
        learners.push(t.model);
    }
    Ok(Stage1 {
        model: UedklModel {
            config: cfg.clone(),
            classes: data.classes.clone(),
            vocab: data.vocab.clone(),
            learners,
            ensemble: None,
        },
        histories,
        divergence,
    })
}

/// Every learner's prediction for every payload, indexed `[item][learner]`.
pub fn base_outputs(model: &UedklModel, payloads: &[EncodedPayload], stream: Stream) -> Result<Vec<Vec<BasePrediction>>> {
    let t = model.config.gp.mc_eval;
    let per_learner: Vec<Vec<BasePrediction>> = model
        .learners
        .par_iter()
        .map(|l| l.predict_all(payloads, t, derive_seed(derive_seed(l.seed, 0x707265), stream as u64)))
        .collect::<Result<_>>()?;
    Ok((0..payloads.len())
        .map(|i| per_learner.iter().map(|preds| preds[i].clone()).collect())
        .collect())
}

pub fn cache_rows(items: &[Item], examples: &[Example], outputs: &[Vec<BasePrediction>]) -> Vec<BaseCacheRow> {
    items
        .iter()
        .zip(examples)
        .zip(outputs)
        .map(|((item, ex), preds)| BaseCacheRow {
            id: item.id,
            label_index: ex.label,
            learners: preds.iter().map(LearnerOutput::from).collect(),
        })
        .collect()
}

pub fn ensemble_examples(rows: &[BaseCacheRow]) -> Result<Vec<EnsembleExample>> {
    rows.iter()
        .map(|r| {
            Ok(EnsembleExample {
                preds: r.learners.iter().map(|l| l.to_prediction()).collect::<Result<_>>()?,
                label: r.label_index,
            })
        })
        .collect()
}

/// Base outputs on the train and val splits, in cache form.
pub fn stage1_caches(model: &UedklModel, data: &PreparedData) -> Result<(Vec<BaseCacheRow>, Vec<BaseCacheRow>)> {
    let mut out = Vec::new();
    for (items, stream) in [(&data.splits.train, Stream::Train), (&data.splits.val, Stream::Val)] {
        let ex = data.examples(items)?;
        let payloads: Vec<EncodedPayload> = ex.iter().map(|e| e.input.clone()).collect();
        let outputs = base_outputs(model, &payloads, stream)?;
        out.push(cache_rows(items, &ex, &outputs));
    }
    let val = out.pop().unwrap();
    Ok((out.pop().unwrap(), val))
}

/// Trains the ensemble on cached base outputs and attaches it to `model`.
pub fn train_stage2(
    model: &mut UedklModel,
    train: &[BaseCacheRow],
    val: &[BaseCacheRow],
) -> Result<Trained<crate::ensemble::EnsembleParams>> {
    let cfg = &model.config;
    let trained = train_ensemble(
        cfg.ensemble_config(model.classes.len()),
        &ensemble_examples(train)?,
        &ensemble_examples(val)?,
        &cfg.ensemble_training(),
        derive_seed(cfg.seed, ENSEMBLE_STREAM),
    )?;
    model.ensemble = Some(trained.model.clone());
    Ok(trained)
}

/// Scores items with the full model. Labels outside the trained classes are
/// flagged unseen and numbered after the trained classes in sorted order.
pub fn predict_items(model: &UedklModel, items: &[Item], stream: Stream) -> Result<Vec<PredictionRow>> {
    let ensemble = model
        .ensemble
        .as_ref()
        .ok_or_else(|| Error::config("checkpoint has no ensemble; run train-ensemble first"))?;
    let mut unknown: Vec<&str> = items
        .iter()
        .map(|i| i.label.as_str())
        .filter(|l| !model.classes.iter().any(|c| c == l))
        .collect();
    unknown.sort_unstable();
    unknown.dedup();
    let payloads: Vec<EncodedPayload> = items.iter().map(|i| model.encode(&i.payload)).collect();
    let outputs = base_outputs(model, &payloads, stream)?;
    items
        .iter()
        .zip(outputs)
        .map(|(item, preds)| {
            let out = ensemble.predict(&preds)?;
            let (label_index, unseen) = match model.classes.iter().position(|c| *c == item.label) {
                Some(k) => (k, false),
                None => (
                    model.classes.len() + unknown.iter().position(|u| *u == item.label).unwrap(),
                    true,
                ),
            };
            Ok(PredictionRow {
                id: item.id,
                label: item.label.clone(),
                label_index,
                unseen,
                predicted: model.classes[out.label].clone(),
                predicted_index: out.label,
                scores: out.scores,
                variances: out.variances,
                uncertainty: out.uncertainty,
                learners: preds.iter().map(LearnerOutput::from).collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Metrics over items of trained classes only.
    pub report: EvalReport,
    pub groups: UncertaintyGroups,
}

pub fn evaluate_rows(rows: &[PredictionRow]) -> Result<Evaluation> {
    let classes = rows.first().map_or(0, |r| r.scores.len());
    let seen: Vec<&PredictionRow> = rows.iter().filter(|r| !r.unseen).collect();
    let labels: Vec<usize> = seen.iter().map(|r| r.label_index).collect();
    let preds: Vec<usize> = seen.iter().map(|r| r.predicted_index).collect();
    let report = metrics::compute_metrics(&labels, &preds, classes)?;
    let groups = metrics::uncertainty_groups(
        &rows.iter().map(|r| r.label_index).collect::<Vec<_>>(),
        &rows.iter().map(|r| r.predicted_index).collect::<Vec<_>>(),
        &rows.iter().map(|r| r.uncertainty).collect::<Vec<_>>(),
        &rows.iter().map(|r| r.unseen).collect::<Vec<_>>(),
    )?;
    Ok(Evaluation { report, groups })
}

/// Uncertainty-ordered curve and the random-order baseline over all rows.
pub fn curves(rows: &[PredictionRow], seed: u64) -> Result<(HufCurve, HufCurve)> {
    let labels: Vec<usize> = rows.iter().map(|r| r.label_index).collect();
    let preds: Vec<usize> = rows.iter().map(|r| r.predicted_index).collect();
    let u: Vec<f64> = rows.iter().map(|r| r.uncertainty).collect();
    Ok((
        metrics::huf_curve(&labels, &preds, &u)?,
        metrics::random_correction_baseline(&labels, &preds, seed)?,
    ))
}

pub fn report_text(e: &Evaluation) -> String {
    let r = &e.report;
    let mut s = String::new();
    for (name, v) in [
        ("accuracy", r.accuracy),
        ("precision_macro", r.precision_macro),
        ("recall_macro", r.recall_macro),
        ("f1_macro", r.f1_macro),
        ("precision_weighted", r.precision_weighted),
        ("f1_weighted", r.f1_weighted),
    ] {
        s.push_str(&format!("{name:<20} {v:.4}\n"));
    }
    for (name, g) in [
        ("correct", &e.groups.correct),
        ("incorrect", &e.groups.incorrect),
        ("unseen", &e.groups.unseen),
    ] {
        s.push_str(&format!(
            "u[{name:<9}] n={:<6} mean={:.6} median={:.6} q1={:.6} q3={:.6}\n",
            g.count, g.mean, g.median, g.q1, g.q3
        ));
    }
    s
}

/// Paths inside a prepared directory.
pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join(CHECKPOINT_FILE)
}
