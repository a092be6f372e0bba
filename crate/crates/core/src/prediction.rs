//! JSON-lines prediction files and the per-learner caches handed from
//! base-learner training to ensemble training.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::base_learner::BasePrediction;
use crate::error::{Error, Result};

/// One base learner's output for one payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerOutput {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub samples: Vec<Vec<f64>>,
}

fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(rows: &[Vec<f64>], cols: usize) -> Result<Mat> {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::contract("ragged matrix in prediction file"));
    }
    Ok(Mat::from_shape_vec((rows.len(), cols), flat).expect("shape checked"))
}

impl From<&BasePrediction> for LearnerOutput {
    fn from(p: &BasePrediction) -> Self {
        Self {
            mean: p.mean.clone(),
            cov: to_rows(&p.cov),
            samples: to_rows(&p.samples),
        }
    }
}

impl LearnerOutput {
    pub fn to_prediction(&self) -> Result<BasePrediction> {
        let c = self.mean.len();
        Ok(BasePrediction {
            mean: self.mean.clone(),
            cov: from_rows(&self.cov, c)?,
            samples: from_rows(&self.samples, c)?,
        })
    }
}

/// Cached base-learner outputs for one training or validation item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseCacheRow {
    pub id: usize,
    pub label_index: usize,
    pub learners: Vec<LearnerOutput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: usize,
    pub label: String,
    /// Trained classes come first; labels outside the trained set are
    /// numbered after them.
    pub label_index: usize,
    pub unseen: bool,
    pub scores: Vec<f64>,
    pub variances: Vec<f64>,
    pub uncertainty: f64,
    pub predicted: String,
    pub predicted_index: usize,
    pub learners: Vec<LearnerOutput>,
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut out = BufWriter::new(File::create(&tmp)?);
        for r in rows {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::Dataset {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Dataset {
            path: path.to_path_buf(),
            detail: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

/// Reads a prediction file and checks that every row has the same class count
/// and that `uncertainty` is the sum of `variances`.
pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let rows: Vec<PredictionRow> = read_jsonl(path)?;
    if let Some(first) = rows.first() {
        let c = first.scores.len();
        for r in &rows {
            if r.scores.len() != c || r.variances.len() != c {
                return Err(Error::Dataset {
                    path: path.to_path_buf(),
                    detail: format!("row {}: class count differs from first row", r.id),
                });
            }
            if r.variances.iter().sum::<f64>() != r.uncertainty {
                return Err(Error::Dataset {
                    path: path.to_path_buf(),
                    detail: format!("row {}: uncertainty is not the sum of variances", r.id),
                });
            }
        }
    }
    Ok(rows)
}
