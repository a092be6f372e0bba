//! Classification metrics, the high-uncertainty-ratio / F-score curve and
//! uncertainty summaries by outcome group.

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base_learner::derive_seed;
use crate::error::{Error, Result};

/// Number of split points on the curve (the ratio-0 point is extra).
pub const CURVE_SPLITS: usize = 20;
pub const BASELINE_SEEDS: u64 = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `confusion[true][pred]`
    pub confusion: Vec<Vec<u64>>,
    pub accuracy: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    pub precision_weighted: f64,
    pub f1_weighted: f64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Standard multiclass metrics over classes `0..classes`.
pub fn compute_metrics(labels: &[usize], preds: &[usize], classes: usize) -> Result<EvalReport> {
    let report = metrics_quiet(labels, preds, classes)?;
    for c in 0..classes {
        let col: u64 = report.confusion.iter().map(|r| r[c]).sum();
        let row: u64 = report.confusion[c].iter().sum();
        if col == 0 || row == 0 {
            warn!("class {c}: zero denominator in precision or recall, counted as 0");
        }
    }
    Ok(report)
}

fn metrics_quiet(labels: &[usize], preds: &[usize], classes: usize) -> Result<EvalReport> {
    if labels.len() != preds.len() {
        return Err(Error::contract(format!(
            "{} labels vs {} predictions",
            labels.len(),
            preds.len()
        )));
    }
    if let Some(&bad) = labels.iter().chain(preds).find(|&&x| x >= classes) {
        return Err(Error::contract(format!("class index {bad} >= {classes}")));
    }
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (&y, &p) in labels.iter().zip(preds) {
        confusion[y][p] += 1;
    }
    let n = labels.len() as u64;
    let mut out = EvalReport {
        accuracy: ratio((0..classes).map(|c| confusion[c][c]).sum(), n).unwrap_or(0.0),
        confusion,
        precision_macro: 0.0,
        recall_macro: 0.0,
        f1_macro: 0.0,
        precision_weighted: 0.0,
        f1_weighted: 0.0,
    };
    for c in 0..classes {
        let tp = out.confusion[c][c];
        let support: u64 = out.confusion[c].iter().sum();
        let predicted: u64 = out.confusion.iter().map(|r| r[c]).sum();
        let p = ratio(tp, predicted).unwrap_or(0.0);
        let r = ratio(tp, support).unwrap_or(0.0);
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        out.precision_macro += p / classes as f64;
        out.recall_macro += r / classes as f64;
        out.f1_macro += f / classes as f64;
        out.precision_weighted += support as f64 * p;
        out.f1_weighted += support as f64 * f;
    }
    if n > 0 {
        out.precision_weighted /= n as f64;
        out.f1_weighted /= n as f64;
    }
    Ok(out)
}

fn class_span(labels: &[usize], preds: &[usize]) -> usize {
    labels.iter().chain(preds).max().map_or(1, |m| m + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Fraction of items handed to (and corrected by) an analyst.
    pub ratio: f64,
    pub f_weighted: f64,
    /// Items with uncertainty strictly above this were corrected.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HufCurve {
    pub points: Vec<CurvePoint>,
}

impl HufCurve {
    /// Two-column `ratio f_weighted` text.
    pub fn to_text(&self) -> String {
        self.points
            .iter()
            .map(|p| format!("{:.6} {:.6}\n", p.ratio, p.f_weighted))
            .collect()
    }
}

/// Rank of the `p`-th split point among `n` items sorted descending.
pub fn split_rank(p: usize, n: usize) -> usize {
    (p * n).div_ceil(CURVE_SPLITS)
}

fn weighted_f(labels: &[usize], preds: &[usize], classes: usize) -> f64 {
    metrics_quiet(labels, preds, classes)
        .expect("indices checked by caller")
        .f1_weighted
}

/// Sweeps thresholds from the most to the least uncertain item. At each
/// threshold every item with uncertainty above it gets its true label.
pub fn huf_curve(labels: &[usize], preds: &[usize], uncertainties: &[f64]) -> Result<HufCurve> {
    let n = labels.len();
    if preds.len() != n || uncertainties.len() != n {
        return Err(Error::contract("labels, predictions and uncertainties differ in length"));
    }
    if n == 0 {
        return Err(Error::contract("empty evaluation set"));
    }
    if uncertainties.iter().any(|u| !u.is_finite()) {
        return Err(Error::contract("non-finite uncertainty"));
    }
    let classes = class_span(labels, preds);
    let mut sorted = uncertainties.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let thresholds = std::iter::once(sorted[0]).chain((1..=CURVE_SPLITS).map(|p| {
        let k = split_rank(p, n);
        if k >= n {
            f64::NEG_INFINITY
        } else {
            sorted[k]
        }
    }));
    let points = thresholds
        .map(|th| {
            let mut corrected = preds.to_vec();
            let mut handled = 0usize;
            for i in 0..n {
                if uncertainties[i] > th {
                    corrected[i] = labels[i];
                    handled += 1;
                }
            }
            CurvePoint {
                ratio: handled as f64 / n as f64,
                f_weighted: weighted_f(labels, &corrected, classes),
                threshold: th,
            }
        })
        .collect();
    Ok(HufCurve { points })
}

/// The same sweep with items handled in random order, averaged over
/// [`BASELINE_SEEDS`] permutations.
pub fn random_correction_baseline(labels: &[usize], preds: &[usize], seed: u64) -> Result<HufCurve> {
    let n = labels.len();
    if preds.len() != n || n == 0 {
        return Err(Error::contract("labels and predictions must be non-empty and equal length"));
    }
    let classes = class_span(labels, preds);
    let mut f = vec![0.0; CURVE_SPLITS + 1];
    for s in 0..BASELINE_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, s));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for (p, acc) in f.iter_mut().enumerate() {
            let k = if p == 0 { 0 } else { split_rank(p, n) };
            let mut corrected = preds.to_vec();
            for &i in &order[..k] {
                corrected[i] = labels[i];
            }
            *acc += weighted_f(labels, &corrected, classes) / BASELINE_SEEDS as f64;
        }
    }
    Ok(HufCurve {
        points: f
            .into_iter()
            .enumerate()
            .map(|(p, f_weighted)| CurvePoint {
                ratio: if p == 0 { 0.0 } else { split_rank(p, n) as f64 / n as f64 },
                f_weighted,
                threshold: f64::NAN,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let count = v.len();
        let mean = if count == 0 { f64::NAN } else { v.iter().sum::<f64>() / count as f64 };
        Self {
            count,
            mean,
            median: quantile(&v, 0.5),
            q1: quantile(&v, 0.25),
            q3: quantile(&v, 0.75),
        }
    }
}

/// Linear-interpolation quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        n => {
            let pos = q * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyGroups {
    pub correct: Summary,
    pub incorrect: Summary,
    pub unseen: Summary,
}

/// Splits uncertainties into correct, incorrect and unseen-class groups.
pub fn uncertainty_groups(
    labels: &[usize],
    preds: &[usize],
    uncertainties: &[f64],
    unseen: &[bool],
) -> Result<UncertaintyGroups> {
    let n = labels.len();
    if preds.len() != n || uncertainties.len() != n || unseen.len() != n {
        return Err(Error::contract("group inputs differ in length"));
    }
    let mut groups: [Vec<f64>; 3] = Default::default();
    for i in 0..n {
        let g = if unseen[i] {
            2
        } else if labels[i] == preds[i] {
            0
        } else {
            1
        };
        groups[g].push(uncertainties[i]);
    }
    Ok(UncertaintyGroups {
        correct: Summary::of(&groups[0]),
        incorrect: Summary::of(&groups[1]),
        unseen: Summary::of(&groups[2]),
    })
}
