//! Attention over base learners.
//!
//! Each learner's covariance is flattened into a key, each class's column of
//! base predictions becomes a query, and a softmax over learners gives one
//! weight per (learner, class). The combined score for a class is the
//! weighted sum of base predictions; its variance is the empirical variance
//! of the weighted, index-paired Monte-Carlo samples.

use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::base_learner::{argmax, derive_seed, BasePrediction, EpochStats, Trained};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::params::{normal_mat, ParamTensors};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub learners: usize,
    pub classes: usize,
    pub attn_dim: usize,
    /// Weight of the variance penalty.
    pub delta: f64,
    /// Weight of the parameter-norm penalty.
    pub zeta: f64,
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learners == 0 || self.classes < 2 || self.attn_dim == 0 {
            return Err(Error::config("ensemble needs learners >= 1, classes >= 2, attn_dim >= 1"));
        }
        if !(self.delta >= 0.0 && self.zeta >= 0.0) {
            return Err(Error::config("delta and zeta must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleParams {
    pub config: EnsembleConfig,
    /// `C^2 x d`
    pub wk: Mat,
    /// `1 x d`
    pub bk: Mat,
    /// `H x d`
    pub wq: Mat,
    /// `1 x d`
    pub bq: Mat,
}

impl ParamTensors for EnsembleParams {
    fn tensors(&self) -> Vec<(String, &Mat)> {
        vec![
            ("ensemble.wk".to_owned(), &self.wk),
            ("ensemble.bk".to_owned(), &self.bk),
            ("ensemble.wq".to_owned(), &self.wq),
            ("ensemble.bq".to_owned(), &self.bq),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        vec![&mut self.wk, &mut self.bk, &mut self.wq, &mut self.bq]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    pub scores: Vec<f64>,
    /// Per-class variance of the combined score.
    pub variances: Vec<f64>,
    /// Sum of `variances`.
    pub uncertainty: f64,
    /// `H x C`, columns sum to one.
    pub weights: Mat,
    pub label: usize,
}

/// `H x C` matrix of base mean predictions.
pub fn stack_means(preds: &[BasePrediction]) -> Mat {
    let c = preds[0].mean.len();
    Mat::from_shape_fn((preds.len(), c), |(h, k)| preds[h].mean[k])
}

/// `H x C^2`, each row a covariance flattened row-major.
pub fn stack_covariances(preds: &[BasePrediction]) -> Mat {
    let c = preds[0].mean.len();
    Mat::from_shape_fn((preds.len(), c * c), |(h, k)| preds[h].cov[[k / c, k % c]])
}

fn check_preds(preds: &[BasePrediction], cfg: &EnsembleConfig) -> Result<()> {
    if preds.len() != cfg.learners {
        return Err(Error::contract(format!(
            "expected {} base predictions, got {}",
            cfg.learners,
            preds.len()
        )));
    }
    let t = preds[0].samples.nrows();
    for p in preds {
        if p.mean.len() != cfg.classes || p.cov.dim() != (cfg.classes, cfg.classes) {
            return Err(Error::contract("base prediction class count mismatch"));
        }
        if p.samples.dim() != (t, cfg.classes) {
            return Err(Error::contract(format!(
                "sample counts differ across learners ({} vs {})",
                p.samples.nrows(),
                t
            )));
        }
    }
    Ok(())
}

impl EnsembleParams {
    pub fn init(config: EnsembleConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c2 = config.classes * config.classes;
        let d = config.attn_dim;
        let mut p = Self {
            config,
            wk: normal_mat(&mut rng, (c2, d), 1.0 / (c2 as f64).sqrt()),
            bk: Mat::zeros((1, d)),
            wq: normal_mat(&mut rng, (config.learners, d), 1.0 / (config.learners as f64).sqrt()),
            bq: Mat::zeros((1, d)),
        };
        p.round_to_f32();
        Ok(p)
    }

    pub fn from_tensors(config: EnsembleConfig, tensors: &[Mat]) -> Result<Self> {
        config.validate()?;
        let c2 = config.classes * config.classes;
        let d = config.attn_dim;
        let shapes = [(c2, d), (1, d), (config.learners, d), (1, d)];
        if tensors.len() != 4 || tensors.iter().zip(shapes).any(|(t, s)| t.dim() != s) {
            return Err(Error::config("ensemble tensor shapes do not match config"));
        }
        Ok(Self {
            config,
            wk: tensors[0].clone(),
            bk: tensors[1].clone(),
            wq: tensors[2].clone(),
            bq: tensors[3].clone(),
        })
    }

    /// Attention weights `H x C` for one payload.
    pub fn attention_weights(&self, means: &Mat, covs: &Mat) -> Mat {
        let d = self.config.attn_dim as f64;
        let keys = covs.dot(&self.wk) + &self.bk;
        let queries = means.t().dot(&self.wq) + &self.bq;
        let scores = keys.dot(&queries.t()) / d.sqrt();
        let mut alpha = scores;
        for mut col in alpha.columns_mut() {
            let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            col.mapv_inplace(|x| (x - max).exp());
            let s = col.sum();
            col.mapv_inplace(|x| x / s);
        }
        alpha
    }

    pub fn predict(&self, preds: &[BasePrediction]) -> Result<EnsemblePrediction> {
        check_preds(preds, &self.config)?;
        let means = stack_means(preds);
        let weights = self.attention_weights(&means, &stack_covariances(preds));
        let scores = combine(&means, &weights);
        let samples: Vec<&Mat> = preds.iter().map(|p| &p.samples).collect();
        let variances = ensemble_uncertainty(&weights, &samples)?;
        Ok(EnsemblePrediction {
            label: argmax(&scores),
            uncertainty: variances.iter().sum(),
            scores,
            variances,
            weights,
        })
    }

    fn bind(&self, tape: &mut Tape) -> [Var; 4] {
        [
            tape.param(self.wk.clone()),
            tape.param(self.bk.clone()),
            tape.param(self.wq.clone()),
            tape.param(self.bq.clone()),
        ]
    }

    /// Combined scores (`1 x C`) and per-class variance (`1 x C`) on the tape.
    fn forward_on_tape(&self, tape: &mut Tape, vars: &[Var; 4], preds: &[BasePrediction]) -> (Var, Var) {
        let [wk, bk, wq, bq] = *vars;
        let means = stack_means(preds);
        let u = tape.constant(means.clone());
        let ut = tape.constant(means.t().to_owned());
        let e = tape.constant(stack_covariances(preds));
        let keys = tape.matmul(e, wk);
        let keys = tape.add_row(keys, bk);
        let queries = tape.matmul(ut, wq);
        let queries = tape.add_row(queries, bq);
        let qt = tape.transpose(queries);
        let scores = tape.matmul(keys, qt);
        let scores = tape.scale(scores, 1.0 / (self.config.attn_dim as f64).sqrt());
        let st = tape.transpose(scores);
        let at = tape.softmax_rows(st);
        let alpha = tape.transpose(at);
        let weighted = tape.mul(alpha, u);
        let scores = tape.sum_cols(weighted);

        let t = preds[0].samples.nrows();
        let mut path: Option<Var> = None;
        for (h, p) in preds.iter().enumerate() {
            let dev = deviations(&p.samples);
            let row = tape.gather(alpha, &[h]);
            let row = tape.tile_rows(row, t);
            let term = tape.mul_const(row, dev);
            path = Some(match path {
                Some(acc) => tape.add(acc, term),
                None => term,
            });
        }
        let sq = tape.square(path.expect("at least one learner"));
        let var = tape.sum_cols(sq);
        let var = tape.scale(var, 1.0 / t as f64);
        (scores, var)
    }

    /// `L2` on a batch and gradients in `tensors()` order.
    pub fn loss_and_grads(
        &self,
        batch: &[&[BasePrediction]],
        labels: &[usize],
        with_grads: bool,
    ) -> Result<(f64, Vec<Mat>)> {
        if batch.is_empty() || batch.len() != labels.len() {
            return Err(Error::contract("ensemble loss needs a non-empty batch with one label each"));
        }
        for (p, &y) in batch.iter().zip(labels) {
            check_preds(p, &self.config)?;
            if y >= self.config.classes {
                return Err(Error::contract(format!("label {y} out of range")));
            }
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let (scores, vars_c): (Vec<Var>, Vec<Var>) = batch
            .iter()
            .map(|p| self.forward_on_tape(&mut tape, &vars, p))
            .unzip();
        let b = batch.len() as f64;
        let s = tape.concat_rows(&scores);
        let logp = tape.log_softmax_rows(s);
        let picked = tape.pick(logp, labels);
        let ll = tape.sum_all(picked);
        let ce = tape.scale(ll, -1.0 / b);
        let v = tape.concat_rows(&vars_c);
        let vsum = tape.sum_all(v);
        let penalty = tape.scale(vsum, self.config.delta / b);
        let mut loss = tape.add(ce, penalty);
        if self.config.zeta > 0.0 {
            let sq: Vec<Var> = vars
                .iter()
                .map(|&p| {
                    let s = tape.square(p);
                    tape.sum_all(s)
                })
                .collect();
            let mut total = sq[0];
            for &s in &sq[1..] {
                total = tape.add(total, s);
            }
            let norm = tape.sqrt(total);
            let reg = tape.scale(norm, self.config.zeta);
            loss = tape.add(loss, reg);
        }
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Divergence {
                epoch: 0,
                batch: 0,
                detail: format!("non-finite ensemble loss {value}"),
            });
        }
        let grads = if with_grads {
            let g = tape.backward(loss);
            vars.iter()
                .map(|&v| g.get_or_zeros(v, tape.value(v).dim()))
                .collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    }

    pub fn ensemble_loss(&self, batch: &[&[BasePrediction]], labels: &[usize]) -> Result<f64> {
        self.loss_and_grads(batch, labels, false).map(|(l, _)| l)
    }
}

fn deviations(samples: &Mat) -> Mat {
    let t = samples.nrows() as f64;
    let mean = samples.sum_axis(ndarray::Axis(0)) / t;
    samples - &mean
}

/// `y^c = sum_h alpha[h, c] * U[h, c]`.
pub fn combine(means: &Mat, alpha: &Mat) -> Vec<f64> {
    (means * alpha).sum_axis(ndarray::Axis(0)).to_vec()
}

/// Per-class variance of the combined score from index-paired samples:
/// `sum_h a_h^2 var_h + 2 sum_{h<h'} a_h a_h' cov_hh'`, floored at zero.
pub fn ensemble_uncertainty(alpha: &Mat, samples: &[&Mat]) -> Result<Vec<f64>> {
    let (h_count, c) = alpha.dim();
    if samples.len() != h_count {
        return Err(Error::contract("one sample matrix per learner"));
    }
    let t = samples[0].nrows();
    if samples.iter().any(|s| s.dim() != (t, c)) {
        return Err(Error::contract("sample counts differ across learners"));
    }
    let devs: Vec<Mat> = samples.iter().map(|s| deviations(s)).collect();
    let cov = |a: &Mat, b: &Mat, k: usize| a.column(k).dot(&b.column(k)) / t as f64;
    Ok((0..c)
        .map(|k| {
            let mut v = 0.0;
            for h in 0..h_count {
                v += alpha[[h, k]].powi(2) * cov(&devs[h], &devs[h], k);
                for g in h + 1..h_count {
                    v += 2.0 * alpha[[h, k]] * alpha[[g, k]] * cov(&devs[h], &devs[g], k);
                }
            }
            v.max(0.0)
        })
        .collect())
}

/// One training item: the frozen base predictions and the label.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleExample {
    pub preds: Vec<BasePrediction>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for EnsembleTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 30,
        }
    }
}

fn evaluate(params: &EnsembleParams, data: &[EnsembleExample]) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let batch: Vec<&[BasePrediction]> = data.iter().map(|e| e.preds.as_slice()).collect();
    let labels: Vec<usize> = data.iter().map(|e| e.label).collect();
    let loss = params.ensemble_loss(&batch, &labels)?;
    let mut correct = 0usize;
    for e in data {
        if params.predict(&e.preds)?.label == e.label {
            correct += 1;
        }
    }
    Ok((loss, correct as f64 / data.len() as f64))
}

/// Trains the attention parameters on frozen base predictions.
pub fn train_ensemble(
    config: EnsembleConfig,
    train: &[EnsembleExample],
    val: &[EnsembleExample],
    tc: &EnsembleTrainConfig,
    seed: u64,
) -> Result<Trained<EnsembleParams>> {
    if train.is_empty() {
        return Err(Error::config("empty training split"));
    }
    if tc.batch_size == 0 {
        return Err(Error::config("batch size must be >= 1"));
    }
    let mut params = EnsembleParams::init(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x656e_73));
    let mut adam = AdamState::new(
        AdamConfig::with_learning_rate(tc.learning_rate),
        params.tensors().into_iter().map(|(_, t)| t),
    );
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Vec<Mat>)> = None;
    let mut divergence = None;

    'epochs: for epoch in 0..tc.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(tc.batch_size).enumerate() {
            let batch: Vec<&[BasePrediction]> = chunk.iter().map(|&i| train[i].preds.as_slice()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].label).collect();
            let step = params.loss_and_grads(&batch, &labels, true).and_then(|(loss, grads)| {
                adam.step(&mut params.tensors_mut(), &grads)?;
                Ok(loss)
            });
            match step {
                Ok(loss) => {
                    total += loss;
                    batches += 1;
                }
                Err(e @ (Error::Divergence { .. } | Error::NonFiniteGradient(_))) => {
                    let detail = format!("ensemble epoch {epoch}, batch {bi}: {e}");
                    log::warn!("{detail}");
                    divergence = Some(detail);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let (val_loss, val_accuracy) = evaluate(&params, val)?;
        let stats = EpochStats {
            epoch,
            train_loss: total / batches.max(1) as f64,
            val_loss,
            val_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "ensemble epoch {epoch}: train {:.4} val {:.4} acc {:.4}",
            stats.train_loss, stats.val_loss, stats.val_accuracy
        );
        history.push(stats);
        let score = if val.is_empty() { stats.train_loss } else { val_loss };
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, epoch, params.snapshot()));
        }
    }
    let best_epoch = match best {
        Some((_, epoch, snap)) => {
            params.load_snapshot(&snap);
            epoch
        }
        None => 0,
    };
    params.round_to_f32();
    Ok(Trained {
        model: params,
        history,
        best_epoch,
        divergence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{finite_diff_check, GradCheckOptions};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg(h: usize, c: usize) -> EnsembleConfig {
        EnsembleConfig {
            learners: h,
            classes: c,
            attn_dim: 4,
            delta: 0.5,
            zeta: 0.1,
        }
    }

    fn random_pred(rng: &mut impl Rng, t: usize, c: usize, sharp: f64) -> BasePrediction {
        let samples = Mat::from_shape_fn((t, c), |_| (sharp * rng.random::<f64>()).exp());
        let samples = &samples / &samples.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
        BasePrediction::from_samples(samples)
    }

    fn random_item(rng: &mut impl Rng, h: usize, c: usize, t: usize) -> Vec<BasePrediction> {
        (0..h).map(|_| random_pred(rng, t, c, 3.0)).collect()
    }

    #[test]
    fn combine_hand_example() {
        let u = array![[0.9, 0.1], [0.5, 0.5]];
        let a = array![[0.8, 0.3], [0.2, 0.7]];
        let y = combine(&u, &a);
        assert!((y[0] - 0.82).abs() < 1e-15 && (y[1] - 0.38).abs() < 1e-15);
    }

    #[test]
    fn attention_matches_transcription() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = EnsembleParams::init(cfg(3, 2), 7).unwrap();
        let p = EnsembleParams {
            bk: normal_mat(&mut rng, (1, 4), 1.0),
            bq: normal_mat(&mut rng, (1, 4), 1.0),
            ..p
        };
        let preds = random_item(&mut rng, 3, 2, 10);
        let alpha = p.attention_weights(&stack_means(&preds), &stack_covariances(&preds));
        for c in 0..2 {
            let q: Vec<f64> = (0..4)
                .map(|j| p.bq[[0, j]] + (0..3).map(|h| preds[h].mean[c] * p.wq[[h, j]]).sum::<f64>())
                .collect();
            let s: Vec<f64> = (0..3)
                .map(|h| {
                    let flat: Vec<f64> = preds[h].cov.iter().copied().collect();
                    let k: Vec<f64> = (0..4)
                        .map(|j| p.bk[[0, j]] + (0..4).map(|i| flat[i] * p.wk[[i, j]]).sum::<f64>())
                        .collect();
                    k.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / 2.0
                })
                .collect();
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            for h in 0..3 {
                assert!((alpha[[h, c]] - s[h].exp() / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_learners_get_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let one = random_pred(&mut rng, 8, 3, 2.0);
        let p = EnsembleParams::init(cfg(4, 3), 1).unwrap();
        let out = p.predict(&vec![one.clone(); 4]).unwrap();
        assert!(out.weights.iter().all(|&a| (a - 0.25).abs() < 1e-12));
        for c in 0..3 {
            assert!((out.scores[c] - one.mean[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_learner_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = EnsembleParams::init(cfg(1, 3), 4).unwrap();
        let one = random_pred(&mut rng, 16, 3, 2.0);
        let out = p.predict(std::slice::from_ref(&one)).unwrap();
        assert!(out.weights.iter().all(|&a| a == 1.0));
        assert_eq!(out.scores, one.mean);
        assert_eq!(out.label, one.argmax());
        for c in 0..3 {
            assert!((out.variances[c] - one.cov[[c, c]]).abs() < 1e-15);
        }
    }

    #[test]
    fn independent_learners_cross_terms_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = 100_000;
        let preds: Vec<BasePrediction> = (0..3).map(|_| random_pred(&mut rng, t, 2, 2.0)).collect();
        let alpha = array![[0.5, 0.2], [0.3, 0.3], [0.2, 0.5]];
        let samples: Vec<&Mat> = preds.iter().map(|p| &p.samples).collect();
        let v = ensemble_uncertainty(&alpha, &samples).unwrap();
        for c in 0..2 {
            let diag: f64 = (0..3).map(|h| alpha[[h, c]].powi(2) * preds[h].cov[[c, c]]).sum();
            assert!((v[c] - diag).abs() < 0.05 * diag, "{} vs {diag}", v[c]);
        }
    }

    #[test]
    fn mismatched_sample_counts_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_pred(&mut rng, 4, 2, 1.0);
        let b = random_pred(&mut rng, 5, 2, 1.0);
        let alpha = Mat::from_elem((2, 2), 0.5);
        assert!(ensemble_uncertainty(&alpha, &[&a.samples, &b.samples]).is_err());
        let p = EnsembleParams::init(cfg(2, 2), 0).unwrap();
        assert!(matches!(p.predict(&[a, b]), Err(Error::Contract(_))));
    }

    #[test]
    fn loss_reduces_to_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let items: Vec<Vec<BasePrediction>> = (0..3).map(|_| random_item(&mut rng, 2, 3, 6)).collect();
        let labels = [0, 2, 1];
        let mut p = EnsembleParams::init(cfg(2, 3), 9).unwrap();
        p.config.delta = 0.0;
        p.config.zeta = 0.0;
        let batch: Vec<&[BasePrediction]> = items.iter().map(|v| v.as_slice()).collect();
        let loss = p.ensemble_loss(&batch, &labels).unwrap();
        let ce: f64 = items
            .iter()
            .zip(labels)
            .map(|(it, y)| {
                let s = p.predict(it).unwrap().scores;
                let lse = s.iter().map(|v| v.exp()).sum::<f64>().ln();
                lse - s[y]
            })
            .sum::<f64>()
            / 3.0;
        assert!((loss - ce).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_transcription() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let items: Vec<Vec<BasePrediction>> = (0..3).map(|_| random_item(&mut rng, 3, 2, 8)).collect();
        let labels = [1, 0, 1];
        let p = EnsembleParams::init(cfg(3, 2), 3).unwrap();
        let batch: Vec<&[BasePrediction]> = items.iter().map(|v| v.as_slice()).collect();
        let loss = p.ensemble_loss(&batch, &labels).unwrap();
        let mut ce = 0.0;
        let mut var = 0.0;
        for (it, &y) in items.iter().zip(&labels) {
            let o = p.predict(it).unwrap();
            let lse = o.scores.iter().map(|v| v.exp()).sum::<f64>().ln();
            ce += lse - o.scores[y];
            var += o.uncertainty;
        }
        let norm = p.snapshot().iter().map(|t| t.mapv(|x| x * x).sum()).sum::<f64>().sqrt();
        let expected = ce / 3.0 + p.config.delta * var / 3.0 + p.config.zeta * norm;
        assert!((loss - expected).abs() < 1e-10, "{loss} vs {expected}");
    }

    #[test]
    fn variance_penalty_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let items: Vec<Vec<BasePrediction>> = (0..2).map(|_| random_item(&mut rng, 2, 2, 8)).collect();
        let labels = [0, 1];
        let p = EnsembleParams::init(cfg(2, 2), 3).unwrap();
        // Scaling deviations by sqrt(2) doubles every variance and leaves the means alone.
        let doubled: Vec<Vec<BasePrediction>> = items
            .iter()
            .map(|it| {
                it.iter()
                    .map(|bp| {
                        let mean = ndarray::Array1::from(bp.mean.clone());
                        let s = (&bp.samples - &mean) * 2f64.sqrt() + &mean;
                        let mut out = BasePrediction::from_samples(s);
                        out.cov = bp.cov.clone();
                        out.mean = bp.mean.clone();
                        out
                    })
                    .collect()
            })
            .collect();
        let b1: Vec<&[BasePrediction]> = items.iter().map(|v| v.as_slice()).collect();
        let b2: Vec<&[BasePrediction]> = doubled.iter().map(|v| v.as_slice()).collect();
        let l1 = p.ensemble_loss(&b1, &labels).unwrap();
        let l2 = p.ensemble_loss(&b2, &labels).unwrap();
        let sigma: f64 = items.iter().map(|it| p.predict(it).unwrap().uncertainty).sum();
        assert!(((l2 - l1) - p.config.delta * sigma / 2.0).abs() < 1e-10);
    }

    #[test]
    fn gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let items: Vec<Vec<BasePrediction>> = (0..4).map(|_| random_item(&mut rng, 3, 3, 5)).collect();
        let labels = [0, 1, 2, 1];
        let mut p = EnsembleParams::init(cfg(3, 3), 2).unwrap();
        p.bk = normal_mat(&mut rng, (1, 4), 0.5);
        p.bq = normal_mat(&mut rng, (1, 4), 0.5);
        let batch: Vec<&[BasePrediction]> = items.iter().map(|v| v.as_slice()).collect();
        let (_, grads) = p.loss_and_grads(&batch, &labels, true).unwrap();
        let loss = |ts: &[Mat]| {
            EnsembleParams::from_tensors(p.config, ts)
                .unwrap()
                .ensemble_loss(&batch, &labels)
                .unwrap()
        };
        let r = finite_diff_check(loss, &p.snapshot(), &grads, GradCheckOptions::default());
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    fn oracle_corpus(n: usize, seed: u64) -> Vec<EnsembleExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let y = rng.random_range(0..3);
                let mut preds = vec![];
                // Learner 0 is confident and right.
                let s = Mat::from_shape_fn((8, 3), |(_, c)| {
                    if c == y {
                        0.9 + 0.01 * rng.random::<f64>()
                    } else {
                        0.04
                    }
                });
                preds.push(BasePrediction::from_samples(s));
                for _ in 1..3 {
                    preds.push(random_pred(&mut rng, 8, 3, 4.0));
                }
                EnsembleExample { preds, label: y }
            })
            .collect()
    }

    #[test]
    fn attention_concentrates_on_reliable_learner() {
        let train = oracle_corpus(300, 1);
        let val = oracle_corpus(100, 2);
        let tc = EnsembleTrainConfig {
            learning_rate: 0.05,
            batch_size: 32,
            epochs: 20,
        };
        let c = EnsembleConfig {
            learners: 3,
            classes: 3,
            attn_dim: 8,
            delta: 0.001,
            zeta: 1e-4,
        };
        let trained = train_ensemble(c, &train, &val, &tc, 11).unwrap();
        let mean_w: f64 = val
            .iter()
            .map(|e| trained.model.predict(&e.preds).unwrap().weights.row(0).mean().unwrap())
            .sum::<f64>()
            / val.len() as f64;
        assert!(mean_w > 1.0 / 3.0 + 0.1, "{mean_w}");
        let acc = trained.history[trained.best_epoch].val_accuracy;
        assert!(acc >= 0.99, "{acc}");
        let again = train_ensemble(c, &train, &val, &tc, 11).unwrap();
        assert_eq!(again.model, trained.model);
    }

    proptest! {
        #[test]
        fn weights_are_distributions_and_scores_convex(seed in 0u64..500, h in 1usize..5, c in 2usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let preds = random_item(&mut rng, h, c, 6);
            let p = EnsembleParams::init(cfg(h, c), seed).unwrap();
            let out = p.predict(&preds).unwrap();
            for k in 0..c {
                let col = out.weights.column(k);
                prop_assert!((col.sum() - 1.0).abs() < 1e-9);
                prop_assert!(col.iter().all(|&a| a >= 0.0));
                let lo = preds.iter().map(|q| q.mean[k]).fold(f64::INFINITY, f64::min);
                let hi = preds.iter().map(|q| q.mean[k]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out.scores[k] >= lo - 1e-12 && out.scores[k] <= hi + 1e-12);
                prop_assert!(out.variances[k] >= 0.0);
            }
        }

        #[test]
        fn uncertainty_is_variance_of_weighted_paths(seed in 0u64..500, h in 1usize..5, t in 2usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let preds = random_item(&mut rng, h, 3, t);
            let p = EnsembleParams::init(cfg(h, 3), seed).unwrap();
            let out = p.predict(&preds).unwrap();
            for k in 0..3 {
                let paths: Vec<f64> = (0..t)
                    .map(|s| (0..h).map(|j| out.weights[[j, k]] * preds[j].samples[[s, k]]).sum())
                    .collect();
                let m = paths.iter().sum::<f64>() / t as f64;
                let direct = paths.iter().map(|x| (x - m).powi(2)).sum::<f64>() / t as f64;
                prop_assert!((out.variances[k] - direct).abs() < 1e-12);
            }
        }
    }
}
