//! One deep-kernel-learning classifier: encoder, GP layer and a Monte-Carlo
//! softmax head.
//!
//! For a payload the GP layer yields per-unit predictive moments. `T` draws
//! `f^(t) = mu + sqrt(v) * zeta^(t)` are pushed through `softmax(f^(t) W_s)`;
//! the mean of those probability vectors is the prediction and their
//! population covariance (1/T normalization) is the uncertainty handed to the
//! ensemble.
//!
//! Training minimizes the negated evidence lower bound
//! `KL - (N / |B|) * sum_batch mean_t log softmax(f^(t) W_s)[y]`
//! with Adam, keeping the parameters with the lowest validation loss.

use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::encoder::{EncoderConfig, EncoderParams, EncoderVars};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::params::{normal_mat, ParamTensors};
use crate::prep::EncodedPayload;
use crate::svgp::{self, GpConfig, GpLayerParams, GpVars};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseLearnerConfig {
    pub encoder: EncoderConfig,
    pub gp: GpConfig,
    pub classes: usize,
}

impl BaseLearnerConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.gp.validate()?;
        if self.classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Monte-Carlo samples per payload during training.
    pub mc_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 50,
            mc_samples: 16,
        }
    }
}

/// An encoded payload with its class index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub input: EncodedPayload,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseLearnerModel {
    pub config: BaseLearnerConfig,
    pub learner_id: usize,
    pub seed: u64,
    pub encoder: EncoderParams,
    pub gp: GpLayerParams,
    /// `W_s`, stored `J x C`.
    pub head: Mat,
}

impl ParamTensors for BaseLearnerModel {
    fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> = self
            .encoder
            .tensors()
            .into_iter()
            .map(|(n, t)| (format!("encoder.{n}"), t))
            .collect();
        out.extend(self.gp.tensors());
        out.push(("head.w".to_owned(), &self.head));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.gp.tensors_mut());
        out.push(&mut self.head);
        out
    }
}

/// Tape handles for a bound model; `all` follows `tensors()` order.
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub gp: GpVars,
    pub head: Var,
    pub all: Vec<Var>,
}

/// Mean prediction and uncertainty of one base learner for one payload.
#[derive(Debug, Clone, PartialEq)]
pub struct BasePrediction {
    /// Mean class probabilities, length C.
    pub mean: Vec<f64>,
    /// Population covariance of the sampled probability vectors, `C x C`.
    pub cov: Mat,
    /// The sampled probability vectors, `T x C`.
    pub samples: Mat,
}

impl BasePrediction {
    /// Mean and 1/T covariance of `T x C` probability samples.
    pub fn from_samples(samples: Mat) -> Self {
        let (t, c) = samples.dim();
        let mean: Vec<f64> = (0..c)
            .map(|k| samples.column(k).sum() / t as f64)
            .collect();
        let mut cov = Mat::zeros((c, c));
        for i in 0..c {
            for j in i..c {
                let v = (0..t)
                    .map(|s| (samples[[s, i]] - mean[i]) * (samples[[s, j]] - mean[j]))
                    .sum::<f64>()
                    / t as f64;
                cov[[i, j]] = v;
                cov[[j, i]] = v;
            }
        }
        Self { mean, cov, samples }
    }

    /// Per-class variances, the diagonal of `cov`.
    pub fn variances(&self) -> Vec<f64> {
        (0..self.cov.nrows()).map(|i| self.cov[[i, i]]).collect()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.mean)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let s = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    out
}

/// Deterministic per-stream seed derivation (SplitMix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl BaseLearnerModel {
    /// Random initialization. Inducing locations are the initial encoder's
    /// representations of `config.gp.inducing` payloads drawn from
    /// `inducing_source`.
    pub fn init(
        config: BaseLearnerConfig,
        learner_id: usize,
        seed: u64,
        inducing_source: &[EncodedPayload],
    ) -> Result<Self> {
        config.validate()?;
        if inducing_source.is_empty() {
            return Err(Error::config("no payloads to initialize inducing points from"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = EncoderParams::init(config.encoder, &mut rng)?;
        encoder.round_to_f32();
        let m = config.gp.inducing;
        let picks: Vec<usize> = if inducing_source.len() >= m {
            rand::seq::index::sample(&mut rng, inducing_source.len(), m).into_vec()
        } else {
            (0..m).map(|_| rng.random_range(0..inducing_source.len())).collect()
        };
        let chosen: Vec<&EncodedPayload> = picks.iter().map(|&i| &inducing_source[i]).collect();
        let mut inducing = representations(&encoder, &chosen)?;
        // Break exact duplicates so K_ZZ stays well conditioned.
        inducing += &normal_mat(&mut rng, inducing.dim(), 1e-3);
        let gp = GpLayerParams::init(config.gp, inducing, &mut rng)?;
        let head = normal_mat(
            &mut rng,
            (config.gp.units, config.classes),
            (1.0 / config.gp.units as f64).sqrt(),
        );
        let mut model = Self {
            config,
            learner_id,
            seed,
            encoder,
            gp,
            head,
        };
        model.round_to_f32();
        Ok(model)
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        let encoder = self.encoder.bind(tape);
        let gp = self.gp.bind(tape);
        let head = tape.param(self.head.clone());
        let mut all = encoder.all.clone();
        all.extend(gp.all());
        all.push(head);
        ModelVars {
            encoder,
            gp,
            head,
            all,
        }
    }

    /// Pooled representations of a batch, `B x D`.
    pub fn represent_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        batch: &[&EncodedPayload],
    ) -> Result<Var> {
        let rows = batch
            .iter()
            .map(|p| Ok(self.encoder.forward_pooled(tape, &vars.encoder, p)?.pooled))
            .collect::<Result<Vec<_>>>()?;
        Ok(if rows.len() == 1 {
            rows[0]
        } else {
            tape.concat_rows(&rows)
        })
    }

    /// Sampled logits for a batch: `T*B x C`, row `t * B + b`. `noise` is
    /// `T*B x J` standard normal.
    fn sampled_logits(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        batch: &[&EncodedPayload],
        noise: &Mat,
    ) -> Result<(Var, Var)> {
        let b = batch.len();
        let t = noise.nrows() / b;
        debug_assert_eq!(t * b, noise.nrows());
        let e = self.represent_on_tape(tape, vars, batch)?;
        let out = svgp::predictive_on_tape(tape, &vars.gp, e, self.gp.jitter)?;
        let sd = tape.sqrt(out.var);
        let mean = tape.tile_rows(out.mean, t);
        let sd = tape.tile_rows(sd, t);
        let jitter = tape.mul_const(sd, noise.clone());
        let f = tape.add(mean, jitter);
        Ok((tape.matmul(f, vars.head), out.kzz))
    }

    /// Negated ELBO on the tape, plus the KL node and the likelihood sum.
    pub fn elbo_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        batch: &[&EncodedPayload],
        labels: &[usize],
        noise: &Mat,
        n_total: usize,
    ) -> Result<ElboNodes> {
        if batch.is_empty() || batch.len() != labels.len() {
            return Err(Error::contract("elbo needs a non-empty batch with one label per payload"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.classes()) {
            return Err(Error::contract(format!("label {bad} out of range")));
        }
        let b = batch.len();
        let t = noise.nrows() / b;
        let (logits, kzz) = self.sampled_logits(tape, vars, batch, noise)?;
        let logp = tape.log_softmax_rows(logits);
        let tiled: Vec<usize> = (0..t).flat_map(|_| labels.iter().copied()).collect();
        let picked = tape.pick(logp, &tiled);
        let ll = tape.sum_all(picked);
        // sum over batch of the per-payload sample mean, scaled to the dataset.
        let scaled = tape.scale(ll, -(n_total as f64) / (b as f64 * t as f64));
        let kl = svgp::kl_on_tape(tape, &vars.gp, kzz, self.gp.jitter)?;
        let loss = tape.add(scaled, kl);
        Ok(ElboNodes {
            loss,
            kl,
            log_lik_sum: ll,
            logp,
        })
    }

    /// Noise for a batch of `b` payloads and `t` samples.
    pub fn draw_noise(&self, b: usize, t: usize, rng: &mut impl Rng) -> Mat {
        svgp::standard_normal_draws(rng, 1, (t * b, self.gp.units())).remove(0)
    }

    /// Loss value `L1` for a batch, with noise drawn from `rng`.
    pub fn elbo_loss(
        &self,
        batch: &[&EncodedPayload],
        labels: &[usize],
        samples: usize,
        rng: &mut impl Rng,
        n_total: usize,
    ) -> Result<f64> {
        let noise = self.draw_noise(batch.len(), samples, rng);
        self.loss_and_grads(batch, labels, &noise, n_total, false)
            .map(|(l, _)| l)
    }

    /// Loss and (optionally) gradients in `tensors()` order for fixed noise.
    pub fn loss_and_grads(
        &self,
        batch: &[&EncodedPayload],
        labels: &[usize],
        noise: &Mat,
        n_total: usize,
        with_grads: bool,
    ) -> Result<(f64, Vec<Mat>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let nodes = self.elbo_on_tape(&mut tape, &vars, batch, labels, noise, n_total)?;
        let loss = tape.scalar(nodes.loss);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch: 0,
                batch: 0,
                detail: format!(
                    "non-finite loss {loss} (kl {}, log-likelihood sum {})",
                    tape.scalar(nodes.kl),
                    tape.scalar(nodes.log_lik_sum)
                ),
            });
        }
        let grads = if with_grads {
            let g = tape.backward(nodes.loss);
            vars.all
                .iter()
                .map(|&v| g.get_or_zeros(v, tape.value(v).dim()))
                .collect()
        } else {
            Vec::new()
        };
        Ok((loss, grads))
    }

    /// Monte-Carlo prediction for one payload.
    pub fn forward_predict(
        &self,
        payload: &EncodedPayload,
        samples: usize,
        rng: &mut impl Rng,
    ) -> Result<BasePrediction> {
        if samples < 2 {
            return Err(Error::contract("prediction needs at least 2 samples"));
        }
        let noise = self.draw_noise(1, samples, rng);
        self.predict_with_noise(payload, &noise)
    }

    /// Prediction from explicit `T x J` noise.
    pub fn predict_with_noise(&self, payload: &EncodedPayload, noise: &Mat) -> Result<BasePrediction> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let (logits, _) = self.sampled_logits(&mut tape, &vars, &[payload], noise)?;
        Ok(BasePrediction::from_samples(softmax_rows(tape.value(logits))))
    }

    /// Per-payload predictions; payload `i` draws its noise from a stream
    /// derived from `(seed, i)`, so results do not depend on batching.
    pub fn predict_all(
        &self,
        payloads: &[EncodedPayload],
        samples: usize,
        seed: u64,
    ) -> Result<Vec<BasePrediction>> {
        payloads
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
                self.forward_predict(p, samples, &mut rng)
            })
            .collect()
    }

    /// Binds parameters as constants (no gradient bookkeeping).
    fn bind_frozen(&self, tape: &mut Tape) -> ModelVars {
        let all: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|(_, t)| tape.constant(t.clone()))
            .collect();
        let n_enc = self.encoder.tensors().len();
        let encoder = crate::encoder::EncoderVars::from_flat(&all[..n_enc], self.encoder.config.layers);
        let gp = GpVars {
            inducing: all[n_enc],
            var_mean: all[n_enc + 1],
            var_log_var: all[n_enc + 2],
            log_gamma: all[n_enc + 3],
        };
        ModelVars {
            encoder,
            gp,
            head: all[n_enc + 4],
            all,
        }
    }

    /// Rebuilds a model from tensors in `tensors()` order.
    pub fn from_tensors(
        config: BaseLearnerConfig,
        learner_id: usize,
        seed: u64,
        tensors: &[Mat],
    ) -> Result<Self> {
        config.validate()?;
        let n_enc = 1 + 16 * config.encoder.layers + 5;
        if tensors.len() != n_enc + 5 {
            return Err(Error::config(format!(
                "base learner expects {} tensors, got {}",
                n_enc + 5,
                tensors.len()
            )));
        }
        let encoder = EncoderParams::from_tensors(config.encoder, &tensors[..n_enc])?;
        let gp = GpLayerParams::from_tensors(config.gp.jitter, &tensors[n_enc..n_enc + 4])?;
        let head = tensors[n_enc + 4].clone();
        if head.dim() != (config.gp.units, config.classes)
            || gp.units() != config.gp.units
            || gp.num_inducing() != config.gp.inducing
            || gp.inducing.ncols() != config.encoder.dim
        {
            return Err(Error::config("base learner tensor shapes do not match config"));
        }
        Ok(Self {
            config,
            learner_id,
            seed,
            encoder,
            gp,
            head,
        })
    }
}

pub struct ElboNodes {
    pub loss: Var,
    pub kl: Var,
    pub log_lik_sum: Var,
    pub logp: Var,
}

/// Pooled representations without gradient tracking, `B x D`.
pub fn representations(encoder: &EncoderParams, batch: &[&EncodedPayload]) -> Result<Mat> {
    let mut tape = Tape::new();
    let all: Vec<Var> = encoder
        .tensors()
        .into_iter()
        .map(|(_, t)| tape.constant(t.clone()))
        .collect();
    let vars = crate::encoder::EncoderVars::from_flat(&all, encoder.config.layers);
    let mut out = Mat::zeros((batch.len(), encoder.config.dim));
    for (i, p) in batch.iter().enumerate() {
        let pooled = encoder.forward_pooled(&mut tape, &vars, p)?.pooled;
        out.row_mut(i).assign(&tape.value(pooled).row(0));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean over batches of the per-payload negated ELBO (`L1 / N`).
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

/// Result of a training run. `divergence` is set when training stopped on a
/// non-finite loss or gradient; `model` is then the last good state.
#[derive(Debug, Clone)]
pub struct Trained<M> {
    pub model: M,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub divergence: Option<String>,
}

/// Per-payload negated ELBO on a held-out set, with fixed noise, and accuracy
/// of the sample-mean prediction.
pub fn validation_loss(
    model: &BaseLearnerModel,
    data: &[Example],
    samples: usize,
    n_train: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let kl = svgp::kl_term(&model.gp)?;
    let mut ll = 0.0;
    let mut correct = 0usize;
    for (i, ex) in data.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let noise = model.draw_noise(1, samples, &mut rng);
        let mut tape = Tape::new();
        let vars = model.bind_frozen(&mut tape);
        let (logits, _) = model.sampled_logits(&mut tape, &vars, &[&ex.input], &noise)?;
        let lg = tape.value(logits);
        let mut mean = vec![0.0; model.classes()];
        for row in lg.rows() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            ll += (row[ex.label] - lse) / samples as f64;
            for (c, m) in mean.iter_mut().enumerate() {
                *m += (row[c] - lse).exp() / samples as f64;
            }
        }
        if argmax(&mean) == ex.label {
            correct += 1;
        }
    }
    let n = data.len() as f64;
    Ok((kl / n_train as f64 - ll / n, correct as f64 / n))
}

/// Trains one base learner with Adam and early selection on validation loss.
pub fn train_base(
    config: BaseLearnerConfig,
    train: &[Example],
    val: &[Example],
    tc: &TrainConfig,
    learner_id: usize,
    seed: u64,
) -> Result<Trained<BaseLearnerModel>> {
    if train.is_empty() {
        return Err(Error::config("empty training split"));
    }
    let mut seen = vec![false; config.classes];
    for ex in train {
        if ex.label >= config.classes {
            return Err(Error::contract(format!("label {} out of range", ex.label)));
        }
        seen[ex.label] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::config(format!("class {missing} has no training example")));
    }
    if tc.batch_size == 0 || tc.mc_samples == 0 {
        return Err(Error::config("batch size and sample count must be >= 1"));
    }
    let inputs: Vec<EncodedPayload> = train.iter().map(|e| e.input.clone()).collect();
    let mut model = BaseLearnerModel::init(config, learner_id, seed, &inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7472_6169_6e));
    let mut adam = AdamState::new(
        AdamConfig::with_learning_rate(tc.learning_rate),
        model.tensors().into_iter().map(|(_, t)| t),
    );
    let n = train.len();
    let val_seed = derive_seed(seed, 0x76_616c);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Vec<Mat>)> = None;
    let mut divergence = None;

    'epochs: for epoch in 0..tc.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(tc.batch_size).enumerate() {
            let batch: Vec<&EncodedPayload> = chunk.iter().map(|&i| &train[i].input).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].label).collect();
            let noise = model.draw_noise(batch.len(), tc.mc_samples, &mut rng);
            let step = model
                .loss_and_grads(&batch, &labels, &noise, n, true)
                .and_then(|(loss, grads)| {
                    let mut params = model.tensors_mut();
                    adam.step(&mut params, &grads)?;
                    Ok(loss)
                });
            match step {
                Ok(loss) => {
                    total += loss / n as f64;
                    batches += 1;
                }
                Err(e @ (Error::Divergence { .. } | Error::NonFiniteGradient(_) | Error::NumericalSingularity { .. })) => {
                    let detail = format!("learner {learner_id}, epoch {epoch}, batch {bi}: {e}");
                    log::warn!("{detail}");
                    divergence = Some(detail);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let (val_loss, val_accuracy) = validation_loss(&model, val, tc.mc_samples, n, val_seed)?;
        let stats = EpochStats {
            epoch,
            train_loss: total / batches.max(1) as f64,
            val_loss,
            val_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "learner {learner_id} epoch {epoch}: train {:.4} val {:.4} acc {:.4} ({:.1}s)",
            stats.train_loss, stats.val_loss, stats.val_accuracy, stats.seconds
        );
        history.push(stats);
        let score = if val.is_empty() { stats.train_loss } else { val_loss };
        if !score.is_finite() {
            divergence = Some(format!("learner {learner_id}, epoch {epoch}: non-finite validation loss"));
            break;
        }
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            debug!("learner {learner_id}: new best at epoch {epoch}");
            best = Some((score, epoch, model.snapshot()));
        }
    }

    let best_epoch = match best {
        Some((_, epoch, snap)) => {
            model.load_snapshot(&snap);
            epoch
        }
        None => 0,
    };
    model.round_to_f32();
    Ok(Trained {
        model,
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

    pub(crate) fn tiny_config() -> BaseLearnerConfig {
        BaseLearnerConfig {
            encoder: EncoderConfig {
                vocab_size: 12,
                max_len: 5,
                dim: 4,
                heads: 2,
                layers: 1,
                pool_dim: 3,
                ffn_mult: 2,
            },
            gp: GpConfig {
                units: 3,
                inducing: 4,
                jitter: 1e-6,
            },
            classes: 3,
        }
    }

    fn payload(idx: &[usize], len: usize) -> EncodedPayload {
        let mut indices = idx.to_vec();
        indices.resize(len, 0);
        EncodedPayload {
            indices,
            mask: (0..len).map(|i| i < idx.len()).collect(),
        }
    }

    fn tiny_data() -> Vec<Example> {
        [
            (vec![2, 3, 4], 0),
            (vec![5, 6], 1),
            (vec![7, 8, 9, 10], 2),
            (vec![2, 11], 0),
            (vec![6, 5, 5], 1),
            (vec![9, 7], 2),
        ]
        .into_iter()
        .map(|(i, l)| Example {
            input: payload(&i, 5),
            label: l,
        })
        .collect()
    }

    fn tiny_model(seed: u64) -> BaseLearnerModel {
        let data = tiny_data();
        let inputs: Vec<_> = data.iter().map(|e| e.input.clone()).collect();
        BaseLearnerModel::init(tiny_config(), 0, seed, &inputs).unwrap()
    }

    #[test]
    fn hand_computed_moments() {
        let p = BasePrediction::from_samples(array![[0.6, 0.4], [0.8, 0.2]]);
        assert!((p.mean[0] - 0.7).abs() < 1e-15 && (p.mean[1] - 0.3).abs() < 1e-15);
        assert!((p.cov[[0, 0]] - 0.01).abs() < 1e-15);
        assert!((p.cov[[0, 1]] + 0.01).abs() < 1e-15);
        assert!((p.cov[[1, 1]] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn zero_variance_gives_zero_covariance() {
        let mut m = tiny_model(1);
        m.gp.var_log_var.fill(-200.0);
        let ex = &tiny_data()[0];
        // Query exactly at an inducing location so the prior-left term vanishes too.
        let e = representations(&m.encoder, &[&ex.input]).unwrap();
        m.gp.inducing.row_mut(0).assign(&e.row(0));
        m.gp.jitter = 1e-12;
        let noise = Mat::zeros((4, 3));
        let det = m.predict_with_noise(&ex.input, &noise).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let post = svgp::predictive(&e, &m.gp).unwrap();
        let logits = post.mean.dot(&m.head);
        let expect = softmax_rows(&logits);
        for c in 0..3 {
            assert!((det.mean[c] - expect[[0, c]]).abs() < 1e-12);
        }
        assert!(det.cov.iter().all(|&v| v == 0.0));
        // With noise, the floored variance is tiny and samples barely move.
        let p = m.forward_predict(&ex.input, 8, &mut rng).unwrap();
        assert!(p.cov.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn covariance_rows_sum_to_zero() {
        let m = tiny_model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for ex in tiny_data() {
            let p = m.forward_predict(&ex.input, 16, &mut rng).unwrap();
            assert!((p.mean.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for i in 0..3 {
                assert!(p.cov.row(i).sum().abs() < 1e-9);
                for j in 0..3 {
                    assert_eq!(p.cov[[i, j]], p.cov[[j, i]]);
                }
            }
        }
    }

    #[test]
    fn prediction_needs_two_samples() {
        let m = tiny_model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(m.forward_predict(&tiny_data()[0].input, 1, &mut rng).is_err());
    }

    #[test]
    fn kl_contribution_equals_kl_term() {
        let m = tiny_model(5);
        let data = tiny_data();
        let batch: Vec<&EncodedPayload> = data.iter().map(|e| &e.input).collect();
        let labels: Vec<usize> = data.iter().map(|e| e.label).collect();
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape);
        let noise = m.draw_noise(batch.len(), 4, &mut ChaCha8Rng::seed_from_u64(1));
        let nodes = m.elbo_on_tape(&mut tape, &vars, &batch, &labels, &noise, 100).unwrap();
        assert_eq!(tape.scalar(nodes.kl), svgp::kl_term(&m.gp).unwrap());
    }

    #[test]
    fn elbo_matches_transcription() {
        let m = tiny_model(6);
        let data = tiny_data();
        let batch: Vec<&EncodedPayload> = data.iter().map(|e| &e.input).collect();
        let labels: Vec<usize> = data.iter().map(|e| e.label).collect();
        let t = 5;
        let n_total = 40;
        let loss = m
            .elbo_loss(&batch, &labels, t, &mut ChaCha8Rng::seed_from_u64(8), n_total)
            .unwrap();
        // Independent route: same noise stream, per-payload loops.
        let noise = m.draw_noise(batch.len(), t, &mut ChaCha8Rng::seed_from_u64(8));
        let e = representations(&m.encoder, &batch).unwrap();
        let post = svgp::predictive(&e, &m.gp).unwrap();
        let b = batch.len();
        let mut ll = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let mut per = 0.0;
            for s in 0..t {
                let f: Vec<f64> = (0..3)
                    .map(|j| post.mean[[i, j]] + post.var[[i, j]].sqrt() * noise[[s * b + i, j]])
                    .collect();
                let z: Vec<f64> = (0..3)
                    .map(|c| (0..3).map(|j| f[j] * m.head[[j, c]]).sum())
                    .collect();
                let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
                per += z[y] - lse;
            }
            ll += per / t as f64;
        }
        let expected = -(n_total as f64 / b as f64 * ll - svgp::kl_term(&m.gp).unwrap());
        assert!((loss - expected).abs() < 1e-10, "{loss} vs {expected}");
    }

    #[test]
    fn full_model_gradient_check() {
        let m = tiny_model(7);
        let data = tiny_data();
        let batch: Vec<&EncodedPayload> = data.iter().take(4).map(|e| &e.input).collect();
        let labels: Vec<usize> = data.iter().take(4).map(|e| e.label).collect();
        let noise = m.draw_noise(4, 3, &mut ChaCha8Rng::seed_from_u64(2));
        let (_, grads) = m.loss_and_grads(&batch, &labels, &noise, 20, true).unwrap();
        let loss = |ts: &[Mat]| {
            let q = BaseLearnerModel::from_tensors(m.config, 0, 0, ts).unwrap();
            q.loss_and_grads(&batch, &labels, &noise, 20, false).unwrap().0
        };
        let r = finite_diff_check(loss, &m.snapshot(), &grads, GradCheckOptions::default());
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    #[test]
    fn tensors_round_trip() {
        let m = tiny_model(9);
        let back = BaseLearnerModel::from_tensors(m.config, m.learner_id, m.seed, &m.snapshot()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let data = tiny_data();
        let tc = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 3,
            epochs: 2,
            mc_samples: 2,
        };
        let a = train_base(tiny_config(), &data, &data, &tc, 0, 5).unwrap().model;
        let b = train_base(tiny_config(), &data, &data, &tc, 0, 5).unwrap().model;
        let c = train_base(tiny_config(), &data, &data, &tc, 0, 6).unwrap().model;
        assert_eq!(a.snapshot(), b.snapshot());
        assert!(crate::params::max_abs_diff(&a, &c) > 0.0);
    }

    #[test]
    fn missing_class_is_rejected() {
        let data: Vec<Example> = tiny_data().into_iter().filter(|e| e.label != 2).collect();
        let err = train_base(tiny_config(), &data, &[], &TrainConfig::default(), 0, 1).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn seeds_are_mixed() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_eq!(derive_seed(42, 7), derive_seed(42, 7));
    }
}
