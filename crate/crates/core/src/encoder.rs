//! Token embedding, pre-layer-norm transformer encoder and attention pooling.
//!
//! A payload's token indices are embedded, offset by fixed sinusoidal
//! position codes and passed through `layers` residual blocks of multi-head
//! self-attention and a GELU feed-forward network. Pooling scores every
//! contextual token vector with `tanh(e_t W_r + b_r) . w_r`, normalizes the
//! scores with a masked softmax and returns the weighted sum as the payload
//! representation.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{bind_all, normal_mat, ParamTensors};
use crate::prep::EncodedPayload;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    /// Model width D.
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Width of the pooling scorer, D_a.
    pub pool_dim: usize,
    /// Feed-forward inner width as a multiple of `dim`.
    pub ffn_mult: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("dim", self.dim),
            ("heads", self.heads),
            ("pool_dim", self.pool_dim),
            ("ffn_mult", self.ffn_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("encoder.{name} must be >= 1")));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "encoder.dim ({}) must be divisible by encoder.heads ({})",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub ln1_gain: Mat,
    pub ln1_bias: Mat,
    pub wq: Mat,
    pub bq: Mat,
    pub wk: Mat,
    pub bk: Mat,
    pub wv: Mat,
    pub bv: Mat,
    pub wo: Mat,
    pub bo: Mat,
    pub ln2_gain: Mat,
    pub ln2_bias: Mat,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

const LAYER_TENSORS: usize = 16;

impl EncoderLayer {
    fn init(rng: &mut impl Rng, d: usize, ffn: usize) -> Self {
        let s = (1.0 / d as f64).sqrt();
        let s_ffn = (1.0 / ffn as f64).sqrt();
        Self {
            ln1_gain: Mat::ones((1, d)),
            ln1_bias: Mat::zeros((1, d)),
            wq: normal_mat(rng, (d, d), s),
            bq: Mat::zeros((1, d)),
            wk: normal_mat(rng, (d, d), s),
            bk: Mat::zeros((1, d)),
            wv: normal_mat(rng, (d, d), s),
            bv: Mat::zeros((1, d)),
            wo: normal_mat(rng, (d, d), s),
            bo: Mat::zeros((1, d)),
            ln2_gain: Mat::ones((1, d)),
            ln2_bias: Mat::zeros((1, d)),
            w1: normal_mat(rng, (d, ffn), s),
            b1: Mat::zeros((1, ffn)),
            w2: normal_mat(rng, (ffn, d), s_ffn),
            b2: Mat::zeros((1, d)),
        }
    }

    fn tensors(&self) -> [(&'static str, &Mat); LAYER_TENSORS] {
        [
            ("ln1.gain", &self.ln1_gain),
            ("ln1.bias", &self.ln1_bias),
            ("attn.wq", &self.wq),
            ("attn.bq", &self.bq),
            ("attn.wk", &self.wk),
            ("attn.bk", &self.bk),
            ("attn.wv", &self.wv),
            ("attn.bv", &self.bv),
            ("attn.wo", &self.wo),
            ("attn.bo", &self.bo),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.bias", &self.ln2_bias),
            ("ffn.w1", &self.w1),
            ("ffn.b1", &self.b1),
            ("ffn.w2", &self.w2),
            ("ffn.b2", &self.b2),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Mat; LAYER_TENSORS] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// All encoder weights, including the pooling scorer (`W_r`, `b_r`, `w_r`).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub embedding: Mat,
    pub layers: Vec<EncoderLayer>,
    pub final_gain: Mat,
    pub final_bias: Mat,
    /// `W_r`, stored `D x D_a`.
    pub pool_w: Mat,
    /// `b_r`, `1 x D_a`.
    pub pool_b: Mat,
    /// `w_r`, `D_a x 1`.
    pub pool_v: Mat,
    positions: Mat,
}

/// Fixed sinusoidal position table, `max_len x dim`.
pub fn sinusoidal_positions(max_len: usize, dim: usize) -> Mat {
    Mat::from_shape_fn((max_len, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl EncoderParams {
    pub fn init(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let ffn = d * config.ffn_mult;
        let embedding = normal_mat(rng, (config.vocab_size, d), 1.0);
        let layers = (0..config.layers)
            .map(|_| EncoderLayer::init(rng, d, ffn))
            .collect();
        Ok(Self {
            config,
            embedding,
            layers,
            final_gain: Mat::ones((1, d)),
            final_bias: Mat::zeros((1, d)),
            pool_w: normal_mat(rng, (d, config.pool_dim), (1.0 / d as f64).sqrt()),
            pool_b: Mat::zeros((1, config.pool_dim)),
            pool_v: normal_mat(rng, (config.pool_dim, 1), (1.0 / config.pool_dim as f64).sqrt()),
            positions: sinusoidal_positions(config.max_len, d),
        })
    }

    /// Rebuilds parameters from tensors in [`ParamTensors::tensors`] order.
    pub fn from_tensors(config: EncoderConfig, tensors: &[Mat]) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut p = Self::init(config, &mut rng)?;
        let slots = p.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::config(format!(
                "encoder expects {} tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (i, (dst, src)) in slots.into_iter().zip(tensors).enumerate() {
            if dst.dim() != src.dim() {
                return Err(Error::config(format!(
                    "encoder tensor {i}: expected shape {:?}, got {:?}",
                    dst.dim(),
                    src.dim()
                )));
            }
            dst.assign(src);
        }
        Ok(p)
    }

    pub fn positions(&self) -> &Mat {
        &self.positions
    }

    /// Places the parameters on `tape` as trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> EncoderVars {
        let vars = bind_all(tape, self);
        EncoderVars::from_flat(&vars, self.config.layers)
    }

    fn check_input(&self, indices: &[usize], mask: &[bool]) -> Result<()> {
        if indices.len() != mask.len() {
            return Err(Error::config(format!(
                "indices length {} does not match mask length {}",
                indices.len(),
                mask.len()
            )));
        }
        if indices.is_empty() || indices.len() > self.config.max_len {
            return Err(Error::config(format!(
                "sequence length {} outside 1..={}",
                indices.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::config(format!(
                "token index {bad} >= vocab size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Contextual token vectors `e_t`, `T x D`.
    pub fn forward_tokens(
        &self,
        tape: &mut Tape,
        vars: &EncoderVars,
        indices: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        self.check_input(indices, mask)?;
        let t_len = indices.len();
        let cfg = &self.config;
        let emb = tape.gather(vars.embedding, indices);
        let pos = tape.constant(self.positions.slice(ndarray::s![..t_len, ..]).to_owned());
        let mut x = tape.add(emb, pos);
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        for lv in &vars.layers {
            let h = affine_norm(tape, x, lv.ln1_gain, lv.ln1_bias);
            let q = linear(tape, h, lv.wq, lv.bq);
            let k = linear(tape, h, lv.wk, lv.bk);
            let v = linear(tape, h, lv.wv, lv.bv);
            let mut heads = Vec::with_capacity(cfg.heads);
            for head in 0..cfg.heads {
                let qh = tape.slice_cols(q, head * dh, dh);
                let kh = tape.slice_cols(k, head * dh, dh);
                let vh = tape.slice_cols(v, head * dh, dh);
                let kt = tape.transpose(kh);
                let scores = tape.matmul(qh, kt);
                let scores = tape.scale(scores, scale);
                let probs = tape.softmax_rows_masked(scores, Some(mask));
                heads.push(tape.matmul(probs, vh));
            }
            let cat = if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat_cols(&heads)
            };
            let attn = linear(tape, cat, lv.wo, lv.bo);
            x = tape.add(x, attn);
            let h2 = affine_norm(tape, x, lv.ln2_gain, lv.ln2_bias);
            let inner = linear(tape, h2, lv.w1, lv.b1);
            let inner = tape.gelu(inner);
            let ff = linear(tape, inner, lv.w2, lv.b2);
            x = tape.add(x, ff);
        }
        Ok(affine_norm(tape, x, vars.final_gain, vars.final_bias))
    }

    /// Encodes the unmasked prefix only, when the mask is a prefix. Outputs at
    /// real positions are identical to the full-length pass because padded
    /// keys never receive attention.
    pub fn forward_pooled(
        &self,
        tape: &mut Tape,
        vars: &EncoderVars,
        payload: &EncodedPayload,
    ) -> Result<PooledVars> {
        let real = payload.mask.iter().rposition(|&m| m).map_or(0, |p| p + 1);
        let (idx, mask) = if real > 0 {
            (&payload.indices[..real], &payload.mask[..real])
        } else {
            (&payload.indices[..], &payload.mask[..])
        };
        let tokens = self.forward_tokens(tape, vars, idx, mask)?;
        attention_pool(tape, vars, tokens, mask)
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

fn affine_norm(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Var {
    let n = tape.layer_norm_rows(x, LAYER_NORM_EPS);
    let g = tape.mul_row(n, gain);
    tape.add_row(g, bias)
}

/// Output of attention pooling on a tape.
#[derive(Debug, Clone, Copy)]
pub struct PooledVars {
    pub tokens: Var,
    /// `1 x D` payload representation.
    pub pooled: Var,
    /// `1 x T` token weights.
    pub weights: Var,
}

/// `r_t = tanh(e_t W_r + b_r)`, `a = softmax_t(r_t . w_r)` over unmasked
/// positions, `e_x = sum_t a_t e_t`.
pub fn attention_pool(tape: &mut Tape, vars: &EncoderVars, tokens: Var, mask: &[bool]) -> Result<PooledVars> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::contract("attention pooling needs at least one unmasked token"));
    }
    let r = linear(tape, tokens, vars.pool_w, vars.pool_b);
    let r = tape.tanh(r);
    let scores = tape.matmul(r, vars.pool_v);
    let scores = tape.transpose(scores);
    let weights = tape.softmax_rows_masked(scores, Some(mask));
    let pooled = tape.matmul(weights, tokens);
    Ok(PooledVars {
        tokens,
        pooled,
        weights,
    })
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Tape handles for [`EncoderParams`], plus the flat list in tensor order.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub embedding: Var,
    pub layers: Vec<LayerVars>,
    pub final_gain: Var,
    pub final_bias: Var,
    pub pool_w: Var,
    pub pool_b: Var,
    pub pool_v: Var,
    pub all: Vec<Var>,
}

impl EncoderVars {
    pub fn from_flat(vars: &[Var], layers: usize) -> Self {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("encoder tensor count");
        let embedding = next();
        let layers = (0..layers)
            .map(|_| LayerVars {
                ln1_gain: next(),
                ln1_bias: next(),
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            })
            .collect();
        Self {
            embedding,
            layers,
            final_gain: next(),
            final_bias: next(),
            pool_w: next(),
            pool_b: next(),
            pool_v: next(),
            all: vars.to_vec(),
        }
    }
}

impl ParamTensors for EncoderParams {
    fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![("embedding".to_owned(), &self.embedding)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.tensors().into_iter().map(|(n, t)| (format!("layer{l}.{n}"), t)));
        }
        out.push(("final_ln.gain".to_owned(), &self.final_gain));
        out.push(("final_ln.bias".to_owned(), &self.final_bias));
        out.push(("pool.w".to_owned(), &self.pool_w));
        out.push(("pool.b".to_owned(), &self.pool_b));
        out.push(("pool.v".to_owned(), &self.pool_v));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = vec![&mut self.embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        out.push(&mut self.pool_w);
        out.push(&mut self.pool_b);
        out.push(&mut self.pool_v);
        out
    }
}

/// Pooled representation of one payload.
#[derive(Debug, Clone, PartialEq)]
pub struct PayloadRepresentation {
    /// `e_x`, length D.
    pub pooled: Vec<f64>,
    /// `a_t`, one weight per input position; zero at masked positions.
    pub token_attention: Vec<f64>,
}

/// A recorded encoder pass over one payload, kept for the backward pass.
pub struct EncoderPass {
    tape: Tape,
    vars: EncoderVars,
    out: PooledVars,
    len: usize,
}

impl EncoderPass {
    /// Runs the encoder and pooling on a single payload.
    pub fn run(params: &EncoderParams, indices: &[usize], mask: &[bool]) -> Result<Self> {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let tokens = params.forward_tokens(&mut tape, &vars, indices, mask)?;
        let out = attention_pool(&mut tape, &vars, tokens, mask)?;
        Ok(Self {
            tape,
            vars,
            out,
            len: indices.len(),
        })
    }

    /// `T x D` contextual token vectors.
    pub fn token_vectors(&self) -> &Mat {
        self.tape.value(self.out.tokens)
    }

    pub fn representation(&self) -> PayloadRepresentation {
        let w = self.tape.value(self.out.weights);
        PayloadRepresentation {
            pooled: self.tape.value(self.out.pooled).iter().copied().collect(),
            token_attention: (0..self.len).map(|t| w[[0, t]]).collect(),
        }
    }

    /// Parameter gradients, in tensor order, given `dL/de_x`.
    pub fn backward(&self, upstream: &[f64]) -> Vec<Mat> {
        let seed = Mat::from_shape_vec((1, upstream.len()), upstream.to_vec())
            .expect("upstream gradient length");
        let grads = self.tape.backward_with(self.out.pooled, seed);
        self.vars
            .all
            .iter()
            .map(|&v| grads.get_or_zeros(v, self.tape.value(v).dim()))
            .collect()
    }
}
