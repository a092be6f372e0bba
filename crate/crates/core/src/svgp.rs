//! Sparse variational Gaussian-process layer.
//!
//! `J` independent GP units share `M` learnable inducing locations `Z` and
//! one RBF kernel `k(a, b) = exp(-|a - b|^2 / gamma)`. Unit `j` carries a
//! diagonal Gaussian posterior `q(u_j) = N(o_j, diag(s_j))` over its inducing
//! values, with prior `N(0, K_ZZ + eps I)`. With
//! `A = K_xZ (K_ZZ + eps I)^-1` the predictive moments are
//!
//! ```text
//! mu_j(x) = A o_j
//! v_j(x)  = k(x, x) - diag(A K_Zx) + diag(A diag(s_j) A^T)     (floored at eps)
//! ```
//!
//! Far from every inducing point `A -> 0`, so the mean reverts to zero and the
//! variance to the prior value 1.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{rbf_matrix, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{normal_mat, ParamTensors};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpConfig {
    /// Number of GP units J.
    pub units: usize,
    /// Number of inducing points M.
    pub inducing: usize,
    /// Diagonal jitter added to `K_ZZ`; escalated x10, x100 on failure.
    pub jitter: f64,
}

impl GpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.units == 0 || self.inducing == 0 {
            return Err(Error::config("gp.units and gp.inducing must be >= 1"));
        }
        if !(self.jitter > 0.0 && self.jitter.is_finite()) {
            return Err(Error::config("gp.jitter must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpLayerParams {
    pub jitter: f64,
    /// Inducing locations `Z`, `M x D`.
    pub inducing: Mat,
    /// Variational means `o_j` as columns, `M x J`.
    pub var_mean: Mat,
    /// Variational log-variances `log s_j` as columns, `M x J`.
    pub var_log_var: Mat,
    /// `log gamma`, `1 x 1`.
    pub log_gamma: Mat,
}

/// Predictive moments for a batch, both `B x J`.
#[derive(Debug, Clone, PartialEq)]
pub struct GpPosterior {
    pub mean: Mat,
    pub var: Mat,
}

pub const INIT_LOG_VAR: f64 = -2.302_585_092_994_046; // ln 0.1

/// Mean squared pairwise distance between rows; the kernel-width initializer.
pub fn mean_sq_distance(points: &Mat) -> f64 {
    let n = points.nrows();
    if n < 2 {
        return 1.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += points
                .row(i)
                .iter()
                .zip(points.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    total / (n * (n - 1) / 2) as f64
}

impl GpLayerParams {
    /// Inducing locations are taken as given (normally `M` pooled
    /// representations of random training payloads); the kernel width starts
    /// at their mean squared pairwise distance.
    pub fn init(config: GpConfig, inducing: Mat, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if inducing.nrows() != config.inducing {
            return Err(Error::config(format!(
                "expected {} inducing points, got {}",
                config.inducing,
                inducing.nrows()
            )));
        }
        let width = mean_sq_distance(&inducing).max(1e-3);
        Ok(Self {
            jitter: config.jitter,
            var_mean: normal_mat(rng, (config.inducing, config.units), 1.0),
            var_log_var: Mat::from_elem((config.inducing, config.units), INIT_LOG_VAR),
            log_gamma: Mat::from_elem((1, 1), width.ln()),
            inducing,
        })
    }

    pub fn units(&self) -> usize {
        self.var_mean.ncols()
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.nrows()
    }

    pub fn gamma(&self) -> f64 {
        self.log_gamma[[0, 0]].exp()
    }

    pub fn bind(&self, tape: &mut Tape) -> GpVars {
        GpVars {
            inducing: tape.param(self.inducing.clone()),
            var_mean: tape.param(self.var_mean.clone()),
            var_log_var: tape.param(self.var_log_var.clone()),
            log_gamma: tape.param(self.log_gamma.clone()),
        }
    }

    pub fn from_tensors(jitter: f64, t: &[Mat]) -> Result<Self> {
        let [z, o, s, g] = t else {
            return Err(Error::config(format!("gp layer expects 4 tensors, got {}", t.len())));
        };
        if o.dim() != s.dim() || o.nrows() != z.nrows() || g.dim() != (1, 1) {
            return Err(Error::config("gp layer tensor shapes are inconsistent"));
        }
        Ok(Self {
            jitter,
            inducing: z.clone(),
            var_mean: o.clone(),
            var_log_var: s.clone(),
            log_gamma: g.clone(),
        })
    }
}

impl ParamTensors for GpLayerParams {
    fn tensors(&self) -> Vec<(String, &Mat)> {
        vec![
            ("gp.inducing".to_owned(), &self.inducing),
            ("gp.var_mean".to_owned(), &self.var_mean),
            ("gp.var_log_var".to_owned(), &self.var_log_var),
            ("gp.log_gamma".to_owned(), &self.log_gamma),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        vec![
            &mut self.inducing,
            &mut self.var_mean,
            &mut self.var_log_var,
            &mut self.log_gamma,
        ]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GpVars {
    pub inducing: Var,
    pub var_mean: Var,
    pub var_log_var: Var,
    pub log_gamma: Var,
}

impl GpVars {
    pub fn all(&self) -> [Var; 4] {
        [self.inducing, self.var_mean, self.var_log_var, self.log_gamma]
    }
}

/// Predictive moments on the tape.
pub struct GpOutputs {
    pub kzz: Var,
    pub mean: Var,
    pub var: Var,
}

/// `e` is the `B x D` batch of payload representations.
pub fn predictive_on_tape(tape: &mut Tape, gp: &GpVars, e: Var, jitter: f64) -> Result<GpOutputs> {
    let kzz = tape.rbf(gp.inducing, gp.inducing, gp.log_gamma);
    let kxz = tape.rbf(e, gp.inducing, gp.log_gamma);
    let kzx = tape.transpose(kxz);
    let solved = tape.spd_solve(kzz, kzx, jitter)?;
    let a = tape.transpose(solved);
    let mean = tape.matmul(a, gp.var_mean);
    // k(x, x) = 1 for the RBF kernel.
    let explained = tape.mul(a, kxz);
    let explained = tape.sum_rows(explained);
    let neg = tape.scale(explained, -1.0);
    let prior_left = tape.add_scalar(neg, 1.0);
    let s = tape.exp(gp.var_log_var);
    let a2 = tape.square(a);
    let spread = tape.matmul(a2, s);
    let var = tape.add_col(spread, prior_left);
    let var = tape.floor_at(var, jitter);
    Ok(GpOutputs { kzz, mean, var })
}

pub fn kl_on_tape(tape: &mut Tape, gp: &GpVars, kzz: Var, jitter: f64) -> Result<Var> {
    tape.gauss_kl(kzz, gp.var_mean, gp.var_log_var, jitter)
}

/// RBF kernel matrix between the rows of `a` and `b`.
pub fn rbf_kernel(a: &Mat, b: &Mat, gamma: f64) -> Mat {
    assert!(gamma > 0.0, "kernel width must be positive");
    rbf_matrix(a, b, gamma)
}

/// Predictive moments for a `B x D` batch of representations.
pub fn predictive(e_batch: &Mat, params: &GpLayerParams) -> Result<GpPosterior> {
    let mut tape = Tape::new();
    let vars = GpVars {
        inducing: tape.constant(params.inducing.clone()),
        var_mean: tape.constant(params.var_mean.clone()),
        var_log_var: tape.constant(params.var_log_var.clone()),
        log_gamma: tape.constant(params.log_gamma.clone()),
    };
    let e = tape.constant(e_batch.clone());
    let out = predictive_on_tape(&mut tape, &vars, e, params.jitter)?;
    Ok(GpPosterior {
        mean: tape.value(out.mean).clone(),
        var: tape.value(out.var).clone(),
    })
}

/// `sum_j KL(q(u_j) || p(u_j))`.
pub fn kl_term(params: &GpLayerParams) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(params.inducing.clone());
    let o = tape.constant(params.var_mean.clone());
    let s = tape.constant(params.var_log_var.clone());
    let g = tape.constant(params.log_gamma.clone());
    let kzz = tape.rbf(z, z, g);
    let kl = tape.gauss_kl(kzz, o, s, params.jitter)?;
    Ok(tape.scalar(kl))
}

/// Standard-normal draws, `count` matrices of `shape`.
pub fn standard_normal_draws(rng: &mut impl Rng, count: usize, shape: (usize, usize)) -> Vec<Mat> {
    (0..count)
        .map(|_| Mat::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// Reparameterized draws `f = mu + sqrt(v) * zeta`, one `B x J` matrix per sample.
pub fn sample(post: &GpPosterior, count: usize, rng: &mut impl Rng) -> Vec<Mat> {
    assert!(count >= 1, "need at least one sample");
    let sd = post.var.mapv(|v| v.max(0.0).sqrt());
    standard_normal_draws(rng, count, post.mean.dim())
        .into_iter()
        .map(|z| &post.mean + &(&sd * &z))
        .collect()
}
