//! Adam with bias correction, plus the central-difference gradient checker
//! used to validate every hand-written backward rule in the crate.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// First and second moment estimates for a list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Mat>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Mat::zeros(p.dim()), Mat::zeros(p.dim())))
            .unzip();
        Self { config, m, v, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update. A step with any non-finite gradient entry is
    /// rejected before anything is modified.
    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[Mat]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract(format!(
                "adam: {} moment tensors, {} params, {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.dim() != g.dim() || p.dim() != self.m[i].dim() {
                return Err(Error::contract(format!(
                    "adam: tensor {i} shape {:?} vs grad {:?}",
                    p.dim(),
                    g.dim()
                )));
            }
            if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(format!(
                    "tensor {i}, flat index {bad}, value {}",
                    g.iter().nth(bad).unwrap()
                )));
            }
        }
        self.t += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(&mut **p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates checked per tensor; larger tensors are subsampled.
    pub max_coords: usize,
    /// Denominator floor so that near-zero gradients compare absolutely.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: 200,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor, flat index, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub coords_checked: usize,
}

/// Compares `analytic` against central differences of `loss`.
///
/// `loss` must be a deterministic function of the parameters (any sampling
/// inside it has to reuse the same random draws for every call).
pub fn finite_diff_check(
    loss: impl Fn(&[Mat]) -> f64,
    params: &[Mat],
    analytic: &[Mat],
    opts: GradCheckOptions,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len(), "one gradient per parameter tensor");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Mat> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for (ti, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for flat in coords {
            let orig = work[ti].as_slice().expect("standard layout")[flat];
            work[ti].as_slice_mut().unwrap()[flat] = orig + opts.step;
            let up = loss(&work);
            work[ti].as_slice_mut().unwrap()[flat] = orig - opts.step;
            let down = loss(&work);
            work[ti].as_slice_mut().unwrap()[flat] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = grad.as_slice().expect("standard layout")[flat];
            let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
            let rel = (a - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((ti, flat, a, numeric));
            }
        }
    }
    report
}
