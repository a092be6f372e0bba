//! Uniform access to a model's trainable tensors, in a fixed order.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Mat, Tape, Var};

pub trait ParamTensors {
    /// Every trainable tensor with a stable, unique name.
    fn tensors(&self) -> Vec<(String, &Mat)>;

    /// Same tensors, same order, mutably.
    fn tensors_mut(&mut self) -> Vec<&mut Mat>;

    fn snapshot(&self) -> Vec<Mat> {
        self.tensors().into_iter().map(|(_, t)| t.clone()).collect()
    }

    fn load_snapshot(&mut self, values: &[Mat]) {
        let targets = self.tensors_mut();
        assert_eq!(targets.len(), values.len(), "snapshot tensor count");
        for (dst, src) in targets.into_iter().zip(values) {
            assert_eq!(dst.dim(), src.dim(), "snapshot tensor shape");
            dst.assign(src);
        }
    }

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rounds every parameter to the nearest `f32`, the checkpoint precision.
    fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.mapv_inplace(|x| x as f32 as f64);
        }
    }
}

/// Puts every tensor on the tape as a trainable leaf, in `tensors()` order.
pub fn bind_all<P: ParamTensors + ?Sized>(tape: &mut Tape, p: &P) -> Vec<Var> {
    p.tensors()
        .into_iter()
        .map(|(_, t)| tape.param(t.clone()))
        .collect()
}

pub fn normal_mat(rng: &mut impl Rng, shape: (usize, usize), std: f64) -> Mat {
    let dist = Normal::new(0.0, std).expect("finite std");
    Mat::from_shape_simple_fn(shape, || dist.sample(rng))
}

/// Largest absolute elementwise difference between two parameter sets.
pub fn max_abs_diff<P: ParamTensors + ?Sized>(a: &P, b: &P) -> f64 {
    a.tensors()
        .iter()
        .zip(b.tensors().iter())
        .flat_map(|((_, x), (_, y))| x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}
