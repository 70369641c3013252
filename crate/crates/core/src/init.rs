use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// Standard deviation of every normally initialized weight.
pub const INIT_STD: f64 = 0.02;

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    (0..n).map(|_| dist.sample(rng)).collect()
}

pub fn normal_param<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(shape, normal_vec(rng, n, std)).expect("zero dimension in parameter shape")
}

pub fn zero_param(shape: &[usize]) -> Tensor {
    Tensor::param(shape, vec![0.0; shape.iter().product()]).expect("zero dimension in parameter shape")
}
