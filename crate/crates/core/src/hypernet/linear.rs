use rand::Rng;

use crate::init::{normal_param, zero_param};
use crate::tensor::{Result, Tensor};

/// Token-wise affine map `x·W + b` for `x: [n, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_out: usize, std: f64) -> Self {
        Self {
            weight: normal_param(rng, &[d_in, d_out], std),
            bias: zero_param(&[d_out]),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: zero_param(&[d_in, d_out]),
            bias: zero_param(&[d_out]),
        }
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor) -> Self {
        Self { weight, bias }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.weight"), self.weight.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
        ]
    }
}
