use rand::Rng;

use super::linear::Linear;
use super::mlp::Activation;
use crate::init::normal_param;
use crate::tensor::{Result, Tensor, TensorError};

/// Depthwise 1-D convolution along the token axis (same padding) followed by a
/// pointwise channel mix and the activation.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    /// One `[channels]` tap per kernel position.
    pub taps: Vec<Tensor>,
    pub mix: Linear,
}

impl ConvLayer {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, kernel: usize, channels: usize, std: f64) -> Self {
        Self {
            taps: (0..kernel).map(|_| normal_param(rng, &[channels], std)).collect(),
            mix: Linear::new(rng, channels, channels, std),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let k = self.taps.len();
        if k.is_multiple_of(2) {
            return Err(TensorError::Contract(format!("conv kernel {k} must be odd")));
        }
        let half = (k / 2) as isize;
        let mut acc: Option<Tensor> = None;
        for (t, tap) in self.taps.iter().enumerate() {
            // out[i] += x[i + t - half] ⊙ tap
            let shifted = x.shift_rows(half - t as isize)?.scale_cols(tap)?;
            acc = Some(match acc {
                Some(a) => a.add(&shifted)?,
                None => shifted,
            });
        }
        self.mix.forward(&acc.expect("kernel has at least one tap"))
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out: Vec<_> = self
            .taps
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("{prefix}.tap{i}"), t.clone()))
            .collect();
        out.extend(self.mix.params(&format!("{prefix}.mix")));
        out
    }
}

#[derive(Debug, Clone)]
pub struct ConvCore {
    pub layers: Vec<ConvLayer>,
    pub activation: Activation,
}

impl ConvCore {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        kernels: &[usize],
        channels: usize,
        activation: Activation,
        std: f64,
    ) -> Self {
        Self {
            layers: kernels.iter().map(|&k| ConvLayer::new(rng, k, channels, std)).collect(),
            activation,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = self.activation.apply(&layer.forward(&h)?);
        }
        Ok(h)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params(&format!("{prefix}.layer{i}")))
            .collect()
    }
}
