use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linear::Linear;
use crate::tensor::{Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    #[default]
    Gelu,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
            Activation::Gelu => x.gelu(),
        }
    }
}

/// Per-token stack `act(Linear)` over the given widths; the first width is the
/// width of the shared token embedding.
#[derive(Debug, Clone)]
pub struct MlpCore {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl MlpCore {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, widths: &[usize], activation: Activation, std: f64) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = widths[0];
        for &w in widths {
            layers.push(Linear::new(rng, prev, w, std));
            prev = w;
        }
        Self { layers, activation }
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
