//! Single post-norm transformer encoder layer (BERT block) over parameter tokens.
//!
//! No positional encodings are added, so the layer is exactly equivariant to
//! permutations of its input tokens.

use rand::Rng;

use super::linear::Linear;
use crate::tensor::{Result, Tensor, TensorError};

const LN_EPS: f64 = 1e-12;

/// Multi-head scaled dot-product self-attention:
/// `out_i = Σ_j softmax_j(q_i·k_j / √d_head) v_j` per head, heads concatenated,
/// then mixed by the output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, hidden: usize, heads: usize, std: f64) -> Self {
        Self {
            query: Linear::new(rng, hidden, hidden, std),
            key: Linear::new(rng, hidden, hidden, std),
            value: Linear::new(rng, hidden, hidden, std),
            output: Linear::new(rng, hidden, hidden, std),
            heads,
        }
    }

    pub fn hidden(&self) -> usize {
        self.query.weight.cols()
    }

    /// Concatenated per-head weighted sums of value vectors, before output mixing.
    pub fn attend(&self, x: &Tensor) -> Result<Tensor> {
        let hidden = self.hidden();
        if !hidden.is_multiple_of(self.heads) {
            return Err(TensorError::Contract(format!(
                "hidden size {hidden} not divisible by {} heads",
                self.heads
            )));
        }
        let d_head = hidden / self.heads;
        let q = self.query.forward(x)?;
        let k = self.key.forward(x)?;
        let v = self.value.forward(x)?;
        let scale = 1.0 / (d_head as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * d_head, d_head)?;
            let kh = k.slice_cols(h * d_head, d_head)?;
            let vh = v.slice_cols(h * d_head, d_head)?;
            let weights = qh.matmul(&kh.transpose()?)?.scale(scale).softmax(1)?;
            outs.push(weights.matmul(&vh)?);
        }
        if outs.len() == 1 {
            Ok(outs.pop().unwrap())
        } else {
            Tensor::concat_cols(&outs)
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.output.forward(&self.attend(x)?)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = self.query.params(&format!("{prefix}.query"));
        out.extend(self.key.params(&format!("{prefix}.key")));
        out.extend(self.value.params(&format!("{prefix}.value")));
        out.extend(self.output.params(&format!("{prefix}.output")));
        out
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Tensor::param(&[dim], vec![1.0; dim]).unwrap(),
            beta: Tensor::param(&[dim], vec![0.0; dim]).unwrap(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, LN_EPS)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.gamma"), self.gamma.clone()),
            (format!("{prefix}.beta"), self.beta.clone()),
        ]
    }
}

/// `h = LN(x + MHA(x)); out = LN(h + W2·gelu(W1·h))`.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub attn_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ffn_norm: LayerNorm,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        hidden: usize,
        heads: usize,
        ffn_dim: usize,
        std: f64,
    ) -> Self {
        Self {
            attention: MultiHeadAttention::new(rng, hidden, heads, std),
            attn_norm: LayerNorm::new(hidden),
            ffn_in: Linear::new(rng, hidden, ffn_dim, std),
            ffn_out: Linear::new(rng, ffn_dim, hidden, std),
            ffn_norm: LayerNorm::new(hidden),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.attn_norm.forward(&x.add(&self.attention.forward(x)?)?)?;
        let ff = self.ffn_out.forward(&self.ffn_in.forward(&h)?.gelu())?;
        self.ffn_norm.forward(&h.add(&ff)?)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = self.attention.params(&format!("{prefix}.attention"));
        out.extend(self.attn_norm.params(&format!("{prefix}.attn_norm")));
        out.extend(self.ffn_in.params(&format!("{prefix}.ffn_in")));
        out.extend(self.ffn_out.params(&format!("{prefix}.ffn_out")));
        out.extend(self.ffn_norm.params(&format!("{prefix}.ffn_norm")));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lin(w: &[&[f64]], b: &[f64]) -> Linear {
        Linear::from_tensors(
            Tensor::param(&[w.len(), w[0].len()], w.concat()).unwrap(),
            Tensor::param(&[b.len()], b.to_vec()).unwrap(),
        )
    }

    /// Softmax-weighted value sum written out with plain loops.
    fn oracle(tokens: &[[f64; 2]], wq: [[f64; 2]; 2], wk: [[f64; 2]; 2], wv: [[f64; 2]; 2]) -> Vec<[f64; 2]> {
        let proj = |t: &[f64; 2], w: &[[f64; 2]; 2]| {
            [t[0] * w[0][0] + t[1] * w[1][0], t[0] * w[0][1] + t[1] * w[1][1]]
        };
        let qs: Vec<_> = tokens.iter().map(|t| proj(t, &wq)).collect();
        let ks: Vec<_> = tokens.iter().map(|t| proj(t, &wk)).collect();
        let vs: Vec<_> = tokens.iter().map(|t| proj(t, &wv)).collect();
        qs.iter()
            .map(|q| {
                let logits: Vec<f64> = ks
                    .iter()
                    .map(|k| (q[0] * k[0] + q[1] * k[1]) / 2f64.sqrt())
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                let mut out = [0.0; 2];
                for (l, v) in logits.iter().zip(&vs) {
                    out[0] += l.exp() / z * v[0];
                    out[1] += l.exp() / z * v[1];
                }
                out
            })
            .collect()
    }

    #[test]
    fn two_token_single_head_matches_oracle() {
        let wq = [[0.5, -1.0], [1.5, 0.25]];
        let wk = [[1.0, 0.3], [-0.2, 0.8]];
        let wv = [[2.0, 0.0], [0.5, -1.0]];
        let rows = |w: [[f64; 2]; 2]| lin(&[&w[0], &w[1]], &[0.0, 0.0]);
        let mha = MultiHeadAttention {
            query: rows(wq),
            key: rows(wk),
            value: rows(wv),
            output: lin(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0]),
            heads: 1,
        };
        let tokens = [[0.7, -1.2], [0.4, 2.0]];
        let x = Tensor::from_rows(&[&tokens[0], &tokens[1]]);
        let got = mha.attend(&x).unwrap().to_vec();
        let want = oracle(&tokens, wq, wk, wv);
        for (g, w) in got.iter().zip(want.iter().flatten()) {
            assert!((g - w).abs() < 1e-10, "{g} vs {w}");
        }
    }

    #[test]
    fn single_token_returns_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mha = MultiHeadAttention::new(&mut rng, 8, 2, 0.5);
        let x = Tensor::from_rows(&[&[0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8]]);
        let attended = mha.attend(&x).unwrap().to_vec();
        let value = mha.value.forward(&x).unwrap().to_vec();
        assert_eq!(attended, value);
    }

    #[test]
    fn identical_tokens_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = EncoderLayer::new(&mut rng, 8, 2, 16, 0.3);
        let row = [0.3, -0.1, 0.9, 0.0, 0.2, -0.7, 0.5, 0.1];
        let x = Tensor::from_rows(&[&row, &row]);
        let y = layer.forward(&x).unwrap().to_vec();
        assert_eq!(y[..8], y[8..]);
    }

    #[test]
    fn heads_must_divide_hidden() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mha = MultiHeadAttention::new(&mut rng, 6, 4, 0.1);
        let x = Tensor::zeros(&[2, 6]);
        assert!(mha.attend(&x).is_err());
    }
}
