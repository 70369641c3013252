//! Hypernetworks that map a low-rank factor to its next value.
//!
//! One [`HyperNet`] exists per role (P, Λ or Q) and is shared by every adapter.
//! A factor enters as a token sequence:
//!
//! | role | factor shape | tokens          | token dim |
//! |------|--------------|-----------------|-----------|
//! | P    | `[d1, r]`    | rows (d1)       | r         |
//! | Q    | `[r, d2]`    | columns (d2)    | r         |
//! | Λ    | `[r]`        | entries (r)     | 1         |
//!
//! Each generation step:
//!
//! 1. tokens are divided by the RMS of the whole factor, so the network sees
//!    the same scale whether P sits at its initial 0.02 or has grown to unit
//!    columns;
//! 2. a per-token-dim input projection followed by `sin` lifts each token to
//!    random Fourier features, and fixed Fourier features of the token index
//!    are added (see [`index_features`]);
//! 3. the shared core transforms the sequence;
//! 4. the matching output projection, times [`UPDATE_SCALE`], gives a step that
//!    is added to the input tokens: `H(C) = C + G(C)`.
//!
//! Without the skip, feeding each output back in as the next input behaves
//! like power iteration and collapses P and Q to rank one. Without index
//! features, tokens with equal values can never separate: Λ starts at zero,
//! so all of its entries (and the Λ of every layer) would stay tied forever.
//!
//! Projections are keyed by token dim only, so adapters of different widths
//! but equal rank share them. The generated factor has the same shape as the
//! input and depends on the input only as data: gradients reach the
//! hypernetwork weights, never the input buffer.

mod attention;
mod conv;
mod linear;
mod mlp;

use std::collections::BTreeMap;
use std::fmt;

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use attention::{EncoderLayer, LayerNorm, MultiHeadAttention};
pub use conv::{ConvCore, ConvLayer};
pub use linear::Linear;
pub use mlp::{Activation, MlpCore};

use crate::checkpoint::KvFile;
use crate::init::normal_param;
use crate::tensor::{ElementwiseFn, Tensor, TensorError};

/// Multiplier on the output projection; sets the size of one generated step.
pub const UPDATE_SCALE: f64 = 0.02;
/// Scale of the input projection weights, relative to `1/sqrt(token_dim)`.
/// Sets the bandwidth of the Fourier features of normalized tokens.
pub const FEATURE_FREQUENCY: f64 = 3.0;
/// Amplitude of the token-index features.
pub const INDEX_AMPLITUDE: f64 = 2.0;

const SIN: ElementwiseFn = ElementwiseFn {
    name: "sin",
    f: f64::sin,
    df: f64::cos,
};

/// `[n, width]` matrix with entry `(i, k) = INDEX_AMPLITUDE * sin(w_k i + b_k)`.
///
/// Frequencies and phases follow additive low-discrepancy sequences over
/// `[0, 2π)`, so they need no seed and rows for distinct indices are close to
/// orthogonal.
pub fn index_features(n: usize, width: usize) -> Tensor {
    const GOLDEN: f64 = 0.618_033_988_749_894_9;
    const SILVER: f64 = 0.414_213_562_373_095_1;
    let mut data = Vec::with_capacity(n * width);
    for i in 0..n {
        for k in 0..width {
            let freq = TAU * (k as f64 * GOLDEN).fract();
            let phase = TAU * (k as f64 * SILVER).fract();
            data.push(INDEX_AMPLITUDE * (freq * i as f64 + phase).sin());
        }
    }
    Tensor::from_vec(&[n, width], data).expect("shape matches data")
}

#[derive(Debug, thiserror::Error)]
pub enum HyperError {
    #[error("hypernetwork configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, HyperError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperRole {
    P,
    Lambda,
    Q,
}

impl fmt::Display for HyperRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HyperRole::P => "P",
            HyperRole::Lambda => "lambda",
            HyperRole::Q => "Q",
        })
    }
}

impl HyperRole {
    /// Token dimension a factor of this shape produces.
    pub fn token_dim(self, shape: &[usize]) -> Result<usize> {
        match (self, shape) {
            (HyperRole::P, [_, r]) => Ok(*r),
            (HyperRole::Q, [r, _]) => Ok(*r),
            (HyperRole::Lambda, [_]) => Ok(1),
            _ => Err(HyperError::Config(format!(
                "{self} role cannot tokenize a factor of shape {shape:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Attention,
    Mlp,
    Conv,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Attention => "attention",
            BackendKind::Mlp => "mlp",
            BackendKind::Conv => "conv",
        })
    }
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "attention" => Ok(BackendKind::Attention),
            "mlp" => Ok(BackendKind::Mlp),
            "conv" => Ok(BackendKind::Conv),
            other => Err(format!("unknown backend {other:?} (expected attention, mlp or conv)")),
        }
    }
}

/// Architecture of the shared core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HyperBackend {
    /// One encoder layer.
    Attention {
        hidden_dim: usize,
        heads: usize,
        ffn_dim: usize,
    },
    Mlp {
        widths: Vec<usize>,
        #[serde(default)]
        activation: Activation,
    },
    Conv {
        kernels: Vec<usize>,
        channels: usize,
        #[serde(default)]
        activation: Activation,
    },
}

impl HyperBackend {
    /// Desk-scale encoder: hidden 64, 4 heads.
    pub fn attention() -> Self {
        HyperBackend::Attention {
            hidden_dim: 64,
            heads: 4,
            ffn_dim: 256,
        }
    }

    /// TinyBERT-sized layer: hidden 312, 12 heads, feed-forward 1200.
    pub fn attention_tinybert() -> Self {
        HyperBackend::Attention {
            hidden_dim: 312,
            heads: 12,
            ffn_dim: 1200,
        }
    }

    pub fn mlp() -> Self {
        HyperBackend::Mlp {
            widths: vec![64, 64],
            activation: Activation::Gelu,
        }
    }

    pub fn conv() -> Self {
        HyperBackend::Conv {
            kernels: vec![3, 3],
            channels: 64,
            activation: Activation::Gelu,
        }
    }

    pub fn default_for(kind: BackendKind) -> Self {
        match kind {
            BackendKind::Attention => Self::attention(),
            BackendKind::Mlp => Self::mlp(),
            BackendKind::Conv => Self::conv(),
        }
    }

    pub fn kind(&self) -> BackendKind {
        match self {
            HyperBackend::Attention { .. } => BackendKind::Attention,
            HyperBackend::Mlp { .. } => BackendKind::Mlp,
            HyperBackend::Conv { .. } => BackendKind::Conv,
        }
    }

    /// Width of the token embedding the core consumes and produces.
    pub fn width(&self) -> usize {
        match self {
            HyperBackend::Attention { hidden_dim, .. } => *hidden_dim,
            HyperBackend::Mlp { widths, .. } => *widths.last().unwrap_or(&0),
            HyperBackend::Conv { channels, .. } => *channels,
        }
    }

    fn input_width(&self) -> usize {
        match self {
            HyperBackend::Mlp { widths, .. } => widths[0],
            other => other.width(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HyperError::Config(m));
        match self {
            HyperBackend::Attention {
                hidden_dim,
                heads,
                ffn_dim,
            } => {
                if *hidden_dim == 0 || *heads == 0 || *ffn_dim == 0 {
                    return bad("attention sizes must be positive".into());
                }
                if hidden_dim % heads != 0 {
                    return bad(format!("hidden_dim {hidden_dim} not divisible by heads {heads}"));
                }
            }
            HyperBackend::Mlp { widths, .. } => {
                if widths.is_empty() || widths.contains(&0) {
                    return bad("mlp widths must be a non-empty list of positive sizes".into());
                }
            }
            HyperBackend::Conv {
                kernels, channels, ..
            } => {
                if kernels.is_empty() || *channels == 0 {
                    return bad("conv needs at least one kernel and positive channels".into());
                }
                if let Some(k) = kernels.iter().find(|&&k| k % 2 == 0) {
                    return bad(format!("conv kernel width {k} must be odd for same padding"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Core {
    Attention(EncoderLayer),
    Mlp(MlpCore),
    Conv(ConvCore),
}

impl Core {
    fn build(backend: &HyperBackend, rng: &mut ChaCha8Rng, std: f64) -> Self {
        match backend {
            HyperBackend::Attention {
                hidden_dim,
                heads,
                ffn_dim,
            } => Core::Attention(EncoderLayer::new(rng, *hidden_dim, *heads, *ffn_dim, std)),
            HyperBackend::Mlp { widths, activation } => {
                Core::Mlp(MlpCore::new(rng, widths, *activation, std))
            }
            HyperBackend::Conv {
                kernels,
                channels,
                activation,
            } => Core::Conv(ConvCore::new(rng, kernels, *channels, *activation, std)),
        }
    }

    fn forward(&self, x: &Tensor) -> crate::tensor::Result<Tensor> {
        match self {
            Core::Attention(l) => l.forward(x),
            Core::Mlp(m) => m.forward(x),
            Core::Conv(c) => c.forward(x),
        }
    }

    fn params(&self) -> Vec<(String, Tensor)> {
        match self {
            Core::Attention(l) => l.params("core"),
            Core::Mlp(m) => m.params("core"),
            Core::Conv(c) => c.params("core"),
        }
    }
}

/// Input/output projections for one token dimension.
#[derive(Debug, Clone)]
pub struct ShapeAdapter {
    pub input: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone)]
pub struct HyperNet {
    role: HyperRole,
    backend: HyperBackend,
    core: Core,
    shapes: BTreeMap<usize, ShapeAdapter>,
    init_std: f64,
    zero_output: bool,
    rng: ChaCha8Rng,
}

impl HyperNet {
    /// Builds the shared core with fan-in scaled weights, `N(0, 1/width)`.
    /// `zero_output` makes every output projection start at zero, so the
    /// generated factor equals its input until the first update; otherwise
    /// output weights are `N(0, init_std²)`.
    pub fn new(
        role: HyperRole,
        backend: HyperBackend,
        init_std: f64,
        zero_output: bool,
        seed: u64,
    ) -> Result<Self> {
        backend.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let core_std = 1.0 / (backend.width() as f64).sqrt();
        let core = Core::build(&backend, &mut rng, core_std);
        let net = Self {
            role,
            backend,
            core,
            shapes: BTreeMap::new(),
            init_std,
            zero_output,
            rng,
        };
        log::debug!(
            "{} hypernetwork ({}) core parameters: {}",
            role,
            net.backend.kind(),
            net.core_param_count()
        );
        Ok(net)
    }

    pub fn role(&self) -> HyperRole {
        self.role
    }

    pub fn backend(&self) -> &HyperBackend {
        &self.backend
    }

    /// Registers projections for `token_dim`; a second call is a no-op.
    pub fn register_shape(&mut self, token_dim: usize) -> Result<()> {
        if token_dim == 0 {
            return Err(HyperError::Config("token dim must be at least 1".into()));
        }
        if self.shapes.contains_key(&token_dim) {
            return Ok(());
        }
        let (d_in, width) = (self.backend.input_width(), self.backend.width());
        let freq_std = FEATURE_FREQUENCY / (token_dim as f64).sqrt();
        let weight = normal_param(&mut self.rng, &[token_dim, d_in], freq_std);
        let phases = (0..d_in).map(|_| self.rng.random_range(0.0..2.0 * PI)).collect();
        let bias = Tensor::param(&[d_in], phases)?;
        let input = Linear::from_tensors(weight, bias);
        let output = if self.zero_output {
            Linear::zeros(width, token_dim)
        } else {
            Linear::new(&mut self.rng, width, token_dim, self.init_std)
        };
        self.shapes.insert(token_dim, ShapeAdapter { input, output });
        Ok(())
    }

    pub fn registered_dims(&self) -> Vec<usize> {
        self.shapes.keys().copied().collect()
    }

    pub fn shape_adapter(&self, token_dim: usize) -> Option<&ShapeAdapter> {
        self.shapes.get(&token_dim)
    }

    /// Factor as a `[tokens, token_dim]` matrix.
    pub fn tokenize(&self, matrix: &Tensor) -> Result<Tensor> {
        let dim = self.role.token_dim(matrix.shape())?;
        if !self.shapes.contains_key(&dim) {
            return Err(HyperError::Config(format!(
                "{} hypernetwork has no projection for token dim {dim}; registered: {:?}",
                self.role,
                self.registered_dims()
            )));
        }
        Ok(match self.role {
            HyperRole::P => matrix.clone(),
            HyperRole::Q => matrix.transpose()?,
            HyperRole::Lambda => matrix.reshape(&[matrix.numel(), 1])?,
        })
    }

    /// Inverse of [`HyperNet::tokenize`] for a factor of shape `shape`.
    pub fn detokenize(&self, tokens: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let out = match self.role {
            HyperRole::P => tokens.clone(),
            HyperRole::Q => tokens.transpose()?,
            HyperRole::Lambda => tokens.reshape(shape)?,
        };
        if out.shape() != shape {
            return Err(HyperError::Config(format!(
                "{} tokens {:?} do not form a factor of shape {shape:?}",
                self.role,
                tokens.shape()
            )));
        }
        Ok(out)
    }

    /// Next value of `current`, differentiable in the hypernetwork weights only.
    ///
    /// `current` must be a plain buffer (no gradient). For the Λ role, `mask`
    /// zeroes pruned entries of the output.
    pub fn generate(&self, current: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
        if current.requires_grad() {
            return Err(HyperError::Config(format!(
                "{} hypernetwork input must be a detached buffer",
                self.role
            )));
        }
        let tokens = self.tokenize(current)?;
        let sa = &self.shapes[&tokens.cols()];
        let values = current.to_vec();
        let rms = (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt();
        let unit = if rms > 1e-12 { tokens.scale(1.0 / rms) } else { tokens.clone() };
        let lifted = sa.input.forward(&unit)?.map(SIN);
        let features = lifted.add(&index_features(lifted.rows(), lifted.cols()))?;
        let hidden = self.core.forward(&features)?;
        let update = sa.output.forward(&hidden)?.scale(UPDATE_SCALE);
        let out = self.detokenize(&tokens.add(&update)?, current.shape())?;
        match (self.role, mask) {
            (HyperRole::Lambda, Some(m)) => Ok(out.mask(m)?),
            (HyperRole::Lambda, None) => Ok(out),
            (role, Some(_)) => Err(HyperError::Config(format!("{role} role takes no mask"))),
            (_, None) => Ok(out),
        }
    }

    /// Core then shape-adapter parameters, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.core.params();
        for (dim, sa) in &self.shapes {
            out.extend(sa.input.params(&format!("shape{dim}.input")));
            out.extend(sa.output.params(&format!("shape{dim}.output")));
        }
        out
    }

    /// Weights of the shared core only.
    pub fn core_params(&self) -> Vec<Tensor> {
        self.core.params().into_iter().map(|(_, t)| t).collect()
    }

    /// Input and output projections of every registered token dim.
    pub fn projection_params(&self) -> Vec<Tensor> {
        self.shapes
            .values()
            .flat_map(|sa| [&sa.input, &sa.output])
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect()
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(Tensor::numel).sum()
    }

    pub fn core_param_count(&self) -> usize {
        self.core.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Hash over the shared core's weights.
    pub fn core_checksum(&self) -> u64 {
        self.core
            .params()
            .iter()
            .fold(0u64, |acc, (_, t)| acc.rotate_left(7) ^ t.checksum())
    }

    /// Zeroes every output projection. The trainer calls this right before each
    /// optimizer step, so the projections hold only the latest step and the
    /// generated update does not keep repeating earlier ones.
    pub fn clear_outputs(&self) {
        for sa in self.shapes.values() {
            for t in [&sa.output.weight, &sa.output.bias] {
                t.update_data(|w| w.fill(0.0));
            }
        }
    }

    pub fn zero_grad(&self) {
        for p in self.params() {
            p.zero_grad();
        }
    }

    /// Adds every weight under `hyper/{role}/{name}`.
    pub fn write_checkpoint(&self, kv: &mut KvFile) {
        for (name, t) in self.named_params() {
            kv.insert_f64(format!("hyper/{}/{name}", self.role), t.shape(), t.to_vec());
        }
    }

    /// Overwrites weights from a checkpoint written by [`HyperNet::write_checkpoint`].
    pub fn load_checkpoint(&self, kv: &KvFile) -> Result<()> {
        for (name, t) in self.named_params() {
            let key = format!("hyper/{}/{name}", self.role);
            let value = kv
                .get(&key)
                .and_then(|v| v.as_f64().map(|d| (v.shape().to_vec(), d.to_vec())))
                .ok_or_else(|| HyperError::Config(format!("checkpoint lacks {key}")))?;
            if value.0 != t.shape() {
                return Err(HyperError::Config(format!("{key} has shape {:?}", value.0)));
            }
            t.set_data(value.1);
        }
        Ok(())
    }
}
