//! Frozen base layers and the two low-rank increments that can be attached to them.
//!
//! Inputs are column-major batches: `x` is `[d2, n]` (or a single `[d2]` vector) and
//! the output is `[d1, n]`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Tensor, TensorError};

/// Stable adapter identifier. Ordering is numeric, which fixes the iteration
/// order of importance records and checkpoint keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AdapterId(pub u32);

impl fmt::Display for AdapterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "adapter{}", self.0)
    }
}

impl std::str::FromStr for AdapterId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        s.strip_prefix("adapter")
            .and_then(|n| n.parse().ok())
            .map(AdapterId)
            .ok_or_else(|| format!("bad adapter id {s:?}"))
    }
}

/// A pretrained weight that never receives gradient.
#[derive(Debug, Clone)]
pub struct FrozenLinear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl FrozenLinear {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let shape = weight.shape().to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Shape {
                op: "frozen_linear",
                lhs: shape,
                rhs: vec![],
            });
        }
        if let Some(b) = &bias {
            if b.shape() != [shape[0]] {
                return Err(TensorError::Shape {
                    op: "frozen_linear",
                    lhs: shape,
                    rhs: b.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            weight: weight.detach(),
            bias: bias.map(|b| b.detach()),
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    /// `(d1, d2)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.weight.rows(), self.weight.cols())
    }

    pub fn checksum(&self) -> u64 {
        let w = self.weight.checksum();
        match &self.bias {
            Some(b) => w ^ b.checksum().rotate_left(1),
            None => w,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        with_columns(x, self.dims().1, |x| self.base(x))
    }

    fn base(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.weight.matmul(x)?;
        match &self.bias {
            Some(b) => y.add_col(b),
            None => Ok(y),
        }
    }
}

/// Runs `f` on `x` viewed as `[d2, n]`, restoring a vector shape if `x` was one.
fn with_columns(
    x: &Tensor,
    d2: usize,
    f: impl FnOnce(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    match x.shape() {
        [n] if *n == d2 => {
            let y = f(&x.reshape(&[d2, 1])?)?;
            let d1 = y.rows();
            y.reshape(&[d1])
        }
        [n, _] if *n == d2 => f(x),
        other => Err(TensorError::Shape {
            op: "adapter_input",
            lhs: vec![d2],
            rhs: other.to_vec(),
        }),
    }
}

/// `ΔW = B·A` with `A: [r, d2]`, `B: [d1, r]`.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub id: AdapterId,
    pub a: Tensor,
    pub b: Tensor,
}

impl LoraAdapter {
    pub fn new(id: AdapterId, a: Tensor, b: Tensor) -> Result<Self> {
        let (r, d2) = (a.rows(), a.cols());
        let (d1, rb) = (b.rows(), b.cols());
        if a.shape().len() != 2 || b.shape().len() != 2 || r != rb {
            return Err(TensorError::Shape {
                op: "lora_adapter",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        if 2 * r > d1.min(d2) {
            return Err(TensorError::Contract(format!(
                "LoRA rank {r} exceeds half of min({d1}, {d2})"
            )));
        }
        Ok(Self { id, a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn delta_w(&self) -> Result<Tensor> {
        self.b.matmul(&self.a)
    }
}

/// `(W0 + B·A)·x (+ bias)`.
pub fn lora_forward(layer: &FrozenLinear, ad: &LoraAdapter, x: &Tensor) -> Result<Tensor> {
    let (d1, d2) = layer.dims();
    if ad.a.cols() != d2 || ad.b.rows() != d1 {
        return Err(TensorError::Shape {
            op: "lora_forward",
            lhs: vec![d1, d2],
            rhs: vec![ad.b.rows(), ad.a.cols()],
        });
    }
    with_columns(x, d2, |x| {
        let base = layer.base(x)?;
        let delta = ad.b.matmul(&ad.a.matmul(x)?)?;
        base.add(&delta)
    })
}

/// `ΔW = P·diag(λ ⊙ mask)·Q` with `P: [d1, r]`, `λ: [r]`, `Q: [r, d2]`.
///
/// Masked singular values are pruned for good; they stay in the vectors so that
/// every shape is static over a run.
#[derive(Debug, Clone)]
pub struct SvdAdapter {
    pub id: AdapterId,
    pub p: Tensor,
    pub lambda: Tensor,
    pub q: Tensor,
    pub mask: Vec<bool>,
}

impl SvdAdapter {
    pub fn new(id: AdapterId, p: Tensor, lambda: Tensor, q: Tensor) -> Result<Self> {
        let r = lambda.numel();
        let ok = p.shape().len() == 2
            && q.shape().len() == 2
            && lambda.shape() == [r]
            && p.cols() == r
            && q.rows() == r;
        if !ok {
            return Err(TensorError::Shape {
                op: "svd_adapter",
                lhs: p.shape().to_vec(),
                rhs: q.shape().to_vec(),
            });
        }
        if r > p.rows().min(q.cols()) {
            return Err(TensorError::Contract(format!(
                "rank {r} exceeds min({}, {})",
                p.rows(),
                q.cols()
            )));
        }
        Ok(Self {
            id,
            p,
            lambda,
            q,
            mask: vec![true; r],
        })
    }

    pub fn rank(&self) -> usize {
        self.mask.len()
    }

    /// `(d1, d2)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.p.rows(), self.q.cols())
    }

    pub fn effective_rank(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Same id and mask with different factor tensors; used for the generated
    /// factors of a hypernetwork step.
    pub fn with_factors(&self, p: Tensor, lambda: Tensor, q: Tensor) -> Result<Self> {
        let mut out = Self::new(self.id, p, lambda, q)?;
        if out.rank() != self.rank() {
            return Err(TensorError::Shape {
                op: "with_factors",
                lhs: vec![self.rank()],
                rhs: vec![out.rank()],
            });
        }
        out.mask = self.mask.clone();
        Ok(out)
    }

    pub fn masked_lambda(&self) -> Result<Tensor> {
        self.lambda.mask(&self.mask)
    }

    pub fn lambda_values(&self) -> Vec<f64> {
        self.lambda.to_vec()
    }
}

/// `(W0 + P·diag(λ ⊙ mask)·Q)·x (+ bias)`, evaluated as `W0·x + P·(diag(λ)·(Q·x))`.
pub fn svd_forward(layer: &FrozenLinear, ad: &SvdAdapter, x: &Tensor) -> Result<Tensor> {
    let (d1, d2) = layer.dims();
    if ad.dims() != (d1, d2) {
        return Err(TensorError::Shape {
            op: "svd_forward",
            lhs: vec![d1, d2],
            rhs: vec![ad.dims().0, ad.dims().1],
        });
    }
    if ad.mask.len() != ad.lambda.numel() {
        return Err(TensorError::Shape {
            op: "svd_forward",
            lhs: vec![ad.lambda.numel()],
            rhs: vec![ad.mask.len()],
        });
    }
    with_columns(x, d2, |x| {
        let base = layer.base(x)?;
        let qx = ad.q.matmul(x)?;
        let delta = ad.p.matmul(&qx.scale_rows(&ad.masked_lambda()?)?)?;
        base.add(&delta)
    })
}

/// `‖PᵀP − I‖²_F + ‖QQᵀ − I‖²_F` with `I` of size `r × r`.
pub fn orth_penalty(ad: &SvdAdapter) -> Result<Tensor> {
    let eye = Tensor::eye(ad.rank());
    let ptp = ad.p.transpose()?.matmul(&ad.p)?;
    let qqt = ad.q.matmul(&ad.q.transpose()?)?;
    ptp.sub(&eye)?.frobenius_sq().add(&qqt.sub(&eye)?.frobenius_sq())
}

/// Dense `P·diag(λ ⊙ mask)·Q`.
pub fn effective_delta_w(ad: &SvdAdapter) -> Result<Tensor> {
    ad.p.scale_cols(&ad.masked_lambda()?)?.matmul(&ad.q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frozen(rows: &[&[f64]]) -> FrozenLinear {
        FrozenLinear::new(Tensor::from_rows(rows), None).unwrap()
    }

    #[test]
    fn lora_zero_b_is_frozen_output() {
        let layer = frozen(&[&[1.0, 2.0, 0.5, 0.0], &[0.0, -1.0, 3.0, 1.0], &[2.0, 2.0, 2.0, 2.0], &[0.1, 0.2, 0.3, 0.4]]);
        let a = Tensor::param(&[2, 4], vec![0.3, -0.1, 0.2, 0.7, 0.5, 0.5, -0.4, 0.1]).unwrap();
        let b = Tensor::param(&[4, 2], vec![0.0; 8]).unwrap();
        let ad = LoraAdapter::new(AdapterId(0), a, b).unwrap();
        let x = Tensor::from_vec(&[4, 2], vec![1.0, 0.5, -1.0, 2.0, 0.25, 0.0, 3.0, -2.0]).unwrap();
        let y = lora_forward(&layer, &ad, &x).unwrap();
        assert_eq!(y.to_vec(), layer.forward(&x).unwrap().to_vec());
    }

    #[test]
    fn lora_hand_example() {
        let layer = frozen(&[&[0.0, 0.0], &[0.0, 0.0]]);
        let ad = LoraAdapter::new(
            AdapterId(0),
            Tensor::from_rows(&[&[0.0, 1.0]]),
            Tensor::from_rows(&[&[1.0], &[0.0]]),
        )
        .unwrap();
        let x = Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap();
        let y = lora_forward(&layer, &ad, &x).unwrap();
        assert_eq!(y.shape(), &[2]);
        assert_eq!(y.to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn lora_rank_limit() {
        let a = Tensor::zeros(&[3, 4]);
        let b = Tensor::zeros(&[4, 3]);
        assert!(matches!(
            LoraAdapter::new(AdapterId(0), a, b),
            Err(TensorError::Contract(_))
        ));
    }

    #[test]
    fn lora_shape_mismatch() {
        let layer = frozen(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        let ad = LoraAdapter::new(AdapterId(0), Tensor::zeros(&[1, 2]), Tensor::zeros(&[2, 1])).unwrap();
        let x = Tensor::zeros(&[3]);
        assert!(matches!(lora_forward(&layer, &ad, &x), Err(TensorError::Shape { .. })));
    }

    fn svd(p: &[&[f64]], lambda: &[f64], q: &[&[f64]]) -> SvdAdapter {
        SvdAdapter::new(
            AdapterId(0),
            Tensor::from_rows(p),
            Tensor::from_vec(&[lambda.len()], lambda.to_vec()).unwrap(),
            Tensor::from_rows(q),
        )
        .unwrap()
    }

    #[test]
    fn svd_scalar_hand_example() {
        let layer = frozen(&[&[2.0]]);
        let ad = svd(&[&[1.0]], &[3.0], &[&[1.0]]);
        let y = svd_forward(&layer, &ad, &Tensor::from_vec(&[1], vec![1.0]).unwrap()).unwrap();
        assert_eq!(y.to_vec(), vec![5.0]);
    }

    #[test]
    fn svd_zero_lambda_and_full_prune_are_frozen() {
        let layer = frozen(&[&[1.0, -1.0, 0.5], &[0.2, 0.3, 0.4], &[2.0, 0.0, 1.0]]);
        let x = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, -0.5, 0.5, 3.0, -1.0]).unwrap();
        let frozen_out = layer.forward(&x).unwrap().to_vec();
        let p: &[&[f64]] = &[&[0.3, 1.0], &[-0.7, 0.2], &[0.5, 0.5]];
        let q: &[&[f64]] = &[&[1.0, 0.1, -0.3], &[0.4, 0.4, 0.9]];
        let zero = svd(p, &[0.0, 0.0], q);
        assert_eq!(svd_forward(&layer, &zero, &x).unwrap().to_vec(), frozen_out);
        let mut pruned = svd(p, &[1.7, -2.3], q);
        pruned.mask = vec![false, false];
        assert_eq!(svd_forward(&layer, &pruned, &x).unwrap().to_vec(), frozen_out);
    }

    #[test]
    fn orth_penalty_cases() {
        let ortho = svd(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]], &[1.0, 1.0], &[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0]]);
        assert_eq!(orth_penalty(&ortho).unwrap().item(), 0.0);
        let scaled = svd(&[&[2.0, 0.0], &[0.0, 2.0]], &[1.0, 1.0], &[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(orth_penalty(&scaled).unwrap().item(), 18.0);
    }

    #[test]
    fn orth_penalty_rank_one_unit_vectors() {
        let s = 1.0 / 3f64.sqrt();
        let ad = svd(&[&[s], &[s], &[s]], &[0.4], &[&[0.6, 0.8]]);
        assert!(orth_penalty(&ad).unwrap().item().abs() < 1e-15);
    }

    #[test]
    fn delta_w_all_masked_is_zero() {
        let mut ad = svd(&[&[1.0, 2.0], &[3.0, 4.0]], &[1.0, 2.0], &[&[1.0, 0.0], &[0.5, 0.5]]);
        ad.mask = vec![false, false];
        assert!(effective_delta_w(&ad).unwrap().to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_rejects_bad_bias() {
        let w = Tensor::zeros(&[2, 3]);
        assert!(FrozenLinear::new(w, Some(Tensor::zeros(&[3]))).is_err());
    }

    #[test]
    fn adapter_id_round_trip() {
        let id: AdapterId = "adapter12".parse().unwrap();
        assert_eq!(id, AdapterId(12));
        assert_eq!(id.to_string(), "adapter12");
        assert!("layer1".parse::<AdapterId>().is_err());
    }
}
