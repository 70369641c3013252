//! Dense row-major `f64` tensors with tape-free reverse-mode differentiation.
//!
//! Every op returns a new [`Tensor`] that keeps `Rc` links to its inputs, so the
//! computation graph is simply the ownership graph. [`Tensor::backward`] walks it
//! once in reverse topological order and adds the resulting gradients into every
//! node that requires them. Gradients accumulate across calls until
//! [`Tensor::zero_grad`] is called.
//!
//! Broadcasting is limited to the scalar-vs-tensor case. Row/column vector
//! broadcasts that attention and linear layers need are separate, explicitly
//! named ops ([`Tensor::add_row`], [`Tensor::scale_rows`], ...).

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::rc::Rc;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite input to {op}")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// User-supplied elementwise function and its derivative, both of the input value.
#[derive(Clone, Copy)]
pub struct ElementwiseFn {
    pub name: &'static str,
    pub f: fn(f64) -> f64,
    pub df: fn(f64) -> f64,
}

enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    Relu(Tensor),
    Exp(Tensor),
    Tanh(Tensor),
    Gelu(Tensor),
    Map(Tensor, ElementwiseFn),
    Mask(Tensor, Vec<bool>),
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    Reshape(Tensor),
    Sum(Tensor),
    FrobeniusSq(Tensor),
    Softmax {
        x: Tensor,
        outer: usize,
        len: usize,
        inner: usize,
    },
    AddRow(Tensor, Tensor),
    AddCol(Tensor, Tensor),
    ScaleRows(Tensor, Tensor),
    ScaleCols(Tensor, Tensor),
    SliceCols(Tensor, usize),
    ConcatCols(Vec<Tensor>),
    ShiftRows(Tensor, isize),
    LayerNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Tensor,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Tanh(..) => "tanh",
            Op::Gelu(..) => "gelu",
            Op::Map(_, f) => f.name,
            Op::Mask(..) => "mask",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::FrobeniusSq(..) => "frobenius_sq",
            Op::Softmax { .. } => "softmax",
            Op::AddRow(..) => "add_row",
            Op::AddCol(..) => "add_col",
            Op::ScaleRows(..) => "scale_rows",
            Op::ScaleCols(..) => "scale_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ShiftRows(..) => "shift_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::AddRow(a, b)
            | Op::AddCol(a, b)
            | Op::ScaleRows(a, b)
            | Op::ScaleCols(a, b) => vec![a, b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Relu(x)
            | Op::Exp(x)
            | Op::Tanh(x)
            | Op::Gelu(x)
            | Op::Map(x, _)
            | Op::Mask(x, _)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::FrobeniusSq(x)
            | Op::SliceCols(x, _)
            | Op::ShiftRows(x, _) => vec![x],
            Op::Softmax { x, .. } => vec![x],
            Op::ConcatCols(xs) => xs.iter().collect(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Op,
}

/// Shared handle to a node of the computation graph.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("op", &self.0.op.name())
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &*self.0.data.borrow())
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Tensor {
    fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(None),
            op,
        }))
    }

    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if shape.contains(&0) {
            return Err(TensorError::Contract(format!(
                "shape {shape:?} has a zero dimension"
            )));
        }
        if numel(&shape) != data.len() {
            return Err(TensorError::Shape {
                op: "from_vec",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(None),
            op: Op::Leaf,
        })))
    }

    /// Constant (non-differentiable) tensor.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::leaf(shape.to_vec(), data, false)
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::leaf(shape.to_vec(), data, true)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::leaf(shape.to_vec(), vec![0.0; numel(shape)], false).expect("zero dimension")
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::leaf(vec![], vec![v], false).unwrap()
    }

    pub fn eye(n: usize) -> Tensor {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            d[i * n + i] = 1.0;
        }
        Self::leaf(vec![n, n], d, false).expect("zero dimension")
    }

    /// 2-D constant from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Tensor {
        let m = rows.len();
        let n = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == n), "ragged rows");
        Self::leaf(vec![m, n], rows.concat(), false).expect("zero dimension")
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn rows(&self) -> usize {
        self.0.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.0.shape[1]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.0.op, Op::Leaf)
    }

    pub fn op_name(&self) -> &'static str {
        self.0.op.name()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn scale_grad(&self, s: f64) {
        if let Some(g) = self.0.grad.borrow_mut().as_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Overwrites the values of a leaf in place (optimizer steps, buffer commits).
    pub fn set_data(&self, data: Vec<f64>) {
        assert!(self.is_leaf(), "set_data on non-leaf {}", self.op_name());
        assert_eq!(data.len(), self.numel());
        *self.0.data.borrow_mut() = data;
    }

    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        assert!(self.is_leaf(), "update_data on non-leaf {}", self.op_name());
        f(&mut self.0.data.borrow_mut());
    }

    /// Copy of the values with no graph linkage and no gradient.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.0.shape.clone(), self.to_vec(), false).unwrap()
    }

    /// Same values as a fresh trainable leaf.
    pub fn detach_param(&self) -> Tensor {
        Self::leaf(self.0.shape.clone(), self.to_vec(), true).unwrap()
    }

    /// Hash of shape and value bits; used to prove buffers were not touched.
    pub fn checksum(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.0.shape.hash(&mut h);
        for v in self.0.data.borrow().iter() {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    fn is_scalar(&self) -> bool {
        self.0.shape.is_empty()
    }

    fn require_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.0.shape.len() != 2 {
            return Err(TensorError::Shape {
                op,
                lhs: self.0.shape.clone(),
                rhs: vec![],
            });
        }
        Ok((self.0.shape[0], self.0.shape[1]))
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data().iter().map(|&v| f(v)).collect();
        Tensor::from_op(self.0.shape.clone(), data, op)
    }

    fn binary(
        &self,
        other: &Tensor,
        name: &'static str,
        make: fn(Tensor, Tensor) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (a, b) = (self.data(), other.data());
        let (shape, data): (Vec<usize>, Vec<f64>) = if self.0.shape == other.0.shape {
            (
                self.0.shape.clone(),
                a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect(),
            )
        } else if other.is_scalar() {
            let y = b[0];
            (self.0.shape.clone(), a.iter().map(|&x| f(x, y)).collect())
        } else if self.is_scalar() {
            let x = a[0];
            (other.0.shape.clone(), b.iter().map(|&y| f(x, y)).collect())
        } else {
            return Err(TensorError::Shape {
                op: name,
                lhs: self.0.shape.clone(),
                rhs: other.0.shape.clone(),
            });
        };
        drop((a, b));
        Ok(Tensor::from_op(shape, data, make(self.clone(), other.clone())))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", Op::Mul, |x, y| x * y)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(Op::Scale(self.clone(), c), |v| v * c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(Op::AddScalar(self.clone()), |v| v + c)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(Op::Relu(self.clone()), |v| v.max(0.0))
    }

    pub fn exp(&self) -> Tensor {
        self.unary(Op::Exp(self.clone()), f64::exp)
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(Op::Tanh(self.clone()), f64::tanh)
    }

    /// Tanh-approximated GELU, as used in BERT feed-forward blocks.
    pub fn gelu(&self) -> Tensor {
        self.unary(Op::Gelu(self.clone()), gelu)
    }

    /// Elementwise op with a caller-provided derivative.
    pub fn map(&self, func: ElementwiseFn) -> Tensor {
        self.unary(Op::Map(self.clone(), func), func.f)
    }

    /// Keeps entries where `keep` is true and writes an exact `+0.0` elsewhere.
    /// Gradient passes only through kept entries.
    pub fn mask(&self, keep: &[bool]) -> Result<Tensor> {
        if keep.len() != self.numel() {
            return Err(TensorError::Shape {
                op: "mask",
                lhs: self.0.shape.clone(),
                rhs: vec![keep.len()],
            });
        }
        let data = self
            .data()
            .iter()
            .zip(keep)
            .map(|(&v, &k)| if k { v } else { 0.0 })
            .collect();
        Ok(Tensor::from_op(
            self.0.shape.clone(),
            data,
            Op::Mask(self.clone(), keep.to_vec()),
        ))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let mismatch = || TensorError::Shape {
            op: "matmul",
            lhs: self.0.shape.clone(),
            rhs: other.0.shape.clone(),
        };
        if self.0.shape.len() != 2 || other.0.shape.len() != 2 {
            return Err(mismatch());
        }
        let (m, k) = (self.0.shape[0], self.0.shape[1]);
        let (k2, n) = (other.0.shape[0], other.0.shape[1]);
        if k != k2 {
            return Err(mismatch());
        }
        let out = matmul_raw(&self.data(), &other.data(), m, k, n);
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            Op::MatMul(self.clone(), other.clone()),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.require_2d("transpose")?;
        let out = transpose_raw(&self.data(), m, n);
        Ok(Tensor::from_op(vec![n, m], out, Op::Transpose(self.clone())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.0.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            Op::Reshape(self.clone()),
        ))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![], vec![s], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    /// Sum of squared entries.
    pub fn frobenius_sq(&self) -> Tensor {
        let s = self.data().iter().map(|v| v * v).sum();
        Tensor::from_op(vec![], vec![s], Op::FrobeniusSq(self.clone()))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = &self.0.shape;
        if axis >= shape.len() {
            return Err(TensorError::Shape {
                op: "softmax",
                lhs: shape.clone(),
                rhs: vec![axis],
            });
        }
        let data = self.data();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (data[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[idx(j)] /= z;
                }
            }
        }
        drop(data);
        Ok(Tensor::from_op(
            shape.clone(),
            out,
            Op::Softmax {
                x: self.clone(),
                outer,
                len,
                inner,
            },
        ))
    }

    /// `x[i, j] + b[j]` for a `[m, n]` matrix and `[n]` vector.
    pub fn add_row(&self, b: &Tensor) -> Result<Tensor> {
        let (m, n) = self.require_2d("add_row")?;
        if b.0.shape != [n] {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: self.0.shape.clone(),
                rhs: b.0.shape.clone(),
            });
        }
        let (x, bv) = (self.data(), b.data());
        let out = (0..m * n).map(|t| x[t] + bv[t % n]).collect();
        drop((x, bv));
        Ok(Tensor::from_op(vec![m, n], out, Op::AddRow(self.clone(), b.clone())))
    }

    /// `x[i, j] + b[i]` for a `[m, n]` matrix and `[m]` vector.
    pub fn add_col(&self, b: &Tensor) -> Result<Tensor> {
        let (m, n) = self.require_2d("add_col")?;
        if b.0.shape != [m] {
            return Err(TensorError::Shape {
                op: "add_col",
                lhs: self.0.shape.clone(),
                rhs: b.0.shape.clone(),
            });
        }
        let (x, bv) = (self.data(), b.data());
        let out = (0..m * n).map(|t| x[t] + bv[t / n]).collect();
        drop((x, bv));
        Ok(Tensor::from_op(vec![m, n], out, Op::AddCol(self.clone(), b.clone())))
    }

    /// `diag(v) · x`: row `i` scaled by `v[i]`.
    pub fn scale_rows(&self, v: &Tensor) -> Result<Tensor> {
        let (m, n) = self.require_2d("scale_rows")?;
        if v.0.shape != [m] {
            return Err(TensorError::Shape {
                op: "scale_rows",
                lhs: self.0.shape.clone(),
                rhs: v.0.shape.clone(),
            });
        }
        let (x, vv) = (self.data(), v.data());
        let out = (0..m * n).map(|t| x[t] * vv[t / n]).collect();
        drop((x, vv));
        Ok(Tensor::from_op(vec![m, n], out, Op::ScaleRows(self.clone(), v.clone())))
    }

    /// `x · diag(v)`: column `j` scaled by `v[j]`.
    pub fn scale_cols(&self, v: &Tensor) -> Result<Tensor> {
        let (m, n) = self.require_2d("scale_cols")?;
        if v.0.shape != [n] {
            return Err(TensorError::Shape {
                op: "scale_cols",
                lhs: self.0.shape.clone(),
                rhs: v.0.shape.clone(),
            });
        }
        let (x, vv) = (self.data(), v.data());
        let out = (0..m * n).map(|t| x[t] * vv[t % n]).collect();
        drop((x, vv));
        Ok(Tensor::from_op(vec![m, n], out, Op::ScaleCols(self.clone(), v.clone())))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.require_2d("slice_cols")?;
        if len == 0 || start + len > n {
            return Err(TensorError::Shape {
                op: "slice_cols",
                lhs: self.0.shape.clone(),
                rhs: vec![start, len],
            });
        }
        let x = self.data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&x[i * n + start..i * n + start + len]);
        }
        drop(x);
        Ok(Tensor::from_op(vec![m, len], out, Op::SliceCols(self.clone(), start)))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_cols of nothing".into()))?;
        let (m, _) = first.require_2d("concat_cols")?;
        let mut total = 0;
        for p in parts {
            let (pm, pn) = p.require_2d("concat_cols")?;
            if pm != m {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: first.0.shape.clone(),
                    rhs: p.0.shape.clone(),
                });
            }
            total += pn;
        }
        let mut out = Vec::with_capacity(m * total);
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for i in 0..m {
            for (p, d) in parts.iter().zip(&datas) {
                let pn = p.0.shape[1];
                out.extend_from_slice(&d[i * pn..(i + 1) * pn]);
            }
        }
        drop(datas);
        Ok(Tensor::from_op(vec![m, total], out, Op::ConcatCols(parts.to_vec())))
    }

    /// `out[i] = x[i - offset]` along rows, zero where the source is out of range.
    pub fn shift_rows(&self, offset: isize) -> Result<Tensor> {
        let (m, n) = self.require_2d("shift_rows")?;
        let x = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let src = i as isize - offset;
            if (0..m as isize).contains(&src) {
                let s = src as usize;
                out[i * n..(i + 1) * n].copy_from_slice(&x[s * n..(s + 1) * n]);
            }
        }
        drop(x);
        Ok(Tensor::from_op(vec![m, n], out, Op::ShiftRows(self.clone(), offset)))
    }

    /// Per-row layer normalization with affine `gamma`, `beta` of length `n`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (m, n) = self.require_2d("layer_norm")?;
        if gamma.0.shape != [n] || beta.0.shape != [n] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: self.0.shape.clone(),
                rhs: gamma.0.shape.clone(),
            });
        }
        let (x, g, b) = (self.data(), gamma.data(), beta.data());
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mu) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        drop((x, g, b));
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                rstd,
            },
        ))
    }

    /// Mean softmax cross-entropy of `[n, classes]` logits against integer labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let (n, c) = self.require_2d("cross_entropy")?;
        if labels.len() != n || labels.iter().any(|&l| l >= c) {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: self.0.shape.clone(),
                rhs: vec![labels.len()],
            });
        }
        let x = self.data();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "cross_entropy" });
        }
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &x[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..c {
                probs[i * c + j] = (row[j] - mx).exp() / z;
            }
            loss += z.ln() + mx - row[labels[i]];
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![],
            vec![loss / n as f64],
            Op::CrossEntropy {
                logits: self.clone(),
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse-mode sweep from a single-element tensor. Gradients are added to
    /// whatever each node already holds.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            node.propagate(&g, &mut grads);
            let mut slot = node.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Nodes reachable through `requires_grad` edges, parents before children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.0.op.parents().into_iter().rev() {
                if p.requires_grad() && !seen.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    fn propagate(&self, g: &[f64], grads: &mut HashMap<u64, Vec<f64>>) {
        let out = self.data();
        match &self.0.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accum_broadcast(grads, a, g.to_vec());
                accum_broadcast(grads, b, g.to_vec());
            }
            Op::Sub(a, b) => {
                accum_broadcast(grads, a, g.to_vec());
                accum_broadcast(grads, b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (a.data(), b.data());
                let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                if a.requires_grad() {
                    let ga = g.iter().enumerate().map(|(i, v)| v * pick(&bd, i)).collect();
                    accum_broadcast(grads, a, ga);
                }
                if b.requires_grad() {
                    let gb = g.iter().enumerate().map(|(i, v)| v * pick(&ad, i)).collect();
                    accum_broadcast(grads, b, gb);
                }
            }
            Op::Scale(x, c) => accum(grads, x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => accum(grads, x, g.to_vec()),
            Op::Relu(x) => {
                let xd = x.data();
                let gx = g.iter().zip(xd.iter()).map(|(v, &xi)| if xi > 0.0 { *v } else { 0.0 });
                let gx = gx.collect();
                drop(xd);
                accum(grads, x, gx);
            }
            Op::Exp(x) => accum(grads, x, g.iter().zip(out.iter()).map(|(v, o)| v * o).collect()),
            Op::Tanh(x) => accum(
                grads,
                x,
                g.iter().zip(out.iter()).map(|(v, o)| v * (1.0 - o * o)).collect(),
            ),
            Op::Gelu(x) => {
                let gx = g.iter().zip(x.data().iter()).map(|(v, &xi)| v * gelu_grad(xi)).collect();
                accum(grads, x, gx);
            }
            Op::Map(x, func) => {
                let gx = g.iter().zip(x.data().iter()).map(|(v, &xi)| v * (func.df)(xi)).collect();
                accum(grads, x, gx);
            }
            Op::Mask(x, keep) => accum(
                grads,
                x,
                g.iter().zip(keep).map(|(v, &k)| if k { *v } else { 0.0 }).collect(),
            ),
            Op::MatMul(a, b) => {
                let (m, k) = (a.0.shape[0], a.0.shape[1]);
                let n = b.0.shape[1];
                if a.requires_grad() {
                    // dA = G · Bᵀ
                    let bd = b.data();
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    drop(bd);
                    accum(grads, a, ga);
                }
                if b.requires_grad() {
                    // dB = Aᵀ · G
                    let ad = a.data();
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let dst = &mut gb[p * n..(p + 1) * n];
                            dst.iter_mut().zip(grow).for_each(|(d, gv)| *d += aip * gv);
                        }
                    }
                    drop(ad);
                    accum(grads, b, gb);
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (x.0.shape[0], x.0.shape[1]);
                accum(grads, x, transpose_raw(g, n, m));
            }
            Op::Sum(x) => accum(grads, x, vec![g[0]; x.numel()]),
            Op::FrobeniusSq(x) => {
                let gx = x.data().iter().map(|v| 2.0 * v * g[0]).collect();
                accum(grads, x, gx);
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let mut gx = vec![0.0; g.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..*len).map(|j| g[idx(j)] * out[idx(j)]).sum();
                        for j in 0..*len {
                            gx[idx(j)] = out[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                accum(grads, x, gx);
            }
            Op::AddRow(x, b) => {
                let n = b.numel();
                accum(grads, x, g.to_vec());
                if b.requires_grad() {
                    let mut gb = vec![0.0; n];
                    g.iter().enumerate().for_each(|(t, v)| gb[t % n] += v);
                    accum(grads, b, gb);
                }
            }
            Op::AddCol(x, b) => {
                let n = x.0.shape[1];
                accum(grads, x, g.to_vec());
                if b.requires_grad() {
                    let mut gb = vec![0.0; b.numel()];
                    g.iter().enumerate().for_each(|(t, v)| gb[t / n] += v);
                    accum(grads, b, gb);
                }
            }
            Op::ScaleRows(x, v) => {
                let n = x.0.shape[1];
                let (xd, vd) = (x.data(), v.data());
                let gx = g.iter().enumerate().map(|(t, gv)| gv * vd[t / n]).collect();
                let mut gv = vec![0.0; v.numel()];
                g.iter().enumerate().for_each(|(t, gt)| gv[t / n] += gt * xd[t]);
                drop((xd, vd));
                accum(grads, x, gx);
                accum(grads, v, gv);
            }
            Op::ScaleCols(x, v) => {
                let n = x.0.shape[1];
                let (xd, vd) = (x.data(), v.data());
                let gx = g.iter().enumerate().map(|(t, gv)| gv * vd[t % n]).collect();
                let mut gv = vec![0.0; n];
                g.iter().enumerate().for_each(|(t, gt)| gv[t % n] += gt * xd[t]);
                drop((xd, vd));
                accum(grads, x, gx);
                accum(grads, v, gv);
            }
            Op::SliceCols(x, start) => {
                let (m, n) = (x.0.shape[0], x.0.shape[1]);
                let len = self.0.shape[1];
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    gx[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                accum(grads, x, gx);
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (self.0.shape[0], self.0.shape[1]);
                let mut offset = 0;
                for p in parts {
                    let pn = p.0.shape[1];
                    if p.requires_grad() {
                        let mut gp = Vec::with_capacity(m * pn);
                        for i in 0..m {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + pn]);
                        }
                        accum(grads, p, gp);
                    }
                    offset += pn;
                }
            }
            Op::ShiftRows(x, offset) => {
                let (m, n) = (x.0.shape[0], x.0.shape[1]);
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let src = i as isize - offset;
                    if (0..m as isize).contains(&src) {
                        let s = src as usize;
                        gx[s * n..(s + 1) * n].copy_from_slice(&g[i * n..(i + 1) * n]);
                    }
                }
                accum(grads, x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = (x.0.shape[0], x.0.shape[1]);
                let gd = gamma.data();
                let mut gx = vec![0.0; m * n];
                let mut ggamma = vec![0.0; n];
                let mut gbeta = vec![0.0; n];
                for i in 0..m {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..n {
                        let t = i * n + j;
                        let dh = g[t] * gd[j];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[t];
                        ggamma[j] += g[t] * xhat[t];
                        gbeta[j] += g[t];
                    }
                    for j in 0..n {
                        let t = i * n + j;
                        let dh = g[t] * gd[j];
                        gx[t] = rstd[i] / n as f64 * (n as f64 * dh - sum_dh - xhat[t] * sum_dh_h);
                    }
                }
                drop(gd);
                accum(grads, x, gx);
                accum(grads, gamma, ggamma);
                accum(grads, beta, gbeta);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (n, c) = (logits.0.shape[0], logits.0.shape[1]);
                let scale = g[0] / n as f64;
                let mut gl = probs.iter().map(|p| p * scale).collect::<Vec<_>>();
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * c + l] -= scale;
                }
                accum(grads, logits, gl);
            }
        }
    }
}

fn accum(grads: &mut HashMap<u64, Vec<f64>>, t: &Tensor, g: Vec<f64>) {
    if !t.requires_grad() {
        return;
    }
    match grads.get_mut(&t.id()) {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => {
            grads.insert(t.id(), g);
        }
    }
}

/// Like [`accum`], reducing to a single entry when `t` was the broadcast scalar.
fn accum_broadcast(grads: &mut HashMap<u64, Vec<f64>>, t: &Tensor, g: Vec<f64>) {
    if t.numel() == 1 && g.len() != 1 {
        accum(grads, t, vec![g.iter().sum()]);
    } else {
        accum(grads, t, g);
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            dst.iter_mut().zip(brow).for_each(|(d, bv)| *d += aip * bv);
        }
    }
    out
}

fn transpose_raw(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}
