//! Dense tensor values with a dynamically recorded computation graph.
//!
//! Every operation allocates a fresh immutable tensor and, when any operand
//! participates in differentiation, records the producing [`Op`] so that
//! [`Tensor::backward`] can replay the graph in reverse. Values are `f32`
//! row-major; the only implicit broadcast is scalar-with-tensor.

mod conv;
mod grad;
mod ops;
mod parallel;
mod serial;

pub use grad::{GradStore, Graph};
pub use parallel::set_worker_threads;
pub(crate) use parallel::par_chunks_mut;

use crate::error::{Error, Result};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed)
}

/// Extents of a dense row-major tensor.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: Vec<usize>) -> Self {
        Shape(dims)
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Interpret as `[N, C, H, W]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.0[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::ShapeMismatch(format!(
                "expected a rank-4 [N,C,H,W] tensor, got {self}"
            ))),
        }
    }

    /// Interpret as `[rows, cols]`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.0[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::ShapeMismatch(format!(
                "expected a rank-2 tensor, got {self}"
            ))),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "[{}]", dims.join("x"))
    }
}

impl From<Vec<usize>> for Shape {
    fn from(dims: Vec<usize>) -> Self {
        Shape(dims)
    }
}

impl From<&[usize]> for Shape {
    fn from(dims: &[usize]) -> Self {
        Shape(dims.to_vec())
    }
}

impl<const N: usize> From<[usize; N]> for Shape {
    fn from(dims: [usize; N]) -> Self {
        Shape(dims.to_vec())
    }
}

/// The operation that produced a tensor, with everything backward needs.
#[derive(Clone)]
pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    AddScalar(Tensor),
    MulScalar(Tensor, f32),
    /// scale * scaled + added, shapes equal
    Axpy {
        scale: f32,
        scaled: Tensor,
        added: Tensor,
    },
    /// minuend - scale * subtrahend, shapes equal
    SubScaled {
        minuend: Tensor,
        subtrahend: Tensor,
        scale: f32,
    },
    Clamp {
        input: Tensor,
        lo: f32,
        hi: f32,
    },
    Abs(Tensor),
    Square(Tensor),
    Sqrt(Tensor),
    Log(Tensor),
    Softplus(Tensor),
    SumAll(Tensor),
    MeanAll(Tensor),
    MaxAll {
        input: Tensor,
        argmax: usize,
    },
    /// [N,C,H,W] -> [N], summing each image
    SumPerImage(Tensor),
    /// [N] -> [N,C,H,W], repeating each image's scalar
    ExpandPerImage(Tensor),
    ConcatChannels(Tensor, Tensor),
    Reshape(Tensor),
    /// forward difference along H: out[..,i,..] = in[..,i+1,..] - in[..,i,..]
    DiffH(Tensor),
    DiffW(Tensor),
    MatMul(Tensor, Tensor),
    AddChannelBias {
        input: Tensor,
        bias: Tensor,
    },
    AddRowBias {
        input: Tensor,
        bias: Tensor,
    },
    /// mean softmax cross-entropy over rows; probs saved for backward
    CrossEntropy {
        logits: Tensor,
        labels: Arc<Vec<usize>>,
        probs: Vec<f32>,
    },
    Conv2d {
        input: Tensor,
        kernel: Tensor,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        input: Tensor,
        kernel: Tensor,
        stride: usize,
        padding: usize,
    },
    AvgPool2d {
        input: Tensor,
        k: usize,
        stride: usize,
    },
    /// Threshold-ladder spike count: sum_k 1[u >= k*theta] for k in 1..=levels.
    /// Forward is integer-valued; backward is the rectangular surrogate.
    FireLadder {
        membrane: Tensor,
        levels: usize,
        threshold: f32,
        width: f32,
    },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::ConcatChannels(a, b)
            | Op::MatMul(a, b) => vec![a, b],
            Op::Axpy { scaled, added, .. } => vec![scaled, added],
            Op::SubScaled {
                minuend,
                subtrahend,
                ..
            } => vec![minuend, subtrahend],
            Op::AddChannelBias { input, bias } | Op::AddRowBias { input, bias } => {
                vec![input, bias]
            }
            Op::Conv2d { input, kernel, .. } | Op::ConvTranspose2d { input, kernel, .. } => {
                vec![input, kernel]
            }
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Clamp { input: a, .. }
            | Op::Abs(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Log(a)
            | Op::Softplus(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::MaxAll { input: a, .. }
            | Op::SumPerImage(a)
            | Op::ExpandPerImage(a)
            | Op::Reshape(a)
            | Op::DiffH(a)
            | Op::DiffW(a)
            | Op::CrossEntropy { logits: a, .. }
            | Op::AvgPool2d { input: a, .. }
            | Op::FireLadder { membrane: a, .. } => vec![a],
        }
    }
}

struct TensorInner {
    id: u64,
    shape: Shape,
    data: Vec<f32>,
    op: Option<Op>,
    requires_grad: bool,
}

/// Immutable dense `f32` tensor; cloning is a cheap reference bump.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<TensorInner>,
}

impl Tensor {
    fn from_parts(
        shape: Shape,
        data: Vec<f32>,
        op: Option<Op>,
        requires_grad: bool,
    ) -> Result<Tensor> {
        if shape.numel() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape} implies {} elements, data has {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Arc::new(TensorInner {
                id: fresh_id(),
                shape,
                data,
                op,
                requires_grad,
            }),
        })
    }

    /// Result of an op: validates finiteness and propagates grad tracking.
    pub(crate) fn from_op(
        shape: impl Into<Shape>,
        data: Vec<f32>,
        op: Op,
        name: &'static str,
    ) -> Result<Tensor> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        // untracked results drop their op so inference holds no graph alive
        let op = if requires_grad { Some(op) } else { None };
        Tensor::from_parts(shape.into(), data, op, requires_grad)
    }

    /// Like [`from_op`] but never tracked: for indicator-style outputs
    /// whose derivative is zero everywhere, so no op is recorded.
    pub(crate) fn from_op_no_grad(
        shape: impl Into<Shape>,
        data: Vec<f32>,
        name: &'static str,
    ) -> Result<Tensor> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        Tensor::from_parts(shape.into(), data, None, false)
    }

    /// Untracked leaf tensor.
    pub fn new(shape: impl Into<Shape>, data: Vec<f32>) -> Result<Tensor> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("leaf tensor contains non-finite values".into()));
        }
        Tensor::from_parts(shape.into(), data, None, false)
    }

    /// Differentiable leaf (a network parameter or an attacked input).
    pub fn var(shape: impl Into<Shape>, data: Vec<f32>) -> Result<Tensor> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("leaf tensor contains non-finite values".into()));
        }
        Tensor::from_parts(shape.into(), data, None, true)
    }

    pub fn zeros(shape: impl Into<Shape>) -> Tensor {
        let shape = shape.into();
        let n = shape.numel();
        Tensor::from_parts(shape, vec![0.0; n], None, false).expect("zeros is always consistent")
    }

    pub fn full(shape: impl Into<Shape>, value: f32) -> Result<Tensor> {
        let shape = shape.into();
        let n = shape.numel();
        Tensor::new(shape, vec![value; n])
    }

    pub fn scalar(value: f32) -> Result<Tensor> {
        Tensor::new([1], vec![value])
    }

    /// Same data, fresh untracked leaf: cuts the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::from_parts(self.shape().clone(), self.data().to_vec(), None, false)
            .expect("detach preserves consistency")
    }

    /// Same data as a differentiable leaf.
    pub fn detach_var(&self) -> Tensor {
        Tensor::from_parts(self.shape().clone(), self.data().to_vec(), None, true)
            .expect("detach preserves consistency")
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &Shape {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.numel()
    }

    pub fn data(&self) -> &[f32] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn op(&self) -> Option<&Op> {
        self.inner.op.as_ref()
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.op.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "item() on tensor of shape {}",
                self.shape()
            )));
        }
        Ok(self.inner.data[0])
    }

    /// Element at a full multi-index; test and report convenience.
    pub fn at(&self, index: &[usize]) -> f32 {
        let dims = self.shape().dims();
        assert_eq!(index.len(), dims.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &d)) in index.iter().zip(dims).enumerate() {
            assert!(ix < d, "index {ix} out of bounds for dim {i} ({d})");
            flat = flat * d + ix;
        }
        self.inner.data[flat]
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f32> = self.data().iter().take(8).copied().collect();
        let ellipsis = if self.numel() > 8 { ", ..." } else { "" };
        write!(
            f,
            "Tensor{} {:?}{}{}",
            self.shape(),
            preview,
            ellipsis,
            if self.requires_grad() { " (grad)" } else { "" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_length_must_agree() {
        let err = Tensor::new([2, 2], vec![1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn leaf_rejects_non_finite() {
        let err = Tensor::new([2], vec![1.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn detach_cuts_tracking() {
        let x = Tensor::var([2], vec![1.0, 2.0]).unwrap();
        let d = x.detach();
        assert!(!d.requires_grad());
        assert!(d.is_leaf());
        assert_eq!(d.data(), x.data());
        assert_ne!(d.id(), x.id());
    }

    #[test]
    fn multi_index_lookup() {
        let t = Tensor::new([2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(t.at(&[1, 2]), 5.0);
        assert_eq!(t.at(&[0, 1]), 1.0);
    }
}
