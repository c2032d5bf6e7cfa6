//! Elementwise, reduction, and shape operations.
//!
//! Binary elementwise ops accept equal shapes or a single-element tensor on
//! either side; no other broadcasting exists. Every op validates its output
//! for NaN/Inf and fails loudly rather than propagating poison.

use super::{Op, Shape, Tensor};
use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::sync::Arc;

fn zip_broadcast(
    lhs: &Tensor,
    rhs: &Tensor,
    name: &'static str,
    f: impl Fn(f32, f32) -> f32,
) -> Result<(Shape, Vec<f32>)> {
    if lhs.shape() == rhs.shape() {
        let data = lhs
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok((lhs.shape().clone(), data))
    } else if rhs.numel() == 1 {
        let b = rhs.data()[0];
        Ok((
            lhs.shape().clone(),
            lhs.data().iter().map(|&a| f(a, b)).collect(),
        ))
    } else if lhs.numel() == 1 {
        let a = lhs.data()[0];
        Ok((
            rhs.shape().clone(),
            rhs.data().iter().map(|&b| f(a, b)).collect(),
        ))
    } else {
        Err(Error::ShapeMismatch(format!(
            "{name}: incompatible shapes {} and {}",
            lhs.shape(),
            rhs.shape()
        )))
    }
}

fn same_shape(lhs: &Tensor, rhs: &Tensor, name: &'static str) -> Result<()> {
    if lhs.shape() == rhs.shape() {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!(
            "{name}: shapes {} and {} must match exactly",
            lhs.shape(),
            rhs.shape()
        )))
    }
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let (shape, data) = zip_broadcast(self, rhs, "add", |a, b| a + b)?;
        Tensor::from_op(shape, data, Op::Add(self.clone(), rhs.clone()), "add")
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        let (shape, data) = zip_broadcast(self, rhs, "sub", |a, b| a - b)?;
        Tensor::from_op(shape, data, Op::Sub(self.clone(), rhs.clone()), "sub")
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (shape, data) = zip_broadcast(self, rhs, "mul", |a, b| a * b)?;
        Tensor::from_op(shape, data, Op::Mul(self.clone(), rhs.clone()), "mul")
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        let (shape, data) = zip_broadcast(self, rhs, "div", |a, b| a / b)?;
        Tensor::from_op(shape, data, Op::Div(self.clone(), rhs.clone()), "div")
    }

    pub fn add_scalar(&self, c: f32) -> Result<Tensor> {
        let data = self.data().iter().map(|&a| a + c).collect();
        Tensor::from_op(
            self.shape().clone(),
            data,
            Op::AddScalar(self.clone()),
            "add_scalar",
        )
    }

    pub fn mul_scalar(&self, c: f32) -> Result<Tensor> {
        let data = self.data().iter().map(|&a| a * c).collect();
        Tensor::from_op(
            self.shape().clone(),
            data,
            Op::MulScalar(self.clone(), c),
            "mul_scalar",
        )
    }

    /// `scale * self + added`, fused; shapes must match exactly.
    pub fn axpy(&self, scale: f32, added: &Tensor) -> Result<Tensor> {
        same_shape(self, added, "axpy")?;
        let data = self
            .data()
            .iter()
            .zip(added.data())
            .map(|(&a, &b)| scale * a + b)
            .collect();
        Tensor::from_op(
            self.shape().clone(),
            data,
            Op::Axpy {
                scale,
                scaled: self.clone(),
                added: added.clone(),
            },
            "axpy",
        )
    }

    /// `self - scale * rhs`, fused; shapes must match exactly.
    pub fn sub_scaled(&self, rhs: &Tensor, scale: f32) -> Result<Tensor> {
        same_shape(self, rhs, "sub_scaled")?;
        let data = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(&a, &b)| a - scale * b)
            .collect();
        Tensor::from_op(
            self.shape().clone(),
            data,
            Op::SubScaled {
                minuend: self.clone(),
                subtrahend: rhs.clone(),
                scale,
            },
            "sub_scaled",
        )
    }

    /// Clamp into `[lo, hi]`. Gradient is passed through strictly inside the
    /// interval and zero at and beyond the boundaries.
    pub fn clamp(&self, lo: f32, hi: f32) -> Result<Tensor> {
        if !(lo <= hi) {
            return Err(Error::Config(format!("clamp: lo {lo} > hi {hi}")));
        }
        let data = self.data().iter().map(|&a| a.clamp(lo, hi)).collect();
        Tensor::from_op(
            self.shape().clone(),
            data,
            Op::Clamp {
                input: self.clone(),
                lo,
                hi,
            },
            "clamp",
        )
    }

    pub fn abs(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&a| a.abs()).collect();
        Tensor::from_op(self.shape().clone(), data, Op::Abs(self.clone()), "abs")
    }

    pub fn square(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&a| a * a).collect();
        Tensor::from_op(self.shape().clone(), data, Op::Square(self.clone()), "square")
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if self.data().iter().any(|&a| a < 0.0) {
            return Err(Error::Domain("sqrt of negative value".into()));
        }
        let data = self.data().iter().map(|&a| a.sqrt()).collect();
        Tensor::from_op(self.shape().clone(), data, Op::Sqrt(self.clone()), "sqrt")
    }

    pub fn log(&self) -> Result<Tensor> {
        if self.data().iter().any(|&a| a <= 0.0) {
            return Err(Error::Domain("log of non-positive value".into()));
        }
        let data = self.data().iter().map(|&a| a.ln()).collect();
        Tensor::from_op(self.shape().clone(), data, Op::Log(self.clone()), "log")
    }

    /// Elementwise sign with `sign(0) = 0`. Gradient is zero everywhere, so
    /// the result is never tracked.
    pub fn sign(&self) -> Result<Tensor> {
        let data = self
            .data()
            .iter()
            .map(|&a| {
                if a > 0.0 {
                    1.0
                } else if a < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect();
        Tensor::from_op_no_grad(self.shape().clone(), data, "sign")
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&self) -> Result<Tensor> {
        let data = self
            .data()
            .iter()
            .map(|&a| a.max(0.0) + (-a.abs()).exp().ln_1p())
            .collect();
        Tensor::from_op(
            self.shape().clone(),
            data,
            Op::Softplus(self.clone()),
            "softplus",
        )
    }

    /// Indicator `1[self < rhs]` elementwise (rhs may be a scalar tensor).
    /// Gradient is zero everywhere, so the result is never tracked.
    pub fn lt_mask(&self, rhs: &Tensor) -> Result<Tensor> {
        let (shape, data) =
            zip_broadcast(self, rhs, "lt_mask", |a, b| if a < b { 1.0 } else { 0.0 })?;
        Tensor::from_op_no_grad(shape, data, "lt_mask")
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let s: f32 = self.data().iter().sum();
        Tensor::from_op([1], vec![s], Op::SumAll(self.clone()), "sum_all")
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(Error::Usage("mean_all of an empty tensor".into()));
        }
        let s: f32 = self.data().iter().sum();
        let m = s / self.numel() as f32;
        Tensor::from_op([1], vec![m], Op::MeanAll(self.clone()), "mean_all")
    }

    /// Maximum over all elements; ties resolve to the first occurrence and
    /// the gradient flows only to that element.
    pub fn max_all(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(Error::Usage("max_all of an empty tensor".into()));
        }
        let mut best = self.data()[0];
        let mut argmax = 0;
        for (i, &v) in self.data().iter().enumerate().skip(1) {
            if v > best {
                best = v;
                argmax = i;
            }
        }
        Tensor::from_op(
            [1],
            vec![best],
            Op::MaxAll {
                input: self.clone(),
                argmax,
            },
            "max_all",
        )
    }

    /// `[N,C,H,W] -> [N]`: sum over each image.
    pub fn sum_per_image(&self) -> Result<Tensor> {
        let (n, c, h, w) = self.shape().dims4()?;
        let stride = c * h * w;
        let data = (0..n)
            .map(|i| self.data()[i * stride..(i + 1) * stride].iter().sum())
            .collect();
        Tensor::from_op([n], data, Op::SumPerImage(self.clone()), "sum_per_image")
    }

    /// `[N] -> [N,C,H,W]`: repeat each per-image scalar over a whole image.
    pub fn expand_per_image(&self, c: usize, h: usize, w: usize) -> Result<Tensor> {
        let n = match self.shape().dims()[..] {
            [n] => n,
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "expand_per_image expects a rank-1 tensor, got {}",
                    self.shape()
                )))
            }
        };
        let stride = c * h * w;
        let mut data = vec![0.0; n * stride];
        for (i, &v) in self.data().iter().enumerate() {
            data[i * stride..(i + 1) * stride].fill(v);
        }
        Tensor::from_op(
            [n, c, h, w],
            data,
            Op::ExpandPerImage(self.clone()),
            "expand_per_image",
        )
    }

    /// Concatenate along the channel axis: `[N,C1,H,W] + [N,C2,H,W]`.
    pub fn concat_channels(&self, rhs: &Tensor) -> Result<Tensor> {
        let (n, c1, h, w) = self.shape().dims4()?;
        let (n2, c2, h2, w2) = rhs.shape().dims4()?;
        if n != n2 || h != h2 || w != w2 {
            return Err(Error::ShapeMismatch(format!(
                "concat_channels: {} and {} differ outside the channel axis",
                self.shape(),
                rhs.shape()
            )));
        }
        let img = h * w;
        let mut data = Vec::with_capacity(n * (c1 + c2) * img);
        for i in 0..n {
            data.extend_from_slice(&self.data()[i * c1 * img..(i + 1) * c1 * img]);
            data.extend_from_slice(&rhs.data()[i * c2 * img..(i + 1) * c2 * img]);
        }
        Tensor::from_op(
            [n, c1 + c2, h, w],
            data,
            Op::ConcatChannels(self.clone(), rhs.clone()),
            "concat_channels",
        )
    }

    pub fn reshape(&self, shape: impl Into<Shape>) -> Result<Tensor> {
        let shape = shape.into();
        if shape.numel() != self.numel() {
            return Err(Error::ShapeMismatch(format!(
                "reshape: {} has {} elements, target {shape} wants {}",
                self.shape(),
                self.numel(),
                shape.numel()
            )));
        }
        Tensor::from_op(shape, self.to_vec(), Op::Reshape(self.clone()), "reshape")
    }

    /// Forward difference along H: `out[n,c,i,j] = in[n,c,i+1,j] - in[n,c,i,j]`.
    pub fn diff_h(&self) -> Result<Tensor> {
        let (n, c, h, w) = self.shape().dims4()?;
        if h < 2 {
            return Err(Error::Config(format!(
                "diff_h needs H >= 2, got shape {}",
                self.shape()
            )));
        }
        let mut data = Vec::with_capacity(n * c * (h - 1) * w);
        let src = self.data();
        for nc in 0..n * c {
            let plane = &src[nc * h * w..(nc + 1) * h * w];
            for i in 0..h - 1 {
                for j in 0..w {
                    data.push(plane[(i + 1) * w + j] - plane[i * w + j]);
                }
            }
        }
        Tensor::from_op([n, c, h - 1, w], data, Op::DiffH(self.clone()), "diff_h")
    }

    /// Forward difference along W: `out[n,c,i,j] = in[n,c,i,j+1] - in[n,c,i,j]`.
    pub fn diff_w(&self) -> Result<Tensor> {
        let (n, c, h, w) = self.shape().dims4()?;
        if w < 2 {
            return Err(Error::Config(format!(
                "diff_w needs W >= 2, got shape {}",
                self.shape()
            )));
        }
        let mut data = Vec::with_capacity(n * c * h * (w - 1));
        let src = self.data();
        for nc in 0..n * c {
            let plane = &src[nc * h * w..(nc + 1) * h * w];
            for i in 0..h {
                for j in 0..w - 1 {
                    data.push(plane[i * w + j + 1] - plane[i * w + j]);
                }
            }
        }
        Tensor::from_op([n, c, h, w - 1], data, Op::DiffW(self.clone()), "diff_w")
    }

    /// `[N,D] x [D,K] -> [N,K]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (n, d) = self.shape().dims2()?;
        let (d2, k) = rhs.shape().dims2()?;
        if d != d2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul: inner dims disagree, {} vs {}",
                self.shape(),
                rhs.shape()
            )));
        }
        let a = self.data();
        let b = rhs.data();
        let mut out = vec![0.0f32; n * k];
        for i in 0..n {
            let row = &a[i * d..(i + 1) * d];
            let out_row = &mut out[i * k..(i + 1) * k];
            for (j, &aij) in row.iter().enumerate() {
                let b_row = &b[j * k..(j + 1) * k];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += aij * bv;
                }
            }
        }
        Tensor::from_op(
            [n, k],
            out,
            Op::MatMul(self.clone(), rhs.clone()),
            "matmul",
        )
    }

    /// Add a per-channel bias `[C]` to a `[N,C,H,W]` tensor.
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = self.shape().dims4()?;
        if bias.shape().dims() != [c] {
            return Err(Error::ShapeMismatch(format!(
                "add_channel_bias: bias {} does not match {} channels",
                bias.shape(),
                c
            )));
        }
        let img = h * w;
        let mut data = self.to_vec();
        for ni in 0..n {
            for (ci, &bv) in bias.data().iter().enumerate() {
                let base = (ni * c + ci) * img;
                for v in &mut data[base..base + img] {
                    *v += bv;
                }
            }
        }
        Tensor::from_op(
            [n, c, h, w],
            data,
            Op::AddChannelBias {
                input: self.clone(),
                bias: bias.clone(),
            },
            "add_channel_bias",
        )
    }

    /// Add a per-column bias `[K]` to a `[N,K]` tensor.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (n, k) = self.shape().dims2()?;
        if bias.shape().dims() != [k] {
            return Err(Error::ShapeMismatch(format!(
                "add_row_bias: bias {} does not match {} columns",
                bias.shape(),
                k
            )));
        }
        let mut data = self.to_vec();
        for i in 0..n {
            for (v, &bv) in data[i * k..(i + 1) * k].iter_mut().zip(bias.data()) {
                *v += bv;
            }
        }
        Tensor::from_op(
            [n, k],
            data,
            Op::AddRowBias {
                input: self.clone(),
                bias: bias.clone(),
            },
            "add_row_bias",
        )
    }

    /// Mean softmax cross-entropy of `[N,K]` logits against integer labels.
    /// Computed via the log-sum-exp trick; returns a scalar.
    pub fn cross_entropy_logits(&self, labels: &[usize]) -> Result<Tensor> {
        let (n, k) = self.shape().dims2()?;
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "cross_entropy_logits: {} rows but {} labels",
                n,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Usage(format!(
                "cross_entropy_logits: label {bad} out of range for {k} classes"
            )));
        }
        if n == 0 {
            return Err(Error::Usage("cross_entropy_logits: empty batch".into()));
        }
        let x = self.data();
        let mut probs = vec![0.0f32; n * k];
        let mut total = 0.0f32;
        for i in 0..n {
            let row = &x[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f32;
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - m).exp();
                z += *p;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p /= z;
            }
            let log_z = m + z.ln();
            total += log_z - row[labels[i]];
        }
        let loss = total / n as f32;
        Tensor::from_op(
            [1],
            vec![loss],
            Op::CrossEntropy {
                logits: self.clone(),
                labels: Arc::new(labels.to_vec()),
                probs,
            },
            "cross_entropy_logits",
        )
    }

    pub fn rand_uniform(
        shape: impl Into<Shape>,
        lo: f32,
        hi: f32,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        if !(lo <= hi) {
            return Err(Error::Config(format!("rand_uniform: lo {lo} > hi {hi}")));
        }
        let shape = shape.into();
        let data = (0..shape.numel())
            .map(|_| rng.random::<f32>() * (hi - lo) + lo)
            .collect();
        Tensor::new(shape, data)
    }

    pub fn rand_normal(
        shape: impl Into<Shape>,
        mean: f32,
        std: f32,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        let normal = Normal::new(mean, std)
            .map_err(|e| Error::Config(format!("rand_normal: bad std {std}: {e}")))?;
        let shape = shape.into();
        let data = (0..shape.numel()).map(|_| normal.sample(rng)).collect();
        Tensor::new(shape, data)
    }
}
