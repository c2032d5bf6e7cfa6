//! Spatial ops: conv2d, transposed conv2d, average pooling.
//!
//! Kernels are `[F, C, kh, kw]`. conv2d maps C input channels to F outputs;
//! conv_transpose2d is its adjoint and maps F back to C with the same kernel
//! layout, so `<conv(x,k), y> == <x, tconv(y,k)>` up to rounding.
//!
//! Everything lowers onto a per-image patch matrix (im2col): row `(ci, khi,
//! kwi)` holds the input value each grid cell reads through that kernel tap,
//! zero where the tap lands in the padding. The forward conv is a stack of
//! axpys over patch rows, the adjoint scatters back through col2im, and both
//! kernel gradients are row dot products. Images are distributed across
//! worker threads; accumulation order per output element is fixed, so
//! results do not depend on the thread count.

use super::{par_chunks_mut, Op, Tensor};
use crate::error::{Error, Result};

/// Half-open range of output indices `o` with `0 <= o*stride + k_off - padding < extent_in`,
/// clamped to `[0, extent_out)`.
#[inline]
fn valid_range(
    extent_in: usize,
    extent_out: usize,
    k_off: usize,
    stride: usize,
    padding: usize,
) -> (usize, usize) {
    let s = stride as i64;
    let shift = padding as i64 - k_off as i64;
    let lo = (shift + s - 1).div_euclid(s).max(0);
    let hi = ((extent_in as i64 - 1 + shift).div_euclid(s) + 1).min(extent_out as i64);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

/// `dst[i] += k * src[i]` over equal-length rows. Exact-size slices keep the
/// loop free of bounds checks so it vectorizes.
#[inline]
fn axpy_row(dst: &mut [f32], src: &[f32], k: f32) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

/// `dst[i] += src[i]` over equal-length rows.
#[inline]
fn add_row(dst: &mut [f32], src: &[f32]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Dot product of two equal-length rows with eight fixed partial sums. The
/// grouping is part of the accumulation order and never varies at runtime.
#[inline]
fn dot_row(a: &[f32], b: &[f32]) -> f32 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f32; 8];
    let mut i = 0;
    while i + 8 <= n {
        for (l, s) in acc.iter_mut().enumerate() {
            *s += a[i + l] * b[i + l];
        }
        i += 8;
    }
    let mut tail = 0.0f32;
    while i < n {
        tail += a[i] * b[i];
        i += 1;
    }
    let half = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    let other = (acc[4] + acc[5]) + (acc[6] + acc[7]);
    (half + other) + tail
}

/// Lower one `[C, H, W]` image onto its patch matrix. Row `(ci*kh + khi)*kw
/// + kwi` holds, for every grid cell `(gi, gj)` of a `gh x gw` grid, the
/// value `inp[ci][gi*stride + khi - padding][gj*stride + kwi - padding]`.
/// Cells whose tap lands in the padding keep the caller's zero fill.
#[allow(clippy::too_many_arguments)]
fn im2col(
    inp: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    gh: usize,
    gw: usize,
    patches: &mut [f32],
) {
    for ci in 0..c {
        let plane = &inp[ci * h * w..(ci + 1) * h * w];
        for khi in 0..kh {
            let (g_lo, g_hi) = valid_range(h, gh, khi, stride, padding);
            for kwi in 0..kw {
                let (x_lo, x_hi) = valid_range(w, gw, kwi, stride, padding);
                if x_hi <= x_lo {
                    continue;
                }
                let row = &mut patches[((ci * kh + khi) * kw + kwi) * gh * gw..][..gh * gw];
                if stride == 1 {
                    // The source stays in range across the whole run, so both
                    // sides are contiguous rows.
                    let base = x_lo + kwi - padding;
                    let len = x_hi - x_lo;
                    for gi in g_lo..g_hi {
                        let ih = gi + khi - padding;
                        row[gi * gw + x_lo..gi * gw + x_hi]
                            .copy_from_slice(&plane[ih * w + base..ih * w + base + len]);
                    }
                } else {
                    for gi in g_lo..g_hi {
                        let ih = gi * stride + khi - padding;
                        let src = &plane[ih * w..(ih + 1) * w];
                        let dst = &mut row[gi * gw..(gi + 1) * gw];
                        for gj in x_lo..x_hi {
                            dst[gj] = src[gj * stride + kwi - padding];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch rows back into a `[C, H, W]` image.
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    patches: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    gh: usize,
    gw: usize,
    img: &mut [f32],
) {
    for ci in 0..c {
        let plane = &mut img[ci * h * w..(ci + 1) * h * w];
        for khi in 0..kh {
            let (g_lo, g_hi) = valid_range(h, gh, khi, stride, padding);
            for kwi in 0..kw {
                let (x_lo, x_hi) = valid_range(w, gw, kwi, stride, padding);
                if x_hi <= x_lo {
                    continue;
                }
                let row = &patches[((ci * kh + khi) * kw + kwi) * gh * gw..][..gh * gw];
                if stride == 1 {
                    let base = x_lo + kwi - padding;
                    let len = x_hi - x_lo;
                    for gi in g_lo..g_hi {
                        let ih = gi + khi - padding;
                        add_row(
                            &mut plane[ih * w + base..ih * w + base + len],
                            &row[gi * gw + x_lo..gi * gw + x_hi],
                        );
                    }
                } else {
                    for gi in g_lo..g_hi {
                        let ih = gi * stride + khi - padding;
                        let dst = &mut plane[ih * w..(ih + 1) * w];
                        let src = &row[gi * gw..(gi + 1) * gw];
                        for gj in x_lo..x_hi {
                            dst[gj * stride + kwi - padding] += src[gj];
                        }
                    }
                }
            }
        }
    }
}

/// Forward conv for one image: `out[fi] += sum_j ker[fi][j] * patches[j]`,
/// with `j` running over `(ci, khi, kwi)` in kernel layout order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_image(
    inp: &[f32],
    c: usize,
    h: usize,
    w: usize,
    ker: &[f32],
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out: &mut [f32],
    oh: usize,
    ow: usize,
) {
    let rows = c * kh * kw;
    let cells = oh * ow;
    let mut patches = vec![0.0f32; rows * cells];
    im2col(inp, c, h, w, kh, kw, stride, padding, oh, ow, &mut patches);
    for fi in 0..f {
        let out_plane = &mut out[fi * cells..(fi + 1) * cells];
        let kf = &ker[fi * rows..(fi + 1) * rows];
        for (j, &kv) in kf.iter().enumerate() {
            axpy_row(out_plane, &patches[j * cells..(j + 1) * cells], kv);
        }
    }
}

/// Apply the adjoint of conv2d for one image: given `f` grid planes of
/// `gh x gw`, accumulate `K^T` applied to them into a `[C, H, W]` image.
/// This is both the grad of conv2d wrt its input and the forward pass of
/// conv_transpose2d.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_adjoint_image(
    grid: &[f32],
    f: usize,
    gh: usize,
    gw: usize,
    ker: &[f32],
    c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    img: &mut [f32],
    h: usize,
    w: usize,
) {
    let rows = c * kh * kw;
    let cells = gh * gw;
    let mut gp = vec![0.0f32; rows * cells];
    for fi in 0..f {
        let g_plane = &grid[fi * cells..(fi + 1) * cells];
        let kf = &ker[fi * rows..(fi + 1) * rows];
        for (j, &kv) in kf.iter().enumerate() {
            axpy_row(&mut gp[j * cells..(j + 1) * cells], g_plane, kv);
        }
    }
    col2im_add(&gp, c, h, w, kh, kw, stride, padding, gh, gw, img);
}

/// Kernel gradient shared by both directions: with grid planes `G [N, F, gh,
/// gw]` and images `X [N, C, H, W]`, accumulate `gker[fi][j] += sum_n
/// <G[n][fi], im2col(X[n])[j]>`. For conv2d the grid is the output gradient
/// and X the input; for conv_transpose2d the grid is the input and X the
/// output gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_grad_kernel(
    grid: &[f32],
    n: usize,
    f: usize,
    gh: usize,
    gw: usize,
    img: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    gker: &mut [f32],
) {
    let rows = c * kh * kw;
    let cells = gh * gw;
    let mut patches = vec![0.0f32; n * rows * cells];
    par_chunks_mut(&mut patches, rows * cells, |ni, p_img| {
        let x_img = &img[ni * c * h * w..(ni + 1) * c * h * w];
        im2col(x_img, c, h, w, kh, kw, stride, padding, gh, gw, p_img);
    });
    par_chunks_mut(gker, rows, |fi, gker_f| {
        for (j, gk) in gker_f.iter_mut().enumerate() {
            let mut acc = 0.0f32;
            for ni in 0..n {
                let g_plane = &grid[(ni * f + fi) * cells..(ni * f + fi + 1) * cells];
                let p_row = &patches[(ni * rows + j) * cells..(ni * rows + j + 1) * cells];
                acc += dot_row(g_plane, p_row);
            }
            *gk += acc;
        }
    });
}

impl Tensor {
    /// 2-D convolution of `[N,C,H,W]` with kernel `[F,C,kh,kw]`.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be positive".into()));
        }
        let (n, c, h, w) = self.shape().dims4()?;
        let (f, kc, kh, kw) = kernel.shape().dims4()?;
        if kc != c {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: input has {c} channels, kernel expects {kc}"
            )));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Config(format!(
                "conv2d: kernel {}x{} too large for padded input {}x{}",
                kh,
                kw,
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let mut out = vec![0.0f32; n * f * oh * ow];
        let inp = self.data();
        let ker = kernel.data();
        par_chunks_mut(&mut out, f * oh * ow, |ni, out_img| {
            let in_img = &inp[ni * c * h * w..(ni + 1) * c * h * w];
            conv2d_image(in_img, c, h, w, ker, f, kh, kw, stride, padding, out_img, oh, ow);
        });
        Tensor::from_op(
            [n, f, oh, ow],
            out,
            Op::Conv2d {
                input: self.clone(),
                kernel: kernel.clone(),
                stride,
                padding,
            },
            "conv2d",
        )
    }

    /// Transposed 2-D convolution of `[N,F,H,W]` with kernel `[F,C,kh,kw]`,
    /// producing `[N,C,(H-1)*stride+kh-2*padding, ...]`. Exact adjoint of
    /// [`Tensor::conv2d`] with the same kernel, stride and padding.
    pub fn conv_transpose2d(&self, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        if stride == 0 {
            return Err(Error::Config("conv_transpose2d: stride must be positive".into()));
        }
        let (n, f_in, h, w) = self.shape().dims4()?;
        let (f, c, kh, kw) = kernel.shape().dims4()?;
        if f_in != f {
            return Err(Error::ShapeMismatch(format!(
                "conv_transpose2d: input has {f_in} channels, kernel expects {f}"
            )));
        }
        let oh_i = (h as i64 - 1) * stride as i64 + kh as i64 - 2 * padding as i64;
        let ow_i = (w as i64 - 1) * stride as i64 + kw as i64 - 2 * padding as i64;
        if oh_i < 1 || ow_i < 1 {
            return Err(Error::Config(format!(
                "conv_transpose2d: output would be {oh_i}x{ow_i}"
            )));
        }
        let (oh, ow) = (oh_i as usize, ow_i as usize);
        let mut out = vec![0.0f32; n * c * oh * ow];
        let inp = self.data();
        let ker = kernel.data();
        par_chunks_mut(&mut out, c * oh * ow, |ni, out_img| {
            let in_img = &inp[ni * f * h * w..(ni + 1) * f * h * w];
            conv_adjoint_image(in_img, f, h, w, ker, c, kh, kw, stride, padding, out_img, oh, ow);
        });
        Tensor::from_op(
            [n, c, oh, ow],
            out,
            Op::ConvTranspose2d {
                input: self.clone(),
                kernel: kernel.clone(),
                stride,
                padding,
            },
            "conv_transpose2d",
        )
    }

    /// Mean pooling with a `k x k` window.
    pub fn avg_pool2d(&self, k: usize, stride: usize) -> Result<Tensor> {
        if k == 0 || stride == 0 {
            return Err(Error::Config("avg_pool2d: k and stride must be positive".into()));
        }
        let (n, c, h, w) = self.shape().dims4()?;
        if h < k || w < k {
            return Err(Error::Config(format!(
                "avg_pool2d: window {k} too large for {h}x{w} input"
            )));
        }
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let inv = 1.0 / (k * k) as f32;
        let src = self.data();
        let mut out = vec![0.0f32; n * c * oh * ow];
        par_chunks_mut(&mut out, c * oh * ow, |ni, out_img| {
            for ci in 0..c {
                let plane = &src[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                let out_plane = &mut out_img[ci * oh * ow..(ci + 1) * oh * ow];
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let mut acc = 0.0f32;
                        for di in 0..k {
                            let row = &plane[(ohi * stride + di) * w + owi * stride..][..k];
                            for &v in row {
                                acc += v;
                            }
                        }
                        out_plane[ohi * ow + owi] = acc * inv;
                    }
                }
            }
        });
        Tensor::from_op(
            [n, c, oh, ow],
            out,
            Op::AvgPool2d {
                input: self.clone(),
                k,
                stride,
            },
            "avg_pool2d",
        )
    }
}
