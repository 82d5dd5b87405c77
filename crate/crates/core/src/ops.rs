//! Forward kernels and their vector-Jacobian products.
//!
//! Everything here is a pure function of its arguments. The [`crate::tape`]
//! module records these calls and replays the matching `*_backward` kernel
//! during reverse accumulation.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Dim, Error, Result};
use crate::math;
use crate::tensor::{Shape, Tensor};

/// Nonlinearity applied after batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Activation {
    Relu,
    Silu,
    None,
}

/// Output spatial size of a strided, padded window.
pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> i64 {
    let span = input as i64 + 2 * padding as i64 - kernel as i64;
    if span < 0 || stride == 0 {
        return 0;
    }
    span / stride as i64 + 1
}

fn conv_out_shape(x: Shape, w: Shape, stride: usize, padding: usize) -> Result<Shape> {
    if x.c != w.c {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            dim: Dim::Channels,
            expected: w.c,
            found: x.c,
        });
    }
    let ho = conv_output_dim(x.h, w.h, stride, padding);
    let wo = conv_output_dim(x.w, w.w, stride, padding);
    if ho < 1 || wo < 1 {
        return Err(Error::DegenerateOutput {
            op: "conv2d",
            height: ho,
            width: wo,
        });
    }
    Ok(Shape::new(x.n, w.n, ho as usize, wo as usize))
}

/// Range of output indices `o` with `0 <= o * stride + k - padding < input`.
#[inline]
fn valid_range(
    out: usize,
    input: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> (usize, usize) {
    let shift = k as i64 - padding as i64;
    let s = stride as i64;
    // smallest o with o*s + shift >= 0
    let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
    // largest o with o*s + shift <= input - 1
    let top = input as i64 - 1 - shift;
    let hi = if top < 0 { -1 } else { top / s };
    let lo = lo.max(0) as usize;
    let hi = (hi + 1).clamp(0, out as i64) as usize;
    (lo, hi.max(lo))
}

/// Unfolds one batch item into a `(C_in*kh*kw) x (OH*OW)` patch matrix whose
/// row order matches the kernel layout.
fn im2col(x: &Tensor, n: usize, ks: Shape, os: Shape, stride: usize, padding: usize) -> Vec<f64> {
    let xs = x.shape();
    let p = os.h * os.w;
    let mut col = vec![0.0; xs.c * ks.h * ks.w * p];
    for ci in 0..xs.c {
        let ip = x.plane(n, ci);
        for ky in 0..ks.h {
            let (oy0, oy1) = valid_range(os.h, xs.h, ky, stride, padding);
            for kx in 0..ks.w {
                let (ox0, ox1) = valid_range(os.w, xs.w, kx, stride, padding);
                let row = (ci * ks.h + ky) * ks.w + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in oy0..oy1 {
                    let iy = oy * stride + ky - padding;
                    let irow = &ip[iy * xs.w..(iy + 1) * xs.w];
                    let drow = &mut dst[oy * os.w..(oy + 1) * os.w];
                    if stride == 1 {
                        let ix0 = ox0 + kx - padding;
                        drow[ox0..ox1].copy_from_slice(&irow[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            drow[ox] = irow[ox * stride + kx - padding];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch gradients back into `dx` item `n`.
fn col2im(
    col: &[f64],
    dx: &mut Tensor,
    n: usize,
    ks: Shape,
    os: Shape,
    stride: usize,
    padding: usize,
) {
    let xs = dx.shape();
    let p = os.h * os.w;
    for ci in 0..xs.c {
        let dp = dx.plane_mut(n, ci);
        for ky in 0..ks.h {
            let (oy0, oy1) = valid_range(os.h, xs.h, ky, stride, padding);
            for kx in 0..ks.w {
                let (ox0, ox1) = valid_range(os.w, xs.w, kx, stride, padding);
                let row = (ci * ks.h + ky) * ks.w + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in oy0..oy1 {
                    let iy = oy * stride + ky - padding;
                    let srow = &src[oy * os.w..(oy + 1) * os.w];
                    let drow = &mut dp[iy * xs.w..(iy + 1) * xs.w];
                    if stride == 1 {
                        let ix0 = ox0 + kx - padding;
                        for (d, g) in drow[ix0..].iter_mut().zip(&srow[ox0..ox1]) {
                            *d += g;
                        }
                    } else {
                        for ox in ox0..ox1 {
                            drow[ox * stride + kx - padding] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(ks: Shape, stride: usize, padding: usize) -> bool {
    ks.h == 1 && ks.w == 1 && stride == 1 && padding == 0
}

/// Cross-correlation of `x` with `kernel` of shape `(C_out, C_in, kh, kw)`.
pub fn conv2d(
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let xs = x.shape();
    let ks = kernel.shape();
    let os = conv_out_shape(xs, ks, stride, padding)?;
    if let Some(b) = bias {
        if b.len() != ks.n {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                dim: Dim::Channels,
                expected: ks.n,
                found: b.len(),
            });
        }
    }
    let mut out = Tensor::zeros(os);
    let p = os.h * os.w;
    let kdim = ks.c * ks.h * ks.w;
    let item = xs.c * xs.h * xs.w;
    for n in 0..xs.n {
        let dst = &mut out.data_mut()[n * ks.n * p..(n + 1) * ks.n * p];
        if let Some(b) = bias {
            for (co, plane) in dst.chunks_exact_mut(p).enumerate() {
                plane.fill(b.data()[co]);
            }
        }
        if is_pointwise(ks, stride, padding) {
            gemm_acc(
                dst,
                kernel.data(),
                &x.data()[n * item..(n + 1) * item],
                ks.n,
                kdim,
                p,
            );
        } else {
            let col = im2col(x, n, ks, os, stride, padding);
            gemm_acc(dst, kernel.data(), &col, ks.n, kdim, p);
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> (Tensor, Tensor, Tensor) {
    let xs = x.shape();
    let ks = kernel.shape();
    let os = grad_out.shape();
    let p = os.h * os.w;
    let kdim = ks.c * ks.h * ks.w;
    let item = xs.c * xs.h * xs.w;
    let mut dx = Tensor::zeros(xs);
    let mut dw = vec![0.0; ks.volume()];
    let mut db = Tensor::zeros(Shape::new(1, 1, 1, ks.n));
    let wt = transpose_raw(kernel.data(), ks.n, kdim);
    let pointwise = is_pointwise(ks, stride, padding);
    for n in 0..xs.n {
        let g = &grad_out.data()[n * ks.n * p..(n + 1) * ks.n * p];
        for (co, plane) in g.chunks_exact(p).enumerate() {
            db.data_mut()[co] += plane.iter().sum::<f64>();
        }
        if pointwise {
            let xt = transpose_raw(&x.data()[n * item..(n + 1) * item], kdim, p);
            gemm_acc(&mut dw, g, &xt, ks.n, p, kdim);
            gemm_acc(
                &mut dx.data_mut()[n * item..(n + 1) * item],
                &wt,
                g,
                kdim,
                ks.n,
                p,
            );
        } else {
            let col = im2col(x, n, ks, os, stride, padding);
            let colt = transpose_raw(&col, kdim, p);
            gemm_acc(&mut dw, g, &colt, ks.n, p, kdim);
            let dcol = mm(&wt, g, kdim, ks.n, p);
            col2im(&dcol, &mut dx, n, ks, os, stride, padding);
        }
    }
    let dw = Tensor::from_vec(ks, dw).expect("kernel-sized gradient");
    (dx, dw, db)
}

fn check_channel_params(op: &'static str, x: &Tensor, params: &[&[f64]]) -> Result<()> {
    let c = x.shape().c;
    for p in params {
        if p.len() != c {
            return Err(Error::ShapeMismatch {
                op,
                dim: Dim::Channels,
                expected: c,
                found: p.len(),
            });
        }
    }
    Ok(())
}

/// Batch normalization with stored statistics.
pub fn batchnorm_eval(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<Tensor> {
    check_channel_params("batchnorm2d", x, &[gamma, beta, mean, var])?;
    let s = x.shape();
    let mut out = x.clone();
    for c in 0..s.c {
        let scale = gamma[c] / math::sqrt(var[c] + eps);
        let shift = beta[c] - mean[c] * scale;
        for n in 0..s.n {
            out.plane_mut(n, c)
                .iter_mut()
                .for_each(|v| *v = *v * scale + shift);
        }
    }
    Ok(out)
}

/// Per-channel batch statistics produced by a training-mode normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Population variance over `(N, H, W)`.
    pub var: Vec<f64>,
}

/// Training-mode batch normalization. Returns the output, the normalized
/// input `x_hat`, and the batch statistics.
pub fn batchnorm_train(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Tensor, Tensor, BatchStats)> {
    check_channel_params("batchnorm2d", x, &[gamma, beta])?;
    let s = x.shape();
    let m = (s.n * s.plane()) as f64;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    let mut xhat = x.clone();
    let mut out = x.clone();
    for c in 0..s.c {
        let mu = (0..s.n)
            .map(|n| x.plane(n, c).iter().sum::<f64>())
            .sum::<f64>()
            / m;
        let v = (0..s.n)
            .map(|n| {
                x.plane(n, c)
                    .iter()
                    .map(|v| (v - mu) * (v - mu))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / m;
        let inv = 1.0 / math::sqrt(v + eps);
        for n in 0..s.n {
            for (h, o) in xhat.plane_mut(n, c).iter_mut().zip(out.plane_mut(n, c)) {
                *h = (*h - mu) * inv;
                *o = gamma[c] * *h + beta[c];
            }
        }
        mean[c] = mu;
        var[c] = v;
    }
    Ok((out, xhat, BatchStats { mean, var }))
}

/// Per-channel sums `(sum g, sum g * x_hat)` used by both normalization VJPs.
fn bn_reductions(grad_out: &Tensor, xhat: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = grad_out.shape();
    let mut sg = vec![0.0; s.c];
    let mut sgx = vec![0.0; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            for (g, h) in grad_out.plane(n, c).iter().zip(xhat.plane(n, c)) {
                sg[c] += g;
                sgx[c] += g * h;
            }
        }
    }
    (sg, sgx)
}

/// VJP of [`batchnorm_eval`]: `(dx, dgamma, dbeta)`.
pub fn batchnorm_eval_backward(
    x: &Tensor,
    gamma: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
    grad_out: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / math::sqrt(v + eps)).collect();
    let mut xhat = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            xhat.plane_mut(n, c)
                .iter_mut()
                .for_each(|v| *v = (*v - mean[c]) * inv[c]);
        }
    }
    let (dbeta, dgamma) = bn_reductions(grad_out, &xhat);
    let mut dx = grad_out.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let k = gamma[c] * inv[c];
            dx.plane_mut(n, c).iter_mut().for_each(|v| *v *= k);
        }
    }
    (dx, dgamma, dbeta)
}

/// VJP of [`batchnorm_train`], differentiating through the batch statistics.
pub fn batchnorm_train_backward(
    xhat: &Tensor,
    gamma: &[f64],
    var: &[f64],
    eps: f64,
    grad_out: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let s = xhat.shape();
    let m = (s.n * s.plane()) as f64;
    let (dbeta, dgamma) = bn_reductions(grad_out, xhat);
    let mut dx = grad_out.clone();
    for c in 0..s.c {
        let k = gamma[c] / math::sqrt(var[c] + eps) / m;
        for n in 0..s.n {
            for (d, h) in dx.plane_mut(n, c).iter_mut().zip(xhat.plane(n, c)) {
                *d = k * (m * *d - dbeta[c] - h * dgamma[c]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * math::sigmoid(v))
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Relu => relu(x),
        Activation::Silu => silu(x),
        Activation::None => x.clone(),
    }
}

pub fn activation_backward(x: &Tensor, kind: Activation, grad_out: &Tensor) -> Tensor {
    match kind {
        Activation::Relu => x
            .zip_map(grad_out, |v, g| if v > 0.0 { g } else { 0.0 })
            .expect("shape checked at record time"),
        Activation::Silu => x
            .zip_map(grad_out, |v, g| {
                let s = math::sigmoid(v);
                g * (s + v * s * (1.0 - s))
            })
            .expect("shape checked at record time"),
        Activation::None => grad_out.clone(),
    }
}

/// Nearest-neighbour 2x upsampling: every cell becomes a 2x2 block.
pub fn upsample_nearest2x(x: &Tensor) -> Tensor {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, 2 * s.h, 2 * s.w), |n, c, y, xx| {
        x.at(n, c, y / 2, xx / 2)
    })
}

pub fn upsample_nearest2x_backward(grad_out: &Tensor) -> Tensor {
    let s = grad_out.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, s.h / 2, s.w / 2), |n, c, y, x| {
        grad_out.at(n, c, 2 * y, 2 * x)
            + grad_out.at(n, c, 2 * y, 2 * x + 1)
            + grad_out.at(n, c, 2 * y + 1, 2 * x)
            + grad_out.at(n, c, 2 * y + 1, 2 * x + 1)
    })
}

/// 2x2 average pooling with stride 2.
pub fn downsample_avg2x(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    for (dim, size) in [(Dim::Height, s.h), (Dim::Width, s.w)] {
        if size % 2 != 0 {
            return Err(Error::Indivisible {
                op: "downsample_avg2x",
                dim,
                size,
                divisor: 2,
            });
        }
    }
    Ok(Tensor::from_fn(
        Shape::new(s.n, s.c, s.h / 2, s.w / 2),
        |n, c, y, xx| {
            (x.at(n, c, 2 * y, 2 * xx)
                + x.at(n, c, 2 * y, 2 * xx + 1)
                + x.at(n, c, 2 * y + 1, 2 * xx)
                + x.at(n, c, 2 * y + 1, 2 * xx + 1))
                * 0.25
        },
    ))
}

pub fn downsample_avg2x_backward(grad_out: &Tensor) -> Tensor {
    let s = grad_out.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, 2 * s.h, 2 * s.w), |n, c, y, x| {
        0.25 * grad_out.at(n, c, y / 2, x / 2)
    })
}

/// Concatenates along channels, in argument order.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidConfig("concat_channels needs at least one part".into()))?
        .shape();
    let mut c_total = 0;
    for p in parts {
        let s = p.shape();
        for dim in [Dim::Batch, Dim::Height, Dim::Width] {
            if s.get(dim) != first.get(dim) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    dim,
                    expected: first.get(dim),
                    found: s.get(dim),
                });
            }
        }
        c_total += s.c;
    }
    let os = Shape::new(first.n, c_total, first.h, first.w);
    let mut data = Vec::with_capacity(os.volume());
    for n in 0..first.n {
        for p in parts {
            for c in 0..p.shape().c {
                data.extend_from_slice(p.plane(n, c));
            }
        }
    }
    Tensor::from_vec(os, data)
}

/// Channels `start..start + len` of `x`.
pub fn channel_slice(x: &Tensor, start: usize, len: usize) -> Tensor {
    let s = x.shape();
    let mut data = Vec::with_capacity(s.n * len * s.plane());
    for n in 0..s.n {
        for c in start..start + len {
            data.extend_from_slice(x.plane(n, c));
        }
    }
    Tensor::from_vec(Shape::new(s.n, len, s.h, s.w), data).expect("volume matches by construction")
}

/// Splits `x` into `h` equal contiguous channel groups.
pub fn split_channels(x: &Tensor, h: usize) -> Result<Vec<Tensor>> {
    let c = x.shape().c;
    if h == 0 || !c.is_multiple_of(h) {
        return Err(Error::Indivisible {
            op: "split_channels",
            dim: Dim::Channels,
            size: c,
            divisor: h,
        });
    }
    let d = c / h;
    Ok((0..h).map(|i| channel_slice(x, i * d, d)).collect())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    if !s.is_matrix() {
        return Err(Error::NotAMatrix { op, shape: s });
    }
    Ok((s.h, s.w))
}

/// Row-wise softmax of a `(1, 1, rows, cols)` matrix, max-subtracted.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let (_, cols) = matrix_dims("softmax_lastdim", x)?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(cols) {
        softmax_in_place(row);
    }
    Ok(out)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = math::exp(*v - max);
        total += *v;
    }
    let inv = 1.0 / total;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// VJP of the row softmax given its output `probs`.
pub fn softmax_backward(probs: &Tensor, grad_out: &Tensor) -> Tensor {
    let cols = probs.shape().w;
    let mut dx = grad_out.clone();
    for (d, p) in dx
        .data_mut()
        .chunks_mut(cols)
        .zip(probs.data().chunks(cols))
    {
        let dot: f64 = d.iter().zip(p).map(|(g, p)| g * p).sum();
        for (g, p) in d.iter_mut().zip(p) {
            *g = p * (*g - dot);
        }
    }
    dx
}

/// `out += a b` for row-major `a (r x k)` and `b (k x c)`.
fn gemm_acc(out: &mut [f64], a: &[f64], b: &[f64], r: usize, k: usize, c: usize) {
    const ROWS: usize = 4;
    const COLS: usize = 256;
    let mut i0 = 0;
    while i0 < r {
        let rows = (r - i0).min(ROWS);
        let block = &mut out[i0 * c..(i0 + rows) * c];
        for j0 in (0..c).step_by(COLS) {
            let j1 = (j0 + COLS).min(c);
            let w = j1 - j0;
            if rows == ROWS {
                let (o0, rest) = block.split_at_mut(c);
                let (o1, rest) = rest.split_at_mut(c);
                let (o2, o3) = rest.split_at_mut(c);
                let (o0, o1, o2, o3) = (
                    &mut o0[j0..j1],
                    &mut o1[j0..j1],
                    &mut o2[j0..j1],
                    &mut o3[j0..j1],
                );
                for p in 0..k {
                    let a0 = a[i0 * k + p];
                    let a1 = a[(i0 + 1) * k + p];
                    let a2 = a[(i0 + 2) * k + p];
                    let a3 = a[(i0 + 3) * k + p];
                    let bj = &b[p * c + j0..p * c + j1];
                    for j in 0..w {
                        let bv = bj[j];
                        o0[j] += a0 * bv;
                        o1[j] += a1 * bv;
                        o2[j] += a2 * bv;
                        o3[j] += a3 * bv;
                    }
                }
            } else {
                for ii in 0..rows {
                    let orow = &mut block[ii * c + j0..ii * c + j1];
                    for p in 0..k {
                        let av = a[(i0 + ii) * k + p];
                        for (o, bv) in orow.iter_mut().zip(&b[p * c + j0..p * c + j1]) {
                            *o += av * bv;
                        }
                    }
                }
            }
        }
        i0 += rows;
    }
}

/// Transpose of a row-major `(r x c)` matrix.
fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    const TILE: usize = 32;
    let mut out = vec![0.0; r * c];
    for i0 in (0..r).step_by(TILE) {
        for j0 in (0..c).step_by(TILE) {
            for i in i0..(i0 + TILE).min(r) {
                for j in j0..(j0 + TILE).min(c) {
                    out[j * r + i] = a[i * c + j];
                }
            }
        }
    }
    out
}

/// `a b` where `a` is `(r x k)` and `b` is `(k x c)`.
pub(crate) fn mm(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    gemm_acc(&mut out, a, b, r, k, c);
    out
}

/// `aᵀ b` where `a` is `(k x r)` and `b` is `(k x c)`.
pub(crate) fn mm_tn(a: &[f64], b: &[f64], k: usize, r: usize, c: usize) -> Vec<f64> {
    mm(&transpose_raw(a, k, r), b, r, k, c)
}

/// `a bᵀ` where `a` is `(r x k)` and `b` is `(c x k)`.
pub(crate) fn mm_nt(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    mm(a, &transpose_raw(b, c, k), r, k, c)
}

/// Standard matrix product of `(1, 1, r, k)` and `(1, 1, k, c)` matrices.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (r, k) = matrix_dims("matmul", a)?;
    let (k2, c) = matrix_dims("matmul", b)?;
    if k != k2 {
        return Err(Error::InnerDimMismatch { left: k, right: k2 });
    }
    Tensor::from_vec(Shape::matrix(r, c), mm(a.data(), b.data(), r, k, c))
}

/// `(dA, dB)` for `A * B` given the upstream gradient.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor) {
    let (r, k) = (a.shape().h, a.shape().w);
    let c = b.shape().w;
    let da = mm_nt(grad_out.data(), b.data(), r, c, k);
    let db = mm_tn(a.data(), grad_out.data(), r, k, c);
    (
        Tensor::from_vec(Shape::matrix(r, k), da).expect("volume"),
        Tensor::from_vec(Shape::matrix(k, c), db).expect("volume"),
    )
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = matrix_dims("transpose", a)?;
    Ok(Tensor::from_fn(Shape::matrix(c, r), |_, _, i, j| {
        a.data()[j * c + i]
    }))
}

/// Batch element `n` of `x` as a `(1, 1, H*W, C)` token matrix; row `t` is
/// the feature vector at spatial position `t` (row-major over `H, W`).
pub fn to_tokens(x: &Tensor, n: usize) -> Tensor {
    let s = x.shape();
    let p = s.plane();
    let mut data = vec![0.0; p * s.c];
    for c in 0..s.c {
        for (t, v) in x.plane(n, c).iter().enumerate() {
            data[t * s.c + c] = *v;
        }
    }
    Tensor::from_vec(Shape::matrix(p, s.c), data).expect("volume")
}

/// Inverse of [`to_tokens`] over all batch elements.
pub fn from_tokens(parts: &[&Tensor], h: usize, w: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| {
        Error::InvalidConfig("from_tokens needs at least one batch element".into())
    })?;
    let (t, c) = matrix_dims("from_tokens", first)?;
    if t != h * w {
        return Err(Error::DataLength {
            expected: h * w,
            found: t,
        });
    }
    let mut out = Tensor::zeros(Shape::new(parts.len(), c, h, w));
    for (n, m) in parts.iter().enumerate() {
        m.shape().expect("from_tokens", &Shape::matrix(t, c))?;
        for ch in 0..c {
            let plane = out.plane_mut(n, ch);
            for (tok, v) in plane.iter_mut().enumerate() {
                *v = m.data()[tok * c + ch];
            }
        }
    }
    Ok(out)
}

/// Scaled dot-product attention on token matrices.
///
/// `q, k` are `(T, d_qk)`, `v` is `(T, d_v)`. Returns the `(T, d_v)` output
/// and the `(T, T)` row-stochastic attention matrix.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64) -> Result<(Tensor, Tensor)> {
    let (t, dq) = matrix_dims("attention", q)?;
    k.shape().expect("attention keys", &q.shape())?;
    let (tv, dv) = matrix_dims("attention", v)?;
    if tv != t {
        return Err(Error::ShapeMismatch {
            op: "attention values",
            dim: Dim::Height,
            expected: t,
            found: tv,
        });
    }
    let mut scores = mm_nt(q.data(), k.data(), t, dq, t);
    for row in scores.chunks_mut(t) {
        row.iter_mut().for_each(|s| *s *= scale);
        softmax_in_place(row);
    }
    let out = mm(&scores, v.data(), t, t, dv);
    Ok((
        Tensor::from_vec(Shape::matrix(t, dv), out)?,
        Tensor::from_vec(Shape::matrix(t, t), scores)?,
    ))
}

/// VJP of [`attention`]: `(dq, dk, dv)`.
pub fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &Tensor,
    scale: f64,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (t, dq) = (q.shape().h, q.shape().w);
    let dv_cols = v.shape().w;
    let dv = mm_tn(probs.data(), grad_out.data(), t, t, dv_cols);
    let mut ds = mm_nt(grad_out.data(), v.data(), t, dv_cols, t);
    for (row, p) in ds.chunks_mut(t).zip(probs.data().chunks(t)) {
        let dot: f64 = row.iter().zip(p).map(|(g, p)| g * p).sum();
        for (g, p) in row.iter_mut().zip(p) {
            *g = p * (*g - dot) * scale;
        }
    }
    let dqm = mm(&ds, k.data(), t, t, dq);
    let dkm = mm_tn(&ds, q.data(), t, t, dq);
    (
        Tensor::from_vec(Shape::matrix(t, dq), dqm).expect("volume"),
        Tensor::from_vec(Shape::matrix(t, dq), dkm).expect("volume"),
        Tensor::from_vec(Shape::matrix(t, dv_cols), dv).expect("volume"),
    )
}

/// Mean binary cross-entropy on logits, computed stably.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<f64> {
    targets.shape().expect("bce_with_logits", &logits.shape())?;
    let total: f64 = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&z, &y)| z.max(0.0) - z * y + math::ln_1p(math::exp(-z.abs())))
        .sum();
    Ok(total / logits.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, v: &[f64]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let x = Tensor::from_fn(Shape::new(2, 3, 4, 5), |n, c, y, x| {
            (n * 100 + c * 10 + y * 5 + x) as f64 * 0.1
        });
        let k = Tensor::from_fn(
            Shape::new(3, 3, 1, 1),
            |o, i, _, _| if o == i { 1.0 } else { 0.0 },
        );
        let y = conv2d(&x, &k, Some(&Tensor::zeros(Shape::new(1, 1, 1, 3))), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_shape_arithmetic() {
        let x = Tensor::zeros(Shape::new(1, 3, 8, 8));
        let k = Tensor::zeros(Shape::new(16, 3, 3, 3));
        assert_eq!(
            conv2d(&x, &k, None, 1, 1).unwrap().shape(),
            Shape::new(1, 16, 8, 8)
        );
        let y = conv2d(&Tensor::zeros(Shape::new(1, 3, 9, 7)), &k, None, 2, 1).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 16, 5, 4));
    }

    #[test]
    fn conv_all_ones_sums_channels() {
        let x = Tensor::ones(Shape::new(1, 2, 2, 2));
        let k = Tensor::ones(Shape::new(1, 2, 1, 1));
        let y = conv2d(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y, Tensor::full(Shape::new(1, 1, 2, 2), 2.0));
    }

    #[test]
    fn conv_matches_direct_definition() {
        // naive per-cell evaluation with explicit bounds checks
        let x = Tensor::from_fn(Shape::new(1, 2, 5, 6), |_, c, y, x| {
            ((c * 31 + y * 7 + x * 3) % 11) as f64 - 5.0
        });
        let k = Tensor::from_fn(Shape::new(3, 2, 3, 3), |o, i, y, x| {
            ((o * 5 + i * 3 + y * 2 + x) % 7) as f64 - 3.0
        });
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let y = conv2d(&x, &k, None, stride, pad).unwrap();
            let s = y.shape();
            for o in 0..s.c {
                for oy in 0..s.h {
                    for ox in 0..s.w {
                        let mut acc = 0.0;
                        for i in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as i64 - pad as i64;
                                    let ix = (ox * stride + kx) as i64 - pad as i64;
                                    if iy >= 0 && ix >= 0 && iy < 5 && ix < 6 {
                                        acc += k.at(o, i, ky, kx)
                                            * x.at(0, i, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        assert_eq!(y.at(0, o, oy, ox), acc, "stride {stride} pad {pad}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv_errors() {
        let k = Tensor::zeros(Shape::new(4, 3, 3, 3));
        let err = conv2d(&Tensor::zeros(Shape::new(1, 2, 8, 8)), &k, None, 1, 1).unwrap_err();
        assert!(matches!(
            err,
            Error::ShapeMismatch {
                dim: Dim::Channels,
                expected: 3,
                found: 2,
                ..
            }
        ));
        let err = conv2d(&Tensor::zeros(Shape::new(1, 3, 2, 2)), &k, None, 1, 0).unwrap_err();
        assert!(matches!(err, Error::DegenerateOutput { .. }));
    }

    #[test]
    fn batchnorm_identity_and_zero_scale() {
        let x = Tensor::from_fn(Shape::new(2, 2, 3, 3), |n, c, y, x| {
            (n + 2 * c) as f64 - (y * x) as f64 * 0.3
        });
        let y = batchnorm_eval(
            &x,
            &[1.0, 1.0],
            &[0.0, 0.0],
            &[0.0, 0.0],
            &[1.0, 1.0],
            1e-12,
        )
        .unwrap();
        assert!(y.max_abs_diff(&x) < 1e-9);
        let y = batchnorm_eval(
            &x,
            &[0.0, 0.0],
            &[0.5, -2.0],
            &[0.3, 0.1],
            &[2.0, 1.0],
            1e-5,
        )
        .unwrap();
        for n in 0..2 {
            assert!(y.plane(n, 0).iter().all(|&v| v == 0.5));
            assert!(y.plane(n, 1).iter().all(|&v| v == -2.0));
        }
    }

    #[test]
    fn batchnorm_train_two_values() {
        let x = t(Shape::new(1, 1, 1, 2), &[1.0, 3.0]);
        let (y, _, stats) = batchnorm_train(&x, &[2.0], &[0.0], 0.0).unwrap();
        assert_eq!(stats.mean, [2.0]);
        assert_eq!(stats.var, [1.0]);
        assert_eq!(y.data(), &[-2.0, 2.0]);
    }

    #[test]
    fn batchnorm_channel_mismatch() {
        let x = Tensor::zeros(Shape::new(1, 3, 2, 2));
        assert!(batchnorm_eval(&x, &[1.0; 2], &[0.0; 2], &[0.0; 2], &[1.0; 2], 1e-5).is_err());
    }

    #[test]
    fn activations() {
        let x = t(Shape::new(1, 1, 1, 3), &[0.0, -5.0, 5.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 5.0]);
        let s = silu(&t(Shape::new(1, 1, 1, 2), &[0.0, 1.0]));
        assert_eq!(s.data()[0], 0.0);
        // 1 / (1 + e^-1)
        assert!((s.data()[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn resampling() {
        let x = t(Shape::new(1, 1, 1, 1), &[7.0]);
        assert_eq!(
            upsample_nearest2x(&x),
            Tensor::full(Shape::new(1, 1, 2, 2), 7.0)
        );
        let x = t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        let up = upsample_nearest2x(&x);
        assert_eq!(
            up.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let block = t(Shape::new(1, 1, 2, 2), &[1.0, 3.0, 5.0, 7.0]);
        assert_eq!(downsample_avg2x(&block).unwrap().data(), &[4.0]);
        assert_eq!(
            downsample_avg2x(&Tensor::zeros(Shape::new(1, 4, 8, 8)))
                .unwrap()
                .shape(),
            Shape::new(1, 4, 4, 4)
        );
        assert_eq!(
            downsample_avg2x(&Tensor::full(Shape::new(1, 2, 4, 6), 3.5)).unwrap(),
            Tensor::full(Shape::new(1, 2, 2, 3), 3.5)
        );
        assert!(matches!(
            downsample_avg2x(&Tensor::zeros(Shape::new(1, 1, 3, 4))),
            Err(Error::Indivisible {
                dim: Dim::Height,
                ..
            })
        ));
    }

    #[test]
    fn concat_and_split() {
        let a = Tensor::from_fn(Shape::new(2, 2, 2, 2), |n, c, y, x| {
            (n * 8 + c * 4 + y * 2 + x) as f64
        });
        let b = Tensor::from_fn(Shape::new(2, 3, 2, 2), |n, c, y, x| {
            -((n * 12 + c * 4 + y * 2 + x) as f64)
        });
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape().c, 5);
        for n in 0..2 {
            assert_eq!(cat.plane(n, 2), b.plane(n, 0));
            assert_eq!(cat.plane(n, 1), a.plane(n, 1));
        }
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let parts = split_channels(&cat, 5).unwrap();
        let refs: Vec<&Tensor> = parts.iter().collect();
        assert_eq!(concat_channels(&refs).unwrap(), cat);
        assert_eq!(split_channels(&cat, 1).unwrap(), vec![cat.clone()]);
        assert!(split_channels(&cat, 2).is_err());
        let bad = Tensor::zeros(Shape::new(2, 1, 3, 2));
        assert!(matches!(
            concat_channels(&[&a, &bad]),
            Err(Error::ShapeMismatch {
                dim: Dim::Height,
                ..
            })
        ));
    }

    #[test]
    fn softmax_cases() {
        let s = softmax_lastdim(&Tensor::matrix(&[&[2.0, 2.0, 2.0, 2.0]]).unwrap()).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let s = softmax_lastdim(&Tensor::matrix(&[&[1000.0, 0.0]]).unwrap()).unwrap();
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-300);
        let s = softmax_lastdim(&Tensor::matrix(&[&[0.0, math::ln(3.0)]]).unwrap()).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn matmul_cases() {
        let a = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::matrix(&[&[5.0], &[6.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
        assert_eq!(matmul(&Tensor::eye(2), &a).unwrap(), a);
        let c = matmul(
            &Tensor::zeros(Shape::matrix(2, 3)),
            &Tensor::zeros(Shape::matrix(3, 4)),
        )
        .unwrap();
        assert_eq!(c.shape(), Shape::matrix(2, 4));
        assert_eq!(
            matmul(&a, &Tensor::zeros(Shape::matrix(3, 1))).unwrap_err(),
            Error::InnerDimMismatch { left: 2, right: 3 }
        );
    }

    #[test]
    fn tokens_round_trip() {
        let x = Tensor::from_fn(Shape::new(2, 3, 2, 4), |n, c, y, x| {
            (n * 100 + c * 10 + y * 4 + x) as f64
        });
        let toks: Vec<Tensor> = (0..2).map(|n| to_tokens(&x, n)).collect();
        assert_eq!(toks[1].at(0, 0, 5, 2), x.at(1, 2, 1, 1));
        let refs: Vec<&Tensor> = toks.iter().collect();
        assert_eq!(from_tokens(&refs, 2, 4).unwrap(), x);
    }

    #[test]
    fn attention_single_token_weight_one() {
        let q = Tensor::matrix(&[&[0.3, -1.2]]).unwrap();
        let k = Tensor::matrix(&[&[2.0, 0.7]]).unwrap();
        let v = Tensor::matrix(&[&[1.5, -2.5, 4.0]]).unwrap();
        let (out, probs) = attention(&q, &k, &v, 0.5).unwrap();
        assert_eq!(probs.data(), &[1.0]);
        assert_eq!(out, v);
    }

    #[test]
    fn bce_matches_naive() {
        let z = t(Shape::new(1, 1, 1, 3), &[-2.0, 0.0, 3.0]);
        let y = t(Shape::new(1, 1, 1, 3), &[0.0, 1.0, 1.0]);
        let naive: f64 = z
            .data()
            .iter()
            .zip(y.data())
            .map(|(&z, &y)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 3.0;
        assert!((bce_with_logits(&z, &y).unwrap() - naive).abs() < 1e-12);
    }
}
