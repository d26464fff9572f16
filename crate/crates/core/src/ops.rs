//! Forward and backward kernels for the layer vocabulary used by the models.
//!
//! All kernels operate on single samples laid out as `[C,H,W]`. The tape in
//! [`crate::autodiff`] records these and calls the matching backward kernels.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(input: &Tensor, weights: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (c_in, h, w) = input.dims3()?;
        let (c_out, wc_in, kh, kw) = match weights.shape()[..] {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(shape_err(format!("weights must be [C_out,C_in,k,k], got {:?}", weights.shape()))),
        };
        if wc_in != c_in {
            return Err(shape_err(format!("C_in: input has {c_in} channels, weights expect {wc_in}")));
        }
        if kh != kw {
            return Err(shape_err(format!("kernel must be square, got {kh}x{kw}")));
        }
        if bias.shape() != [c_out] {
            return Err(shape_err(format!("bias must be [{c_out}] (C_out), got {:?}", bias.shape())));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        let k = kh;
        if k > h + 2 * padding {
            return Err(shape_err(format!("H: kernel {k} exceeds padded height {}", h + 2 * padding)));
        }
        if k > w + 2 * padding {
            return Err(shape_err(format!("W: kernel {k} exceeds padded width {}", w + 2 * padding)));
        }
        Ok(Self {
            c_in,
            c_out,
            h,
            w,
            k,
            stride,
            padding,
            h_out: (h + 2 * padding - k) / stride + 1,
            w_out: (w + 2 * padding - k) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfolds `input` into a `[C_in*k*k, H_out*W_out]` patch matrix.
pub(crate) fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.col_cols();
    let mut cols = vec![0.0; g.col_rows() * n];
    let p = g.padding as isize;
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let out_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if g.stride == 1 {
                        // valid ox range: 0 <= ox + kx - p < w
                        let lo = (p - kx as isize).max(0) as usize;
                        let hi = ((g.w as isize + p - kx as isize).min(g.w_out as isize)).max(0) as usize;
                        if lo < hi {
                            let s0 = (lo as isize + kx as isize - p) as usize;
                            out_row[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - p;
                            if ix >= 0 && ix < g.w as isize {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.col_cols();
    let mut out = vec![0.0; g.c_in * g.h * g.w];
    let p = g.padding as isize;
    for c in 0..g.c_in {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `c[m,n] = a[m,k] * b[k,n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    // SAFETY: strides describe in-bounds views of `a` and `b` as asserted by callers;
    // `c` is a dense row-major m x n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Convolution forward from a precomputed patch matrix.
pub(crate) fn conv2d_from_cols(cols: &[f64], weights: &Tensor, bias: &Tensor, g: &ConvGeom) -> Tensor {
    let n = g.col_cols();
    let kk = g.col_rows();
    let mut out = vec![0.0; g.c_out * n];
    gemm(g.c_out, kk, n, weights.data(), kk as isize, 1, cols, n as isize, 1, &mut out);
    for (row, &b) in out.chunks_exact_mut(n).zip(bias.data()) {
        if b != 0.0 {
            row.iter_mut().for_each(|v| *v += b);
        }
    }
    Tensor::from_parts(vec![g.c_out, g.h_out, g.w_out], out)
}

/// 2-D cross-correlation of a `[C_in,H,W]` input with `[C_out,C_in,k,k]` weights.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeom::new(input, weights, bias, stride, padding)?;
    if g.k == 1 && stride == 1 && padding == 0 {
        return Ok(conv2d_from_cols(input.data(), weights, bias, &g));
    }
    let cols = im2col(input.data(), &g);
    Ok(conv2d_from_cols(&cols, weights, bias, &g))
}

/// Gradient of a convolution with respect to its input.
pub(crate) fn conv2d_backward_input(grad_out: &Tensor, weights: &Tensor, g: &ConvGeom) -> Tensor {
    let n = g.col_cols();
    let kk = g.col_rows();
    let mut gcols = vec![0.0; kk * n];
    // W^T: [kk, c_out] viewed through strides of W [c_out, kk]
    gemm(kk, g.c_out, n, weights.data(), 1, kk as isize, grad_out.data(), n as isize, 1, &mut gcols);
    if g.k == 1 && g.stride == 1 && g.padding == 0 {
        return Tensor::from_parts(vec![g.c_in, g.h, g.w], gcols);
    }
    Tensor::from_parts(vec![g.c_in, g.h, g.w], col2im(&gcols, g))
}

/// Gradients of a convolution with respect to weights and bias.
pub(crate) fn conv2d_backward_params(grad_out: &Tensor, cols: &[f64], g: &ConvGeom) -> (Tensor, Tensor) {
    let n = g.col_cols();
    let kk = g.col_rows();
    let mut gw = vec![0.0; g.c_out * kk];
    // cols^T: [n, kk] viewed through strides of cols [kk, n]
    gemm(g.c_out, n, kk, grad_out.data(), n as isize, 1, cols, 1, n as isize, &mut gw);
    let gb = grad_out.data().chunks_exact(n).map(|r| r.iter().sum()).collect();
    (
        Tensor::from_parts(vec![g.c_out, g.c_in, g.k, g.k], gw),
        Tensor::from_parts(vec![g.c_out], gb),
    )
}

/// Elementwise `max(0, x)`.
pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// ReLU backward. The derivative at exactly zero is zero. In guided mode the
/// gradient is additionally zeroed wherever the upstream gradient is negative.
pub(crate) fn relu_backward(input: &Tensor, grad_out: &Tensor, guided: bool) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 && (!guided || g > 0.0) { g } else { 0.0 })
        .collect();
    Tensor::from_parts(input.shape().to_vec(), data)
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, for every
/// output element, the flat index of the input element it came from
/// (first occurrence in row-major window order on ties).
pub fn maxpool2_with_argmax(input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (c, h, w) = input.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err(format!("maxpool2 needs even spatial dims, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let src = input.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..ho {
            let r0 = base + 2 * oy * w;
            let r1 = r0 + w;
            for ox in 0..wo {
                let cand = [r0 + 2 * ox, r0 + 2 * ox + 1, r1 + 2 * ox, r1 + 2 * ox + 1];
                let mut best = cand[0];
                for &i in &cand[1..] {
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                out.push(src[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::from_parts(vec![c, ho, wo], out), arg))
}

pub fn maxpool2(input: &Tensor) -> Result<Tensor> {
    maxpool2_with_argmax(input).map(|(t, _)| t)
}

pub(crate) fn maxpool2_backward(input_shape: &[usize], argmax: &[u32], grad_out: &Tensor) -> Tensor {
    let mut g = Tensor::zeros(input_shape.to_vec());
    let gd = g.data_mut();
    for (&i, &v) in argmax.iter().zip(grad_out.data()) {
        gd[i as usize] += v;
    }
    g
}

/// Per-channel affine factors `(scale, shift)` such that
/// `y = x * scale + shift` reproduces inference-mode batch normalization.
pub(crate) fn batchnorm_factors(
    mean: &Tensor,
    var: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = mean.numel();
    for (name, t) in [("var", var), ("gamma", gamma), ("beta", beta)] {
        if t.shape() != mean.shape() || t.ndim() != 1 {
            return Err(shape_err(format!("batchnorm {name} has shape {:?}, expected [{c}]", t.shape())));
        }
    }
    if let Some(v) = var.data().iter().find(|v| **v < 0.0 || v.is_nan()) {
        return Err(Error::InvalidArgument(format!("batchnorm variance must be >= 0, got {v}")));
    }
    let mut scale = Vec::with_capacity(c);
    let mut shift = Vec::with_capacity(c);
    for i in 0..c {
        let inv = 1.0 / (var.data()[i] + eps).sqrt();
        scale.push(gamma.data()[i] * inv);
        shift.push(beta.data()[i] - mean.data()[i] * gamma.data()[i] * inv);
    }
    Ok((scale, shift))
}

/// Inference-mode batch normalization with frozen statistics.
pub fn batchnorm_inference(
    input: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if mean.shape() != [c] {
        return Err(shape_err(format!("batchnorm mean has shape {:?}, input has {c} channels", mean.shape())));
    }
    let (scale, shift) = batchnorm_factors(mean, var, gamma, beta, eps)?;
    Ok(apply_affine(input, &scale, &shift, h * w))
}

pub(crate) fn apply_affine(input: &Tensor, scale: &[f64], shift: &[f64], plane: usize) -> Tensor {
    let mut out = input.clone();
    for ((chunk, &s), &b) in out.data_mut().chunks_exact_mut(plane).zip(scale).zip(shift) {
        chunk.iter_mut().for_each(|v| *v = *v * s + b);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_sum_of_ones() {
        let out = conv2d(&Tensor::full(vec![1, 3, 3], 1.0), &Tensor::full(vec![1, 1, 3, 3], 1.0), &Tensor::zeros(vec![1]), 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[1, 2, 3], &[1.0, -2.0, 3.5, 0.25, 7.0, -1.0]);
        let out = conv2d(&x, &Tensor::full(vec![1, 1, 1, 1], 1.0), &Tensor::zeros(vec![1]), 1, 0).unwrap();
        assert_eq!(out, x);
        // Same through the padded im2col route.
        let mut w = Tensor::zeros(vec![1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let out = conv2d(&x, &w, &Tensor::zeros(vec![1]), 1, 1).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn conv_output_size_and_stride() {
        let x = Tensor::full(vec![2, 7, 5], 1.0);
        let w = Tensor::full(vec![3, 2, 3, 3], 1.0);
        let out = conv2d(&x, &w, &Tensor::zeros(vec![3]), 2, 1).unwrap();
        assert_eq!(out.shape(), &[3, 4, 3]);
        // corner sees a 2x2 valid window in each of 2 channels
        assert_eq!(out.at3(0, 0, 0), 8.0);
        assert_eq!(out.at3(0, 1, 1), 18.0);
    }

    #[test]
    fn conv_shape_errors_name_dimension() {
        let x = Tensor::zeros(vec![2, 4, 4]);
        let err = conv2d(&x, &Tensor::zeros(vec![1, 3, 3, 3]), &Tensor::zeros(vec![1]), 1, 0).unwrap_err();
        assert!(err.to_string().contains("C_in"), "{err}");
        let err = conv2d(&x, &Tensor::zeros(vec![1, 2, 3, 3]), &Tensor::zeros(vec![2]), 1, 0).unwrap_err();
        assert!(err.to_string().contains("C_out"), "{err}");
        let err = conv2d(&Tensor::zeros(vec![2, 2, 8]), &Tensor::zeros(vec![1, 2, 3, 3]), &Tensor::zeros(vec![1]), 1, 0).unwrap_err();
        assert!(err.to_string().contains("H:"), "{err}");
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&t(&[3], &[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        let pos = t(&[2], &[0.5, 3.0]);
        assert_eq!(relu(&pos), pos);
        let g = relu_backward(&t(&[3], &[-1.0, 0.0, 2.0]), &t(&[3], &[1.0, 1.0, 1.0]), false);
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
        let g = relu_backward(&t(&[2], &[1.0, 2.0]), &t(&[2], &[-1.0, 1.0]), true);
        assert_eq!(g.data(), &[0.0, 1.0]);
    }

    #[test]
    fn maxpool_examples() {
        let out = maxpool2(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(out.data(), &[4.0]);
        let c = Tensor::full(vec![1, 4, 4], 2.5);
        let (out, arg) = maxpool2_with_argmax(&c).unwrap();
        assert!(out.data().iter().all(|&v| v == 2.5));
        assert_eq!(arg, vec![0, 2, 8, 10]);
        let g = maxpool2_backward(&[1, 4, 4], &arg, &Tensor::full(vec![1, 2, 2], 1.0));
        assert_eq!(g.data()[0], 1.0);
        assert_eq!(g.data()[1], 0.0);
        assert_eq!(g.data()[5], 0.0);
        assert!(maxpool2(&Tensor::zeros(vec![1, 3, 4])).is_err());
    }

    #[test]
    fn batchnorm_examples() {
        let x = t(&[2, 1, 2], &[1.0, -3.0, 0.5, 2.0]);
        let zeros = Tensor::zeros(vec![2]);
        let ones = Tensor::full(vec![2], 1.0);
        assert_eq!(batchnorm_inference(&x, &zeros, &ones, &ones, &zeros, 0.0).unwrap(), x);

        let same = t(&[2, 1, 1], &[0.7, -1.2]);
        let mean = t(&[2], &[0.7, -1.2]);
        let out = batchnorm_inference(&same, &mean, &ones, &ones, &zeros, 1e-5).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let beta = t(&[2], &[0.3, -4.0]);
        let out = batchnorm_inference(&x, &t(&[2], &[5.0, 1.0]), &t(&[2], &[2.0, 0.1]), &zeros, &beta, 1e-5).unwrap();
        assert_eq!(out.data(), &[0.3, 0.3, -4.0, -4.0]);

        let neg = t(&[2], &[1.0, -0.1]);
        assert!(batchnorm_inference(&x, &zeros, &neg, &ones, &zeros, 0.0).is_err());
    }
}
