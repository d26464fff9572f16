//! Resampling and smoothing of 2-D maps.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Source sample positions for one axis under the half-pixel-center
/// convention: `src = (i + 0.5) * n_in / n_out - 0.5`, clamped to the input.
fn axis_weights(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear upsampling of an `[H,W]` map to `(H2, W2)` with
/// align-corners=false semantics.
pub fn bilinear_upsample(input: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (h, w) = input.dims2()?;
    let (h2, w2) = target;
    if h2 < h || w2 < w {
        return Err(Error::InvalidArgument(format!(
            "bilinear_upsample cannot downsample {h}x{w} to {h2}x{w2}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(shape_err("cannot upsample an empty map"));
    }
    if (h2, w2) == (h, w) {
        return Ok(input.clone());
    }
    let ys = axis_weights(h, h2);
    let xs = axis_weights(w, w2);
    let src = input.data();
    let mut out = Vec::with_capacity(h2 * w2);
    for &(y0, y1, fy) in &ys {
        let r0 = &src[y0 * w..(y0 + 1) * w];
        let r1 = &src[y1 * w..(y1 + 1) * w];
        for &(x0, x1, fx) in &xs {
            let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
            let bot = r1[x0] * (1.0 - fx) + r1[x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    Tensor::new(vec![h2, w2], out)
}

/// Normalized 1-D Gaussian taps of length `k` with standard deviation `k/4`.
pub fn gaussian_taps(k: usize) -> Result<Vec<f64>> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::InvalidArgument(format!("Gaussian kernel size must be odd and >= 1, got {k}")));
    }
    let sigma = k as f64 / 4.0;
    let r = (k / 2) as f64;
    let raw: Vec<f64> = (0..k)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// The `k x k` Gaussian kernel (σ = k/4) normalized to unit sum.
pub fn gaussian_kernel(k: usize) -> Result<Tensor> {
    let taps = gaussian_taps(k)?;
    let data = taps.iter().flat_map(|&a| taps.iter().map(move |&b| a * b)).collect();
    Tensor::new(vec![k, k], data)
}

/// Convolves an `[H,W]` map with the normalized `k x k` Gaussian (σ = k/4),
/// treating everything outside the map as zero. `k = 1` is the identity.
pub fn gaussian_smooth(map: &Tensor, k: usize) -> Result<Tensor> {
    let (h, w) = map.dims2()?;
    let taps = gaussian_taps(k)?;
    if k == 1 {
        return Ok(map.clone());
    }
    let r = (k / 2) as isize;
    let src = map.data();
    // The kernel is an outer product, so filter rows then columns.
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &g) in taps.iter().enumerate() {
                let sx = x as isize + t as isize - r;
                if sx >= 0 && (sx as usize) < w {
                    acc += g * row[sx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for (t, &g) in taps.iter().enumerate() {
            let sy = y as isize + t as isize - r;
            if sy < 0 || sy as usize >= h {
                continue;
            }
            let srow = &tmp[sy as usize * w..(sy as usize + 1) * w];
            let orow = &mut out[y * w..(y + 1) * w];
            for (o, &v) in orow.iter_mut().zip(srow) {
                *o += g * v;
            }
        }
    }
    Tensor::new(vec![h, w], out)
}
