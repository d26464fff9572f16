//! Dense row-major `f64` tensors.

use std::fmt;

use crate::error::{shape_err, Result};

/// A dense n-dimensional array of `f64` stored in row-major order.
///
/// The product of `shape` always equals `data.len()`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} holds {n} elements but buffer has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(shape_err(format!("expected rank-3 [C,H,W], got {:?}", self.shape))),
        }
    }

    /// `(height, width)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [h, w] => Ok((h, w)),
            _ => Err(shape_err(format!("expected rank-2 [H,W], got {:?}", self.shape))),
        }
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(shape_err(format!("expected a scalar, got shape {:?}", self.shape)))
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    /// Element `[c, y, x]` of a rank-3 tensor (no bounds check beyond the slice).
    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    /// Channel `c` of a `[C,H,W]` tensor as an `[H,W]` tensor.
    pub fn channel(&self, c: usize) -> Result<Tensor> {
        let (ch, h, w) = self.dims3()?;
        if c >= ch {
            return Err(shape_err(format!("channel {c} out of range for {ch} channels")));
        }
        Ok(Self::from_parts(vec![h, w], self.data[c * h * w..(c + 1) * h * w].to_vec()))
    }

    /// Signed sum over channels: `[C,H,W] -> [H,W]`.
    pub fn sum_channels(&self) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        let mut out = vec![0.0; h * w];
        for plane in self.data.chunks_exact(h * w).take(c) {
            for (o, v) in out.iter_mut().zip(plane) {
                *o += v;
            }
        }
        Ok(Self::from_parts(vec![h, w], out))
    }

    /// Spatial crop of a `[C,H,W]` tensor.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
        let (c, hh, ww) = self.dims3()?;
        if y0 + h > hh || x0 + w > ww {
            return Err(shape_err(format!(
                "crop [{y0}+{h}, {x0}+{w}] exceeds spatial dims {hh}x{ww}"
            )));
        }
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in y0..y0 + h {
                let row = (ch * hh + y) * ww;
                out.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        Ok(Self::from_parts(vec![c, h, w], out))
    }

    /// Writes `patch` (`[C,h,w]`) into this `[C,H,W]` tensor at `(y0, x0)`.
    pub fn paste(&mut self, patch: &Tensor, y0: usize, x0: usize) -> Result<()> {
        let (c, hh, ww) = self.dims3()?;
        let (pc, h, w) = patch.dims3()?;
        if pc != c || y0 + h > hh || x0 + w > ww {
            return Err(shape_err(format!(
                "cannot paste {:?} at ({y0},{x0}) into {:?}",
                patch.shape, self.shape
            )));
        }
        for ch in 0..c {
            for y in 0..h {
                let dst = (ch * hh + y0 + y) * ww + x0;
                let src = (ch * h + y) * w;
                self.data[dst..dst + w].copy_from_slice(&patch.data[src..src + w]);
            }
        }
        Ok(())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| shape_err("cannot stack zero tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            first.expect_same_shape(t)?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self::from_parts(shape, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_buffer() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn crop_then_paste_restores() {
        let data: Vec<f64> = (0..2 * 4 * 5).map(|v| v as f64).collect();
        let t = Tensor::new(vec![2, 4, 5], data).unwrap();
        let patch = t.crop(1, 2, 2, 3).unwrap();
        assert_eq!(patch.at3(1, 0, 0), t.at3(1, 1, 2));
        let mut z = Tensor::zeros(vec![2, 4, 5]);
        z.paste(&patch, 1, 2).unwrap();
        assert_eq!(z.at3(0, 2, 4), t.at3(0, 2, 4));
        assert_eq!(z.at3(0, 0, 0), 0.0);
        assert!(t.crop(3, 0, 2, 1).is_err());
    }

    #[test]
    fn sum_channels_keeps_sign() {
        let t = Tensor::new(vec![2, 1, 2], vec![1.0, -2.0, -3.0, 1.0]).unwrap();
        assert_eq!(t.sum_channels().unwrap().data(), &[-2.0, -1.0]);
    }
}
