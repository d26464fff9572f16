//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. Nodes can only reference earlier nodes, so
//! the tape is always in topological order.

use crate::error::{shape_err, Error, Result};
use crate::ops::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How ReLU nodes propagate gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BackwardMode {
    #[default]
    Standard,
    /// Guided backpropagation: ReLU also blocks negative upstream gradients.
    Guided,
}

enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    Relu { input: Var },
    MaxPool2 { input: Var, argmax: Vec<u32> },
    BatchNorm { input: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    Crop { input: Var, y0: usize, x0: usize },
    ChannelMean { input: Var, channel: usize, positions: Option<Vec<usize>> },
    GlobalAvgPool { input: Var },
    CrossEntropy { logits: Var, probs: Vec<f64>, label: usize },
    SigmoidCrossEntropy { logits: Var, probs: Vec<f64>, label: usize },
    Sum { input: Var },
    Scale { input: Var, factor: f64 },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, weight, bias, .. } => vec![*input, *weight, *bias],
            Op::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::Relu { input }
            | Op::MaxPool2 { input, .. }
            | Op::Crop { input, .. }
            | Op::ChannelMean { input, .. }
            | Op::GlobalAvgPool { input }
            | Op::Sum { input }
            | Op::Scale { input, .. } => vec![*input],
            Op::CrossEntropy { logits, .. } | Op::SigmoidCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// A single-threaded recording of tensor operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<(Var, Tensor)>,
    unreachable: Vec<Var>,
}

impl Gradients {
    /// Gradient for `var`. Unreachable variables map to a zero tensor.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.iter().find(|(v, _)| *v == var).map(|(_, g)| g)
    }

    /// Consumes the gradients, returning the one for `var`.
    pub fn take(mut self, var: Var) -> Option<Tensor> {
        let i = self.grads.iter().position(|(v, _)| *v == var)?;
        Some(self.grads.swap_remove(i).1)
    }

    /// Gradients for `vars` in the given order.
    pub fn into_ordered(mut self, vars: &[Var]) -> Vec<Tensor> {
        vars.iter()
            .map(|&v| {
                let i = self.grads.iter().position(|(g, _)| *g == v).expect("gradient was requested");
                std::mem::replace(&mut self.grads[i].1, Tensor::scalar(0.0))
            })
            .collect()
    }

    /// Variables requested in `wrt` that the output does not depend on.
    pub fn unreachable(&self) -> &[Var] {
        &self.unreachable
    }

    pub fn is_unreachable(&self, var: Var) -> bool {
        self.unreachable.contains(&var)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.value(input), self.value(weight), self.value(bias), stride, padding)?;
        let out = ops::conv2d(self.value(input), self.value(weight), self.value(bias), stride, padding)?;
        Ok(self.push(Op::Conv2d { input, weight, bias, geom }, out))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        self.push(Op::Relu { input }, out)
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = ops::maxpool2_with_argmax(self.value(input))?;
        Ok(self.push(Op::MaxPool2 { input, argmax }, out))
    }

    /// Inference-mode batch normalization. `mean` and `var` are constants;
    /// `gamma` and `beta` are differentiable.
    pub fn batchnorm(&mut self, input: Var, mean: &Tensor, var: &Tensor, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        if mean.shape() != [c] {
            return Err(shape_err(format!("batchnorm mean has shape {:?}, input has {c} channels", mean.shape())));
        }
        let (scale, shift) = ops::batchnorm_factors(mean, var, self.value(gamma), self.value(beta), eps)?;
        let out = ops::apply_affine(self.value(input), &scale, &shift, h * w);
        let inv_std = var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        Ok(self.push(Op::BatchNorm { input, gamma, beta, mean: mean.data().to_vec(), inv_std }, out))
    }

    pub fn crop(&mut self, input: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let out = self.value(input).crop(y0, x0, h, w)?;
        Ok(self.push(Op::Crop { input, y0, x0 }, out))
    }

    /// Mean of one channel of a `[C,H,W]` value, over the listed flat
    /// spatial positions or over all positions when `positions` is `None`.
    pub fn channel_mean(&mut self, input: Var, channel: usize, positions: Option<Vec<usize>>) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        if channel >= c {
            return Err(shape_err(format!("channel {channel} out of range for {c} channels")));
        }
        let plane = &self.value(input).data()[channel * h * w..(channel + 1) * h * w];
        let mean = match &positions {
            None => plane.iter().sum::<f64>() / (h * w) as f64,
            Some(pos) => {
                if pos.is_empty() {
                    return Err(Error::InvalidArgument("channel_mean over an empty position set".into()));
                }
                if let Some(p) = pos.iter().find(|&&p| p >= h * w) {
                    return Err(shape_err(format!("position {p} outside {h}x{w} map")));
                }
                pos.iter().map(|&p| plane[p]).sum::<f64>() / pos.len() as f64
            }
        };
        Ok(self.push(Op::ChannelMean { input, channel, positions }, Tensor::scalar(mean)))
    }

    /// `[C,H,W] -> [C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        let data = self.value(input).data().chunks_exact(h * w).map(|p| p.iter().sum::<f64>() / (h * w) as f64).collect();
        Ok(self.push(Op::GlobalAvgPool { input }, Tensor::from_parts(vec![c], data)))
    }

    /// Softmax cross-entropy of a logit vector against a class label.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits).data();
        if label >= z.len() {
            return Err(Error::InvalidArgument(format!("label {label} out of range for {} classes", z.len())));
        }
        let probs = softmax(z);
        let loss = -(probs[label].max(f64::MIN_POSITIVE)).ln();
        Ok(self.push(Op::CrossEntropy { logits, probs, label }, Tensor::scalar(loss)))
    }

    /// One-vs-rest logistic loss summed over classes: `label` is the only
    /// positive, every other class is a negative.
    pub fn sigmoid_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits).data();
        if label >= z.len() {
            return Err(Error::InvalidArgument(format!("label {label} out of range for {} classes", z.len())));
        }
        // log(1 + e^z) computed without overflow
        let softplus = |v: f64| v.max(0.0) + (-v.abs()).exp().ln_1p();
        let loss = z.iter().enumerate().map(|(i, &v)| softplus(v) - if i == label { v } else { 0.0 }).sum();
        let probs = z.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        Ok(self.push(Op::SigmoidCrossEntropy { logits, probs, label }, Tensor::scalar(loss)))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).sum();
        self.push(Op::Sum { input }, Tensor::scalar(s))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out = self.value(input).scale(factor);
        self.push(Op::Scale { input, factor }, out)
    }

    /// Reverse-mode gradients of the scalar `output` with respect to `wrt`.
    ///
    /// Only nodes lying on a path from a `wrt` variable to `output` are
    /// visited, so parameter gradients are skipped when only input gradients
    /// are requested.
    pub fn backward(&self, output: Var, wrt: &[Var], mode: BackwardMode) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return Err(shape_err(format!("backward needs a scalar output, got {:?}", self.value(output).shape())));
        }
        let n = output.0 + 1;
        // Forward sweep: which nodes depend on some wrt variable.
        let mut needed = vec![false; n];
        for v in wrt {
            if v.0 < n {
                needed[v.0] = true;
            }
        }
        for i in 0..n {
            if !needed[i] && self.nodes[i].op.inputs().iter().any(|v| needed[v.0]) {
                needed[i] = true;
            }
        }
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape().to_vec(), 1.0));

        for i in (0..n).rev() {
            if !needed[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (var, contrib) in self.node_backward(&node.op, &g, &needed, mode) {
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
            // keep the gradient for requested non-leaf variables
            if wrt.contains(&Var(i)) {
                grads[i] = Some(g);
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        let mut unreachable = Vec::new();
        for &v in wrt {
            match grads.get_mut(v.0).and_then(Option::take) {
                Some(g) => out.push((v, g)),
                None => {
                    unreachable.push(v);
                    let shape = self.nodes.get(v.0).map(|nd| nd.value.shape().to_vec()).unwrap_or_else(|| vec![1]);
                    out.push((v, Tensor::zeros(shape)));
                }
            }
        }
        Ok(Gradients { grads: out, unreachable })
    }

    fn node_backward(&self, op: &Op, g: &Tensor, needed: &[bool], mode: BackwardMode) -> Vec<(Var, Tensor)> {
        let need = |v: &Var| needed[v.0];
        let mut out = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                if need(input) {
                    out.push((*input, ops::conv2d_backward_input(g, self.value(*weight), geom)));
                }
                if need(weight) || need(bias) {
                    let x = self.value(*input);
                    let cols;
                    let cols_ref: &[f64] = if geom.k == 1 && geom.stride == 1 && geom.padding == 0 {
                        x.data()
                    } else {
                        cols = ops::im2col(x.data(), geom);
                        &cols
                    };
                    let (gw, gb) = ops::conv2d_backward_params(g, cols_ref, geom);
                    if need(weight) {
                        out.push((*weight, gw));
                    }
                    if need(bias) {
                        out.push((*bias, gb));
                    }
                }
            }
            Op::Relu { input } => {
                out.push((*input, ops::relu_backward(self.value(*input), g, mode == BackwardMode::Guided)));
            }
            Op::MaxPool2 { input, argmax } => {
                out.push((*input, ops::maxpool2_backward(self.value(*input).shape(), argmax, g)));
            }
            Op::BatchNorm { input, gamma, beta, mean, inv_std } => {
                let x = self.value(*input);
                let plane = x.shape()[1] * x.shape()[2];
                let gam = self.value(*gamma).data();
                if need(input) {
                    let mut gi = g.clone();
                    for (c, chunk) in gi.data_mut().chunks_exact_mut(plane).enumerate() {
                        let s = gam[c] * inv_std[c];
                        chunk.iter_mut().for_each(|v| *v *= s);
                    }
                    out.push((*input, gi));
                }
                if need(gamma) {
                    let data = (0..mean.len())
                        .map(|c| {
                            let xs = &x.data()[c * plane..(c + 1) * plane];
                            let gs = &g.data()[c * plane..(c + 1) * plane];
                            xs.iter().zip(gs).map(|(&xv, &gv)| gv * (xv - mean[c]) * inv_std[c]).sum()
                        })
                        .collect();
                    out.push((*gamma, Tensor::from_parts(vec![mean.len()], data)));
                }
                if need(beta) {
                    let data = g.data().chunks_exact(plane).map(|c| c.iter().sum()).collect();
                    out.push((*beta, Tensor::from_parts(vec![mean.len()], data)));
                }
            }
            Op::Crop { input, y0, x0 } => {
                let mut gi = Tensor::zeros(self.value(*input).shape().to_vec());
                gi.paste(g, *y0, *x0).expect("crop gradient fits its source");
                out.push((*input, gi));
            }
            Op::ChannelMean { input, channel, positions } => {
                let shape = self.value(*input).shape().to_vec();
                let plane = shape[1] * shape[2];
                let mut gi = Tensor::zeros(shape);
                let gv = g.data()[0];
                let dst = &mut gi.data_mut()[channel * plane..(channel + 1) * plane];
                match positions {
                    None => dst.iter_mut().for_each(|v| *v = gv / plane as f64),
                    Some(pos) => {
                        let share = gv / pos.len() as f64;
                        for &p in pos {
                            dst[p] += share;
                        }
                    }
                }
                out.push((*input, gi));
            }
            Op::GlobalAvgPool { input } => {
                let shape = self.value(*input).shape().to_vec();
                let plane = shape[1] * shape[2];
                let data = g.data().iter().flat_map(|&gv| std::iter::repeat_n(gv / plane as f64, plane)).collect();
                out.push((*input, Tensor::from_parts(shape, data)));
            }
            Op::CrossEntropy { logits, probs, label } => {
                out.push((*logits, prob_minus_target(probs, *label, g.data()[0])));
            }
            Op::SigmoidCrossEntropy { logits, probs, label } => {
                out.push((*logits, prob_minus_target(probs, *label, g.data()[0])));
            }
            Op::Sum { input } => {
                out.push((*input, Tensor::full(self.value(*input).shape().to_vec(), g.data()[0])));
            }
            Op::Scale { input, factor } => {
                out.push((*input, g.scale(*factor)));
            }
        }
        out.retain(|(v, _)| need(v));
        out
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `scale * (p - onehot(label))`, the logit gradient of both cross-entropies.
fn prob_minus_target(probs: &[f64], label: usize, scale: f64) -> Tensor {
    let data = probs.iter().enumerate().map(|(i, &p)| scale * (p - if i == label { 1.0 } else { 0.0 })).collect();
    Tensor::from_parts(vec![probs.len()], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let y = tape.sum(x);
        let g = tape.backward(y, &[x], BackwardMode::Standard).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
        assert!(g.unreachable().is_empty());
    }

    #[test]
    fn relu_of_negated_positive_input_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![0.5, 1.0, 2.0]).unwrap());
        let n = tape.scale(x, -1.0);
        let r = tape.relu(n);
        let y = tape.sum(r);
        let g = tape.backward(y, &[x], BackwardMode::Standard).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn unreachable_wrt_is_flagged_with_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![3], 1.0));
        let other = tape.leaf(Tensor::full(vec![2, 2], 1.0));
        let y = tape.sum(x);
        let g = tape.backward(y, &[x, other], BackwardMode::Standard).unwrap();
        assert!(g.is_unreachable(other));
        assert!(!g.is_unreachable(x));
        assert_eq!(g.get(other).unwrap(), &Tensor::zeros(vec![2, 2]));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![3], 1.0));
        assert!(tape.backward(x, &[x], BackwardMode::Standard).is_err());
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 0.5]).unwrap());
        let l = tape.cross_entropy(z, 1).unwrap();
        let g = tape.backward(l, &[z], BackwardMode::Standard).unwrap();
        let p = softmax(&[1.0, 2.0, 0.5]);
        let want = [p[0], p[1] - 1.0, p[2]];
        for (a, b) in g.get(z).unwrap().data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_cross_entropy_matches_finite_differences() {
        let z0 = [1.0, -2.0, 0.5, 30.0];
        for label in [2, 0] {
            let f = |z: &[f64]| {
                let mut tape = Tape::new();
                let v = tape.leaf(Tensor::new(vec![4], z.to_vec()).unwrap());
                let l = tape.sigmoid_cross_entropy(v, label).unwrap();
                tape.value(l).item().unwrap()
            };
            let mut tape = Tape::new();
            let z = tape.leaf(Tensor::new(vec![4], z0.to_vec()).unwrap());
            let l = tape.sigmoid_cross_entropy(z, label).unwrap();
            let g = tape.backward(l, &[z], BackwardMode::Standard).unwrap();
            for i in 0..4 {
                let (mut a, mut b) = (z0, z0);
                a[i] += 1e-6;
                b[i] -= 1e-6;
                let fd = (f(&a) - f(&b)) / 2e-6;
                assert!((g.get(z).unwrap().data()[i] - fd).abs() < 1e-6, "{label} {i}");
            }
        }
    }
}
