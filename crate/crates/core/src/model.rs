//! Small fully-convolutional classifier: three conv/relu/pool blocks, a 1x1
//! convolutional classification head, and a pooling stage chosen by the caller.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Tape, Var};
use crate::binio::{Reader, Writer};
use crate::dataset::{to_model_input, Dataset, LabeledImage, NUM_CLASSES};
use crate::error::{shape_err, Error, Result};
use crate::ops;
use crate::tensor::Tensor;

mod train;
pub use train::{train, Loss, TrainConfig, TrainReport};

const MAGIC: &[u8; 5] = b"ATBN1";
const FORMAT_VERSION: u32 = 1;
pub const BN_EPS: f64 = 1e-5;
const BLOCK_WIDTHS: [usize; 3] = [16, 32, 64];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Plain,
    #[serde(rename = "batchnorm")]
    BatchNorm,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Variant::Plain => "plain",
            Variant::BatchNorm => "batchnorm",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Variant::Plain),
            "batchnorm" | "bn" => Ok(Variant::BatchNorm),
            _ => Err(Error::Config(format!("unknown model variant {s:?} (expected plain or batchnorm)"))),
        }
    }
}

/// Where the model is divided into `f_pre` and `f_explain`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPoint {
    /// Before the first block; `f_pre` is the identity.
    Input,
    /// After the second block.
    Mid,
    /// After the last block; `f_explain` is the classification head.
    Final,
}

impl SplitPoint {
    pub const ALL: [SplitPoint; 3] = [SplitPoint::Input, SplitPoint::Mid, SplitPoint::Final];

    pub fn name(self) -> &'static str {
        match self {
            SplitPoint::Input => "input",
            SplitPoint::Mid => "mid",
            SplitPoint::Final => "final",
        }
    }
}

impl fmt::Display for SplitPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for SplitPoint {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(SplitPoint::Input),
            "mid" => Ok(SplitPoint::Mid),
            "final" => Ok(SplitPoint::Final),
            _ => Err(Error::Config(format!("unknown split layer {s:?} (expected input, mid or final)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(x, &self.weight, &self.bias, self.stride, self.padding)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub mean: Tensor,
    pub var: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Conv),
    BatchNorm(BatchNormParams),
    Relu,
    MaxPool2,
}

impl Layer {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(c) => c.forward(x),
            Layer::BatchNorm(b) => ops::batchnorm_inference(x, &b.mean, &b.var, &b.gamma, &b.beta, b.eps),
            Layer::Relu => Ok(ops::relu(x)),
            Layer::MaxPool2 => ops::maxpool2(x),
        }
    }
}

/// Training provenance stored with a checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub variant: Variant,
    pub layers: Vec<Layer>,
    pub head: Conv,
    /// Backbone layer index at which each split point sits (input, mid, final).
    pub split_points: [usize; 3],
    pub meta: TrainingMeta,
}

impl ModelGraph {
    /// Builds a freshly initialized (He-normal) model.
    pub fn build(variant: Variant, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut split_points = [0; 3];
        let mut c_in = 3;
        for (b, &c_out) in BLOCK_WIDTHS.iter().enumerate() {
            if b == 2 {
                split_points[1] = layers.len();
            }
            layers.push(Layer::Conv(he_conv(&mut rng, c_in, c_out, 3, 1)));
            if variant == Variant::BatchNorm {
                layers.push(Layer::BatchNorm(BatchNormParams {
                    mean: Tensor::zeros(vec![c_out]),
                    var: Tensor::full(vec![c_out], 1.0),
                    gamma: Tensor::full(vec![c_out], 1.0),
                    beta: Tensor::zeros(vec![c_out]),
                    eps: BN_EPS,
                }));
            }
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool2);
            c_in = c_out;
        }
        split_points[2] = layers.len();
        let head = he_conv(&mut rng, c_in, NUM_CLASSES, 1, 0);
        Self { variant, layers, head, split_points, meta: TrainingMeta::default() }
    }

    pub fn split_index(&self, point: SplitPoint) -> usize {
        match point {
            SplitPoint::Input => self.split_points[0],
            SplitPoint::Mid => self.split_points[1],
            SplitPoint::Final => self.split_points[2],
        }
    }

    pub fn split(&self, point: SplitPoint) -> Split<'_> {
        Split { model: self, point, start: self.split_index(point) }
    }

    /// Runs backbone layers `[from, to)` without recording.
    pub fn forward_layers(&self, x: &Tensor, from: usize, to: usize) -> Result<Tensor> {
        let mut cur = x.clone();
        for layer in &self.layers[from..to] {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_layers(x, 0, self.layers.len())
    }

    /// Pointwise class scores `[10, h, w]` from backbone features.
    pub fn head_maps(&self, features: &Tensor) -> Result<Tensor> {
        self.head.forward(features)
    }

    /// Head class maps for a model input.
    pub fn class_maps(&self, x: &Tensor) -> Result<Tensor> {
        self.head_maps(&self.features(x)?)
    }

    /// Globally average-pooled class logits.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(spatial_mean(&self.class_maps(x)?))
    }

    /// Softmax probabilities of a single image's pooled logits.
    pub fn probabilities(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(softmax(self.logits(x)?.data()))
    }

    /// Input-space centers of the head positions: center of position `i`
    /// along an axis is `offset + stride * i`.
    pub fn head_geometry(&self) -> (f64, usize) {
        let mut offset = 0.0;
        let mut jump = 1usize;
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    offset += jump as f64 * ((c.kernel() as f64 - 1.0) / 2.0 - c.padding as f64);
                    jump *= c.stride;
                }
                Layer::MaxPool2 => {
                    offset += jump as f64 * 0.5;
                    jump *= 2;
                }
                _ => {}
            }
        }
        (offset, jump)
    }

    /// Side length of the input region that can influence one head position.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    rf += (c.kernel() - 1) * jump;
                    jump *= c.stride;
                }
                Layer::MaxPool2 => {
                    rf += jump;
                    jump *= 2;
                }
                _ => {}
            }
        }
        rf
    }

    /// Total spatial downsampling between the input and the split layer.
    pub fn stride_at(&self, point: SplitPoint) -> usize {
        self.layers[..self.split_index(point)]
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => c.stride,
                Layer::MaxPool2 => 2,
                _ => 1,
            })
            .product()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Trainable tensors in canonical order.
    pub(crate) fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Conv(c) => out.extend([&c.weight, &c.bias]),
                Layer::BatchNorm(b) => out.extend([&b.gamma, &b.beta]),
                _ => {}
            }
        }
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Conv(c) => out.extend([&mut c.weight, &mut c.bias]),
                Layer::BatchNorm(b) => out.extend([&mut b.gamma, &mut b.beta]),
                _ => {}
            }
        }
        out.extend([&mut self.head.weight, &mut self.head.bias]);
        out
    }

    /// Records backbone layers `[from, ..)` and the head on `tape`. Parameters
    /// become leaves; their vars are returned in canonical order restricted to
    /// the recorded layers. `bn_stats` overrides stored statistics per layer.
    pub(crate) fn record(
        &self,
        tape: &mut Tape,
        input: Var,
        from: usize,
        bn_stats: Option<&[Option<(Tensor, Tensor)>]>,
    ) -> Result<(Var, Vec<Var>)> {
        let mut cur = input;
        let mut params = Vec::new();
        for (i, layer) in self.layers.iter().enumerate().skip(from) {
            cur = match layer {
                Layer::Conv(c) => {
                    let w = tape.leaf(c.weight.clone());
                    let b = tape.leaf(c.bias.clone());
                    params.extend([w, b]);
                    tape.conv2d(cur, w, b, c.stride, c.padding)?
                }
                Layer::BatchNorm(bn) => {
                    let g = tape.leaf(bn.gamma.clone());
                    let b = tape.leaf(bn.beta.clone());
                    params.extend([g, b]);
                    match bn_stats.and_then(|s| s[i].as_ref()) {
                        Some((m, v)) => tape.batchnorm(cur, m, v, g, b, bn.eps)?,
                        None => tape.batchnorm(cur, &bn.mean, &bn.var, g, b, bn.eps)?,
                    }
                }
                Layer::Relu => tape.relu(cur),
                Layer::MaxPool2 => tape.maxpool2(cur)?,
            };
        }
        let w = tape.leaf(self.head.weight.clone());
        let b = tape.leaf(self.head.bias.clone());
        params.extend([w, b]);
        let maps = tape.conv2d(cur, w, b, self.head.stride, self.head.padding)?;
        Ok((maps, params))
    }

    /// Returns images from the eval split whose true-class probability is at
    /// least `threshold`.
    pub fn filter_confident(&self, data: &Dataset, threshold: f64) -> Result<ConfidentPool> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::InvalidArgument(format!("confidence threshold must be in (0,1), got {threshold}")));
        }
        let mut images = Vec::new();
        let mut confidences = Vec::new();
        for img in &data.eval {
            let p = self.probabilities(&to_model_input(&img.pixels))?[img.label];
            if p >= threshold {
                images.push(img.clone());
                confidences.push(p);
            }
        }
        let mut per_class = [0usize; NUM_CLASSES];
        for img in &images {
            per_class[img.label] += 1;
        }
        let starved_classes = (0..NUM_CLASSES).filter(|&c| per_class[c] < MIN_CONFIDENT_PER_CLASS).collect::<Vec<_>>();
        if !starved_classes.is_empty() {
            log::warn!("classes with fewer than {MIN_CONFIDENT_PER_CLASS} confident images: {starved_classes:?}");
        }
        Ok(ConfidentPool { threshold, images, confidences, per_class: per_class.to_vec(), starved_classes })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(FORMAT_VERSION);
        w.str(&self.variant.to_string());
        w.u32(self.split_points.len() as u32);
        for &s in &self.split_points {
            w.u32(s as u32);
        }
        // descriptor table
        w.u32(self.layers.len() as u32 + 1);
        let describe_conv = |w: &mut Writer, c: &Conv| {
            w.u16(0);
            for &d in c.weight.shape() {
                w.u32(d as u32);
            }
            w.u32(c.stride as u32);
            w.u32(c.padding as u32);
        };
        for l in &self.layers {
            match l {
                Layer::Conv(c) => describe_conv(&mut w, c),
                Layer::BatchNorm(b) => {
                    w.u16(1);
                    w.u32(b.mean.numel() as u32);
                    w.f64(b.eps);
                }
                Layer::Relu => w.u16(2),
                Layer::MaxPool2 => w.u16(3),
            }
        }
        describe_conv(&mut w, &self.head);
        // weight buffers
        let mut put = |t: &Tensor| t.data().iter().for_each(|&v| w.f64(v));
        for l in &self.layers {
            match l {
                Layer::Conv(c) => {
                    put(&c.weight);
                    put(&c.bias);
                }
                Layer::BatchNorm(b) => {
                    put(&b.mean);
                    put(&b.var);
                    put(&b.gamma);
                    put(&b.beta);
                }
                _ => {}
            }
        }
        put(&self.head.weight);
        put(&self.head.bias);
        w.str(&serde_json::to_string(&self.meta)?);
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version(format!("checkpoint format version {version}, this build reads {FORMAT_VERSION}")));
        }
        let variant: Variant = r.str()?.parse().map_err(|e: Error| Error::Format(e.to_string()))?;
        if r.u32()? != 3 {
            return Err(Error::Format("checkpoint must declare 3 split points".into()));
        }
        let split_points = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let n = r.u32()? as usize;
        if n == 0 {
            return Err(Error::Format("checkpoint has no layers".into()));
        }
        enum Desc {
            Conv([usize; 4], usize, usize),
            Bn(usize, f64),
            Relu,
            Pool,
        }
        let mut descs = Vec::with_capacity(n);
        for _ in 0..n {
            descs.push(match r.u16()? {
                0 => {
                    let s = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
                    Desc::Conv(s, r.u32()? as usize, r.u32()? as usize)
                }
                1 => {
                    let c = r.u32()? as usize;
                    let eps = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
                    Desc::Bn(c, eps)
                }
                2 => Desc::Relu,
                3 => Desc::Pool,
                k => return Err(Error::Format(format!("unknown layer kind {k}"))),
            });
        }
        let read_conv = |r: &mut Reader, s: [usize; 4], stride, padding| -> Result<Conv> {
            let weight = Tensor::from_parts(s.to_vec(), r.f64s(s.iter().product())?);
            let bias = Tensor::from_parts(vec![s[0]], r.f64s(s[0])?);
            Ok(Conv { weight, bias, stride, padding })
        };
        let mut layers = Vec::with_capacity(n - 1);
        let head_desc = descs.pop().unwrap();
        for d in descs {
            layers.push(match d {
                Desc::Conv(s, st, p) => Layer::Conv(read_conv(&mut r, s, st, p)?),
                Desc::Bn(c, eps) => {
                    let mut v = || -> Result<Tensor> { Ok(Tensor::from_parts(vec![c], r.f64s(c)?)) };
                    Layer::BatchNorm(BatchNormParams { mean: v()?, var: v()?, gamma: v()?, beta: v()?, eps })
                }
                Desc::Relu => Layer::Relu,
                Desc::Pool => Layer::MaxPool2,
            });
        }
        let head = match head_desc {
            Desc::Conv(s, st, p) => read_conv(&mut r, s, st, p)?,
            _ => return Err(Error::Format("checkpoint head must be a convolution".into())),
        };
        let meta: TrainingMeta = serde_json::from_str(&r.str()?)?;
        r.finish()?;
        if split_points.iter().any(|&s| s > layers.len()) {
            return Err(Error::Format("split point beyond layer count".into()));
        }
        Ok(Self { variant, layers, head, split_points, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact { path: path.to_path_buf(), producer: "train" });
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub const MIN_CONFIDENT_PER_CLASS: usize = 25;

/// Output of [`ModelGraph::filter_confident`].
#[derive(Clone, Debug)]
pub struct ConfidentPool {
    pub threshold: f64,
    pub images: Vec<LabeledImage>,
    pub confidences: Vec<f64>,
    pub per_class: Vec<usize>,
    /// Classes with fewer than [`MIN_CONFIDENT_PER_CLASS`] images.
    pub starved_classes: Vec<usize>,
}

fn he_conv(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, k: usize, padding: usize) -> Conv {
    let fan_in = (c_in * k * k) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
    let n = c_out * c_in * k * k;
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Conv {
        weight: Tensor::from_parts(vec![c_out, c_in, k, k], data),
        bias: Tensor::zeros(vec![c_out]),
        stride: 1,
        padding,
    }
}

/// `[C,H,W] -> [C]` spatial mean.
pub fn spatial_mean(maps: &Tensor) -> Tensor {
    let (c, h, w) = maps.dims3().expect("class maps are rank 3");
    let data = maps.data().chunks_exact(h * w).map(|p| p.iter().sum::<f64>() / (h * w) as f64).collect();
    Tensor::from_parts(vec![c], data)
}

/// The two virtual halves of a model divided at a split point.
#[derive(Clone, Copy)]
pub struct Split<'m> {
    pub model: &'m ModelGraph,
    pub point: SplitPoint,
    start: usize,
}

/// Activations of `f_explain` for one input, kept for incremental updates.
pub struct ExplainCache {
    /// `acts[0]` is the input; `acts[i + 1]` is the output of the i-th
    /// recorded layer; the last entry holds the head class maps.
    acts: Vec<Tensor>,
}

impl ExplainCache {
    pub fn input(&self) -> &Tensor {
        &self.acts[0]
    }

    pub fn head_maps(&self) -> &Tensor {
        self.acts.last().expect("cache is never empty")
    }
}

/// A rectangle of replacement values in a `[C,H,W]` activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub y0: usize,
    pub x0: usize,
    pub values: Tensor,
}

impl<'m> Split<'m> {
    /// `f_pre`: backbone layers before the split.
    pub fn pre(&self, x: &Tensor) -> Result<Tensor> {
        self.model.forward_layers(x, 0, self.start)
    }

    /// `f_explain` up to the head class maps (pooling is applied by the caller).
    pub fn explain(&self, a: &Tensor) -> Result<Tensor> {
        let feats = self.model.forward_layers(a, self.start, self.model.layers.len())?;
        self.model.head_maps(&feats)
    }

    /// Records `f_explain` on a tape; returns the class-map var.
    pub fn explain_on_tape(&self, tape: &mut Tape, a: Var) -> Result<Var> {
        Ok(self.model.record(tape, a, self.start, None)?.0)
    }

    /// Spatial downsampling from the split layer to the head.
    pub fn stride_to_head(&self) -> usize {
        self.model.stride_at(SplitPoint::Final) / self.model.stride_at(self.point)
    }

    pub fn explain_cached(&self, a: &Tensor) -> Result<ExplainCache> {
        let mut acts = vec![a.clone()];
        for layer in &self.model.layers[self.start..] {
            let next = layer.forward(acts.last().unwrap())?;
            acts.push(next);
        }
        let maps = self.model.head_maps(acts.last().unwrap())?;
        acts.push(maps);
        Ok(ExplainCache { acts })
    }

    /// Propagates a replaced input rectangle through `f_explain`, recomputing
    /// only the region it can affect. Returns the changed head-map rectangle.
    pub fn explain_patch(&self, cache: &ExplainCache, patch: &Patch) -> Result<Patch> {
        let mut cur = patch.clone();
        for (i, layer) in self.model.layers[self.start..].iter().enumerate() {
            cur = propagate(layer, &cache.acts[i], &cur)?;
        }
        let i = cache.acts.len() - 2;
        propagate_conv(&self.model.head, &cache.acts[i], &cur)
    }
}

/// Builds the `[C, rows, cols]` input window starting at `(y0, x0)` (which
/// may reach outside the map; those entries are zero), overlaying `patch`.
fn gather(base: &Tensor, patch: &Patch, y0: isize, x0: isize, rows: usize, cols: usize) -> Tensor {
    let (c, h, w) = base.dims3().expect("rank 3");
    let (_, ph, pw) = patch.values.dims3().expect("rank 3");
    let mut out = vec![0.0; c * rows * cols];
    for ch in 0..c {
        for r in 0..rows {
            let y = y0 + r as isize;
            if y < 0 || y >= h as isize {
                continue;
            }
            let y = y as usize;
            for q in 0..cols {
                let x = x0 + q as isize;
                if x < 0 || x >= w as isize {
                    continue;
                }
                let x = x as usize;
                let in_patch = y >= patch.y0 && y < patch.y0 + ph && x >= patch.x0 && x < patch.x0 + pw;
                out[(ch * rows + r) * cols + q] = if in_patch {
                    patch.values.at3(ch, y - patch.y0, x - patch.x0)
                } else {
                    base.at3(ch, y, x)
                };
            }
        }
    }
    Tensor::from_parts(vec![c, rows, cols], out)
}

fn propagate_conv(conv: &Conv, base: &Tensor, patch: &Patch) -> Result<Patch> {
    if conv.stride != 1 {
        return Err(Error::InvalidArgument("incremental evaluation supports stride-1 convolutions only".into()));
    }
    let (_, h, w) = base.dims3()?;
    let (_, ph, pw) = patch.values.dims3()?;
    let (k, p) = (conv.kernel() as isize, conv.padding as isize);
    let h_out = h as isize + 2 * p - k + 1;
    let w_out = w as isize + 2 * p - k + 1;
    // output rows r with input rows r - p .. r - p + k - 1 touching the patch
    let oy0 = (patch.y0 as isize + p - k + 1).max(0);
    let oy1 = ((patch.y0 + ph) as isize + p).min(h_out);
    let ox0 = (patch.x0 as isize + p - k + 1).max(0);
    let ox1 = ((patch.x0 + pw) as isize + p).min(w_out);
    if oy0 >= oy1 || ox0 >= ox1 {
        return Err(shape_err("patch does not reach the layer output"));
    }
    let rows = (oy1 - oy0 + k - 1) as usize;
    let cols = (ox1 - ox0 + k - 1) as usize;
    let local = gather(base, patch, oy0 - p, ox0 - p, rows, cols);
    let values = ops::conv2d(&local, &conv.weight, &conv.bias, 1, 0)?;
    Ok(Patch { y0: oy0 as usize, x0: ox0 as usize, values })
}

fn propagate(layer: &Layer, base: &Tensor, patch: &Patch) -> Result<Patch> {
    match layer {
        Layer::Conv(c) => propagate_conv(c, base, patch),
        Layer::Relu => Ok(Patch { y0: patch.y0, x0: patch.x0, values: ops::relu(&patch.values) }),
        Layer::BatchNorm(b) => Ok(Patch {
            y0: patch.y0,
            x0: patch.x0,
            values: ops::batchnorm_inference(&patch.values, &b.mean, &b.var, &b.gamma, &b.beta, b.eps)?,
        }),
        Layer::MaxPool2 => {
            let (_, ph, pw) = patch.values.dims3()?;
            let (oy0, ox0) = (patch.y0 / 2, patch.x0 / 2);
            let oy1 = (patch.y0 + ph - 1) / 2 + 1;
            let ox1 = (patch.x0 + pw - 1) / 2 + 1;
            let local = gather(base, patch, 2 * oy0 as isize, 2 * ox0 as isize, 2 * (oy1 - oy0), 2 * (ox1 - ox0));
            Ok(Patch { y0: oy0, x0: ox0, values: ops::maxpool2(&local)? })
        }
    }
}
