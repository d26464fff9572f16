//! Attribution methods evaluated at a split layer, smoothing, and the map
//! archive format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, BackwardMode};
use crate::binio::{Reader, Writer};
use crate::error::{shape_err, Error, Result};
use crate::grid::{CellBox, ExplainTarget, Setting, GRID_N, NUM_CELLS};
use crate::imaging::{bilinear_upsample, gaussian_smooth};
use crate::model::SplitPoint;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Gradient,
    IxG,
    IntGrad,
    GuidedBp,
    GradCam,
    GradCamPp,
    AblationCam,
    ScoreCam,
    LayerCam,
    Occlusion,
    Rise,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::Gradient,
        Method::IxG,
        Method::IntGrad,
        Method::GuidedBp,
        Method::GradCam,
        Method::GradCamPp,
        Method::AblationCam,
        Method::ScoreCam,
        Method::LayerCam,
        Method::Occlusion,
        Method::Rise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Gradient => "Gradient",
            Method::IxG => "IxG",
            Method::IntGrad => "IntGrad",
            Method::GuidedBp => "GuidedBP",
            Method::GradCam => "GradCAM",
            Method::GradCamPp => "GradCAM++",
            Method::AblationCam => "AblationCAM",
            Method::ScoreCam => "ScoreCAM",
            Method::LayerCam => "LayerCAM",
            Method::Occlusion => "Occlusion",
            Method::Rise => "RISE",
        }
    }

    /// Methods that only need `∂y/∂a` at the actual activation.
    fn uses_plain_gradient(self) -> bool {
        matches!(self, Method::Gradient | Method::IxG | Method::GradCam | Method::GradCamPp | Method::LayerCam)
    }

    /// Methods whose maps may be post-processed by Gaussian smoothing.
    pub fn smoothable(self) -> bool {
        matches!(self, Method::IxG | Method::IntGrad)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown attribution method {s:?}")))
    }
}

/// Occlusion window size and stride at one split layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcclusionParams {
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributionConfig {
    pub intgrad_steps: usize,
    pub occlusion_input: OcclusionParams,
    pub occlusion_hidden: OcclusionParams,
    pub occlusion_fill: f64,
    pub rise_masks: usize,
    pub rise_grid: usize,
    pub rise_keep: f64,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            intgrad_steps: 50,
            occlusion_input: OcclusionParams { kernel: 8, stride: 4 },
            occlusion_hidden: OcclusionParams { kernel: 5, stride: 2 },
            occlusion_fill: 0.0,
            rise_masks: 1000,
            rise_grid: 7,
            rise_keep: 0.5,
        }
    }
}

impl AttributionConfig {
    pub fn occlusion_for(&self, point: SplitPoint) -> OcclusionParams {
        match point {
            SplitPoint::Input => self.occlusion_input,
            _ => self.occlusion_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for o in [self.occlusion_input, self.occlusion_hidden] {
            if o.stride == 0 || o.kernel < o.stride {
                return Err(Error::Config(format!("occlusion needs kernel >= stride >= 1, got K={} s={}", o.kernel, o.stride)));
            }
        }
        if self.intgrad_steps == 0 || self.rise_masks == 0 || self.rise_grid == 0 {
            return Err(Error::Config("intgrad_steps, rise_masks and rise_grid must be positive".into()));
        }
        if !(self.rise_keep > 0.0 && self.rise_keep <= 1.0) {
            return Err(Error::Config(format!("rise_keep must be in (0,1], got {}", self.rise_keep)));
        }
        Ok(())
    }
}

pub const FLAG_ABLATION_ZERO_SCORE: &str = "ablation-zero-score";

/// A signed, channel-reduced map at the split layer's resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Attribution {
    pub method: Method,
    pub values: Tensor,
    pub flags: Vec<&'static str>,
}

/// Runs one method.
pub fn attribute(method: Method, target: &ExplainTarget<'_>, cfg: &AttributionConfig, seed: u64) -> Result<Attribution> {
    Ok(attribute_many(&[method], target, cfg, seed)?.pop().expect("one method"))
}

/// Runs several methods on one target, sharing the gradient where possible.
pub fn attribute_many(
    methods: &[Method],
    target: &ExplainTarget<'_>,
    cfg: &AttributionConfig,
    seed: u64,
) -> Result<Vec<Attribution>> {
    let a = &target.activation;
    let grad = if methods.iter().any(|m| m.uses_plain_gradient()) {
        Some(target.gradient(a, BackwardMode::Standard)?.1)
    } else {
        None
    };
    let mut out = Vec::with_capacity(methods.len());
    for &m in methods {
        let g = || grad.as_ref().expect("gradient computed");
        let mut flags = Vec::new();
        let values = match m {
            Method::Gradient => g().sum_channels()?,
            Method::IxG => a.mul(g())?.sum_channels()?,
            Method::IntGrad => integrated_gradients(target, cfg.intgrad_steps)?,
            Method::GuidedBp => target.gradient(a, BackwardMode::Guided)?.1.sum_channels()?,
            Method::GradCam => grad_cam(a, g())?,
            Method::GradCamPp => grad_cam_pp(a, g())?,
            Method::LayerCam => layer_cam(a, g())?,
            Method::AblationCam => {
                let (map, fallback) = ablation_cam(target)?;
                if fallback {
                    flags.push(FLAG_ABLATION_ZERO_SCORE);
                }
                map
            }
            Method::ScoreCam => score_cam(target)?,
            Method::Occlusion => occlusion(target, cfg.occlusion_for(target.split.point), cfg.occlusion_fill)?,
            Method::Rise => rise(target, cfg.rise_masks, cfg.rise_grid, cfg.rise_keep, seed)?,
        };
        if !values.is_finite() {
            return Err(Error::Numeric(format!("{m} produced non-finite attributions")));
        }
        out.push(Attribution { method: m, values, flags });
    }
    Ok(out)
}

/// Zero baseline, midpoint Riemann sum over `steps` points.
pub fn integrated_gradients(target: &ExplainTarget<'_>, steps: usize) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::InvalidArgument("IntGrad needs at least one step".into()));
    }
    let a = &target.activation;
    let mut total = Tensor::zeros(a.shape().to_vec());
    // Along the path the gradient jumps at many small ReLU kinks and behaves
    // like a smooth integrand, so midpoints leave O(1/m^2) where right
    // endpoints leave O(1/m).
    for t in 0..steps {
        let point = a.scale((t as f64 + 0.5) / steps as f64);
        total.add_assign(&target.gradient(&point, BackwardMode::Standard)?.1)?;
    }
    a.mul(&total.scale(1.0 / steps as f64))?.sum_channels()
}

fn relu_map(t: Tensor) -> Tensor {
    t.map(|v| v.max(0.0))
}

/// `Σ_k w_k A^k` for per-channel weights.
fn weighted_channels(a: &Tensor, weights: &[f64]) -> Result<Tensor> {
    let (c, h, w) = a.dims3()?;
    if weights.len() != c {
        return Err(shape_err(format!("{} channel weights for {c} channels", weights.len())));
    }
    let mut out = vec![0.0; h * w];
    for (plane, &wk) in a.data().chunks_exact(h * w).zip(weights) {
        if wk != 0.0 {
            for (o, v) in out.iter_mut().zip(plane) {
                *o += wk * v;
            }
        }
    }
    Tensor::new(vec![h, w], out)
}

pub fn grad_cam(a: &Tensor, grad: &Tensor) -> Result<Tensor> {
    a.expect_same_shape(grad)?;
    let (_, h, w) = a.dims3()?;
    let alpha: Vec<f64> = grad.data().chunks_exact(h * w).map(|p| p.iter().sum::<f64>() / (h * w) as f64).collect();
    Ok(relu_map(weighted_channels(a, &alpha)?))
}

/// Higher-order gradient terms reduce to powers of the first-order gradient
/// for a piecewise-linear network under the exponential score.
pub fn grad_cam_pp(a: &Tensor, grad: &Tensor) -> Result<Tensor> {
    a.expect_same_shape(grad)?;
    let (_, h, w) = a.dims3()?;
    let alpha: Vec<f64> = a
        .data()
        .chunks_exact(h * w)
        .zip(grad.data().chunks_exact(h * w))
        .map(|(ap, gp)| {
            let act_sum: f64 = ap.iter().sum();
            gp.iter()
                .map(|&g| {
                    let g2 = g * g;
                    let denom = 2.0 * g2 + act_sum * g2 * g;
                    let coeff = if denom != 0.0 { g2 / denom } else { 0.0 };
                    coeff * g.max(0.0)
                })
                .sum()
        })
        .collect();
    Ok(relu_map(weighted_channels(a, &alpha)?))
}

pub fn layer_cam(a: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let weighted = a.zip_map(grad, |v, g| v * g.max(0.0))?;
    Ok(relu_map(weighted.sum_channels()?))
}

/// Returns the map and whether the zero-score fallback was used.
pub fn ablation_cam(target: &ExplainTarget<'_>) -> Result<(Tensor, bool)> {
    let a = &target.activation;
    let (c, h, w) = a.dims3()?;
    let y = target.score(a)?;
    let fallback = y == 0.0;
    let mut alpha = Vec::with_capacity(c);
    for k in 0..c {
        let mut ablated = a.clone();
        ablated.data_mut()[k * h * w..(k + 1) * h * w].fill(0.0);
        let drop = y - target.score(&ablated)?;
        alpha.push(if fallback { drop } else { drop / y });
    }
    Ok((relu_map(weighted_channels(a, &alpha)?), fallback))
}

pub fn score_cam(target: &ExplainTarget<'_>) -> Result<Tensor> {
    let a = &target.activation;
    let (c, h, w) = a.dims3()?;
    let mut scores = Vec::with_capacity(c);
    for k in 0..c {
        let plane = &a.data()[k * h * w..(k + 1) * h * w];
        let (lo, hi) = plane.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
        let mask: Vec<f64> = if hi > lo { plane.iter().map(|&v| (v - lo) / (hi - lo)).collect() } else { vec![0.0; h * w] };
        let masked = mask_channels(a, &mask)?;
        scores.push(target.score(&masked)?);
    }
    Ok(relu_map(weighted_channels(a, &softmax(&scores))?))
}

/// Multiplies every channel of `a` by the same `[H,W]` mask.
fn mask_channels(a: &Tensor, mask: &[f64]) -> Result<Tensor> {
    let (c, h, w) = a.dims3()?;
    if mask.len() != h * w {
        return Err(shape_err("mask does not match the activation"));
    }
    let mut out = a.clone();
    for plane in out.data_mut().chunks_exact_mut(h * w).take(c) {
        for (v, m) in plane.iter_mut().zip(mask) {
            *v *= m;
        }
    }
    Ok(out)
}

/// Top-left corners of the occlusion windows along one axis.
pub fn window_starts(len: usize, kernel: usize, stride: usize) -> Vec<usize> {
    (0..=len - kernel).step_by(stride).collect()
}

/// Sliding-window occlusion. Each position receives the mean score drop over
/// the windows covering it; positions no window covers stay zero.
pub fn occlusion(target: &ExplainTarget<'_>, params: OcclusionParams, fill: f64) -> Result<Tensor> {
    let OcclusionParams { kernel, stride } = params;
    let (_, h, w) = target.activation.dims3()?;
    if stride == 0 || kernel < stride {
        return Err(Error::InvalidArgument(format!("occlusion needs K >= s >= 1, got K={kernel} s={stride}")));
    }
    if kernel > h || kernel > w {
        return Err(Error::InvalidArgument(format!("occlusion kernel {kernel} exceeds the {h}x{w} map")));
    }
    let cache = target.cache()?;
    let mut sum = vec![0.0; h * w];
    let mut count = vec![0u32; h * w];
    for &y0 in &window_starts(h, kernel, stride) {
        for &x0 in &window_starts(w, kernel, stride) {
            let window = CellBox { y0, x0, h: kernel, w: kernel };
            let drop = -target.occlusion_delta(&cache, &window, fill)?;
            for y in y0..y0 + kernel {
                for x in x0..x0 + kernel {
                    sum[y * w + x] += drop;
                    count[y * w + x] += 1;
                }
            }
        }
    }
    let data = sum.iter().zip(&count).map(|(&s, &n)| if n > 0 { s / n as f64 } else { 0.0 }).collect();
    Tensor::new(vec![h, w], data)
}

/// Generates one smooth random mask of size `h x w`: a `grid x grid` binary
/// lattice, bilinearly upsampled with one extra cell and randomly shifted.
pub fn rise_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, grid: usize, keep: f64) -> Result<Tensor> {
    let cell_h = h.div_ceil(grid);
    let cell_w = w.div_ceil(grid);
    let lattice: Vec<f64> = (0..(grid + 1) * (grid + 1)).map(|_| if rng.random::<f64>() < keep { 1.0 } else { 0.0 }).collect();
    let up = bilinear_upsample(&Tensor::new(vec![grid + 1, grid + 1], lattice)?, ((grid + 1) * cell_h, (grid + 1) * cell_w))?;
    let dy = rng.random_range(0..cell_h);
    let dx = rng.random_range(0..cell_w);
    let uw = (grid + 1) * cell_w;
    let data = (0..h).flat_map(|y| (0..w).map(move |x| (y + dy, x + dx))).map(|(y, x)| up.data()[y * uw + x]).collect();
    Tensor::new(vec![h, w], data)
}

pub fn rise(target: &ExplainTarget<'_>, masks: usize, grid: usize, keep: f64, seed: u64) -> Result<Tensor> {
    if masks == 0 {
        return Err(Error::InvalidArgument("RISE needs at least one mask".into()));
    }
    let a = &target.activation;
    let (_, h, w) = a.dims3()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0; h * w];
    for _ in 0..masks {
        let mask = rise_mask(&mut rng, h, w, grid, keep)?;
        let score = target.score(&mask_channels(a, mask.data())?)?;
        for (o, m) in acc.iter_mut().zip(mask.data()) {
            *o += score * m;
        }
    }
    let norm = 1.0 / (masks as f64 * keep);
    Tensor::new(vec![h, w], acc.into_iter().map(|v| v * norm).collect())
}

/// Gaussian smoothing of a signed map (`σ = K/4`).
pub fn smooth(map: &Tensor, kernel: usize) -> Result<Tensor> {
    gaussian_smooth(map, kernel)
}

/// Bilinear upsampling of a split-resolution map to the grid resolution.
/// Under DiFull the split activation is a tiling of independent per-cell
/// activations, so each cell's block is upsampled on its own and no value
/// crosses a cell seam.
pub fn to_image_space(map: &Tensor, size: usize, setting: Setting) -> Result<Tensor> {
    if setting != Setting::DiFull {
        return bilinear_upsample(map, (size, size));
    }
    let (h, w) = map.dims2()?;
    if h % GRID_N != 0 || w % GRID_N != 0 || size % GRID_N != 0 {
        return Err(shape_err(format!("{h}x{w} map cannot be split into {GRID_N}x{GRID_N} cells")));
    }
    let (bh, bw, cell) = (h / GRID_N, w / GRID_N, size / GRID_N);
    let planar = map.clone().reshape([1, h, w])?;
    let mut out = Tensor::zeros(vec![1, size, size]);
    for i in 0..NUM_CELLS {
        let (r, c) = (i / GRID_N, i % GRID_N);
        let block = planar.crop(r * bh, c * bw, bh, bw)?.reshape([bh, bw])?;
        let up = bilinear_upsample(&block, (cell, cell))?.reshape([1, cell, cell])?;
        out.paste(&up, r * cell, c * cell)?;
    }
    out.reshape([size, size])
}

/// A scored map kind: a method, optionally followed by Gaussian smoothing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MapKind {
    pub method: Method,
    pub smoothing: Option<usize>,
}

impl MapKind {
    pub fn plain(method: Method) -> Self {
        Self { method, smoothing: None }
    }
}

impl fmt::Display for MapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.smoothing {
            None => f.write_str(self.method.name()),
            Some(k) => write!(f, "S-{}:K={k}", self.method.name()),
        }
    }
}

impl FromStr for MapKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let Some(rest) = s.strip_prefix("S-") else {
            return Ok(Self::plain(s.parse()?));
        };
        let (name, k) = rest
            .split_once(":K=")
            .ok_or_else(|| Error::Config(format!("smoothed method {s:?} must look like S-IxG:K=9")))?;
        let method: Method = name.parse()?;
        let k: usize = k.parse().map_err(|_| Error::Config(format!("bad kernel size in {s:?}")))?;
        if !method.smoothable() {
            return Err(Error::Config(format!("{method} maps are not smoothed")));
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!("smoothing kernel must be odd, got {k}")));
        }
        Ok(Self { method, smoothing: Some(k) })
    }
}

const AMAP_MAGIC: &[u8; 4] = b"AMAP";
const AMAP_VERSION: u32 = 1;

/// Provenance of one archived map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapEntry {
    pub sample_id: u64,
    pub method: String,
    pub layer: SplitPoint,
    pub setting: crate::grid::Setting,
    pub target_cell: usize,
    pub target_class: usize,
    pub loc_score: Option<f64>,
    pub flags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSidecar {
    pub height: usize,
    pub width: usize,
    pub entries: Vec<MapEntry>,
    #[serde(default)]
    pub config: serde_json::Value,
}

/// A set of equally sized maps stored as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct MapArchive {
    pub sidecar: MapSidecar,
    pub maps: Vec<Tensor>,
}

impl MapArchive {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (h, w) = (self.sidecar.height, self.sidecar.width);
        if self.maps.len() != self.sidecar.entries.len() {
            return Err(Error::InvalidArgument("map count differs from entry count".into()));
        }
        let mut out = Writer::default();
        out.bytes(AMAP_MAGIC);
        out.u32(AMAP_VERSION);
        out.u32(self.maps.len() as u32);
        out.u32(h as u32);
        out.u32(w as u32);
        for m in &self.maps {
            if m.shape() != [h, w] {
                return Err(shape_err(format!("archive holds {h}x{w} maps, got {:?}", m.shape())));
            }
            m.data().iter().for_each(|&v| out.f32(v as f32));
        }
        Ok(out.buf)
    }

    pub fn from_bytes(bytes: &[u8], sidecar: MapSidecar) -> Result<Self> {
        let mut r = Reader::new(bytes, "attribution map archive");
        r.magic(AMAP_MAGIC)?;
        let version = r.u32()?;
        if version != AMAP_VERSION {
            return Err(Error::Version(format!("map archive version {version}, this build reads {AMAP_VERSION}")));
        }
        let n = r.u32()? as usize;
        let (h, w) = (r.u32()? as usize, r.u32()? as usize);
        if (n, h, w) != (sidecar.entries.len(), sidecar.height, sidecar.width) {
            return Err(Error::Format("map archive header disagrees with its sidecar".into()));
        }
        let maps = (0..n).map(|_| Ok(Tensor::from_parts(vec![h, w], r.f32s_widened(h * w)?))).collect::<Result<_>>()?;
        r.finish()?;
        Ok(Self { sidecar, maps })
    }

    /// Writes `<path>` and `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&self.sidecar)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact { path: path.to_path_buf(), producer: "eval" });
        }
        let sidecar: MapSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        Self::from_bytes(&std::fs::read(path)?, sidecar)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}
