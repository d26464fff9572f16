//! 2x2 evaluation grids and the three ways of reading a per-cell score off
//! the model: global pooling (GridPG), disconnected per-cell passes (DiFull)
//! and receptive-field-center pooling on a single pass (DiPart).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BackwardMode, Tape};
use crate::binio::derive_seed;
use crate::dataset::{to_model_input, LabeledImage, CHANNELS, NUM_CLASSES};
use crate::error::{shape_err, Error, Result};
use crate::model::{spatial_mean, ExplainCache, ModelGraph, Patch, Split, SplitPoint};
use crate::tensor::Tensor;

/// Cells per grid side.
pub const GRID_N: usize = 2;
pub const NUM_CELLS: usize = GRID_N * GRID_N;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setting {
    #[serde(rename = "gridpg")]
    GridPg,
    #[serde(rename = "difull")]
    DiFull,
    #[serde(rename = "dipart")]
    DiPart,
}

impl Setting {
    pub const ALL: [Setting; 3] = [Setting::GridPg, Setting::DiFull, Setting::DiPart];

    pub fn name(self) -> &'static str {
        match self {
            Setting::GridPg => "gridpg",
            Setting::DiFull => "difull",
            Setting::DiPart => "dipart",
        }
    }

    /// DiFull and DiPart grids repeat the top-left class in the bottom-right cell.
    pub fn repeats_class(self) -> bool {
        self != Setting::GridPg
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Setting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gridpg" => Ok(Setting::GridPg),
            "difull" => Ok(Setting::DiFull),
            "dipart" => Ok(Setting::DiPart),
            _ => Err(Error::Config(format!("unknown setting {s:?} (expected gridpg, difull or dipart)"))),
        }
    }
}

/// Axis-aligned rectangle in some map's coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellBox {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl CellBox {
    /// Row-major cell `i` of an `n x n` partition of a square map of side `size`.
    pub fn of_cell(i: usize, n: usize, size: usize) -> Self {
        let c = size / n;
        Self { y0: (i / n) * c, x0: (i % n) * c, h: c, w: c }
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y0 + self.h && x >= self.x0 && x < self.x0 + self.w
    }

    /// Intersection, or `None` when the rectangles do not overlap.
    pub fn intersect(&self, other: &CellBox) -> Option<CellBox> {
        let y0 = self.y0.max(other.y0);
        let x0 = self.x0.max(other.x0);
        let y1 = (self.y0 + self.h).min(other.y0 + other.h);
        let x1 = (self.x0 + self.w).min(other.x0 + other.w);
        (y0 < y1 && x0 < x1).then(|| CellBox { y0, x0, h: y1 - y0, w: x1 - x0 })
    }
}

/// One JSON line of a grid manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridRecord {
    pub sample_id: u64,
    pub setting: Setting,
    pub cell_labels: [usize; NUM_CELLS],
    pub source_ids: [u64; NUM_CELLS],
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSample {
    pub sample_id: u64,
    pub setting: Setting,
    pub cell_labels: [usize; NUM_CELLS],
    pub source_ids: [u64; NUM_CELLS],
    pub seed: u64,
    /// `[3, 2S, 2S]` in stored pixel range `[0,1]`.
    pub pixels: Tensor,
}

impl GridSample {
    pub fn size(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn cell_boxes(&self) -> [CellBox; NUM_CELLS] {
        std::array::from_fn(|i| CellBox::of_cell(i, GRID_N, self.size()))
    }

    pub fn model_input(&self) -> Tensor {
        to_model_input(&self.pixels)
    }

    pub fn record(&self) -> GridRecord {
        GridRecord {
            sample_id: self.sample_id,
            setting: self.setting,
            cell_labels: self.cell_labels,
            source_ids: self.source_ids,
            seed: self.seed,
        }
    }

    /// Rebuilds a grid from its manifest line and the images it names.
    pub fn from_record(rec: &GridRecord, images: &BTreeMap<u64, LabeledImage>) -> Result<Self> {
        let parts: Vec<&LabeledImage> = rec
            .source_ids
            .iter()
            .map(|id| {
                images.get(id).ok_or_else(|| Error::Format(format!("grid {} names unknown image {id}", rec.sample_id)))
            })
            .collect::<Result<_>>()?;
        for (i, p) in parts.iter().enumerate() {
            if p.label != rec.cell_labels[i] {
                return Err(Error::Format(format!(
                    "grid {} cell {i}: image {} has label {}, manifest says {}",
                    rec.sample_id, p.sample_id, p.label, rec.cell_labels[i]
                )));
            }
        }
        Ok(Self {
            sample_id: rec.sample_id,
            setting: rec.setting,
            cell_labels: rec.cell_labels,
            source_ids: rec.source_ids,
            seed: rec.seed,
            pixels: compose(&parts)?,
        })
    }
}

/// Tiles `n*n` equally sized `[3,S,S]` images row-major into one grid.
pub fn compose(images: &[&LabeledImage]) -> Result<Tensor> {
    let n = (images.len() as f64).sqrt() as usize;
    if n * n != images.len() || n == 0 {
        return Err(shape_err(format!("cannot tile {} images into a square grid", images.len())));
    }
    let (c, s, _) = images[0].pixels.dims3()?;
    let mut out = Tensor::zeros(vec![c, n * s, n * s]);
    for (i, img) in images.iter().enumerate() {
        let b = CellBox::of_cell(i, n, n * s);
        out.paste(&img.pixels, b.y0, b.x0)?;
    }
    Ok(out)
}

/// Samples `count` grids from the confident pool. DiFull and DiPart share
/// the same compositions for a given seed.
pub fn build_grids(pool: &[LabeledImage], setting: Setting, count: usize, seed: u64) -> Result<Vec<GridSample>> {
    let mut by_class: Vec<Vec<&LabeledImage>> = vec![Vec::new(); NUM_CLASSES];
    for img in pool {
        if img.label >= NUM_CLASSES {
            return Err(Error::InvalidArgument(format!("image {} has label {}", img.sample_id, img.label)));
        }
        by_class[img.label].push(img);
    }
    for imgs in &mut by_class {
        imgs.sort_by_key(|i| i.sample_id);
    }
    let populated: Vec<usize> = (0..NUM_CLASSES).filter(|&c| !by_class[c].is_empty()).collect();
    let empty: Vec<usize> = (0..NUM_CLASSES).filter(|&c| by_class[c].is_empty()).collect();
    let needed = if setting.repeats_class() { NUM_CELLS - 1 } else { NUM_CELLS };
    if populated.len() < needed {
        return Err(Error::Starved(format!(
            "{setting} grids need {needed} classes with confident images; classes {empty:?} have none"
        )));
    }
    let repeatable: Vec<usize> = (0..NUM_CLASSES).filter(|&c| by_class[c].len() >= 2).collect();
    if setting.repeats_class() && repeatable.is_empty() {
        return Err(Error::Starved(format!(
            "{setting} grids need a class with at least 2 confident images; every class has at most one"
        )));
    }

    let stream = if setting.repeats_class() { "grid-repeated" } else { "grid-distinct" };
    (0..count as u64)
        .map(|g| {
            let grid_seed = derive_seed(seed, stream, g);
            let mut rng = ChaCha8Rng::seed_from_u64(grid_seed);
            let parts: Vec<&LabeledImage> = if setting.repeats_class() {
                let a = *repeatable.choose(&mut rng).expect("nonempty");
                let others: Vec<usize> = populated.iter().copied().filter(|&c| c != a).collect();
                let bc: Vec<usize> = others.choose_multiple(&mut rng, 2).copied().collect();
                let pair: Vec<&LabeledImage> = by_class[a].choose_multiple(&mut rng, 2).copied().collect();
                let b = *by_class[bc[0]].choose(&mut rng).expect("nonempty");
                let c = *by_class[bc[1]].choose(&mut rng).expect("nonempty");
                vec![pair[0], b, c, pair[1]]
            } else {
                let classes: Vec<usize> = populated.choose_multiple(&mut rng, NUM_CELLS).copied().collect();
                classes.iter().map(|&c| *by_class[c].choose(&mut rng).expect("nonempty")).collect()
            };
            Ok(GridSample {
                sample_id: g,
                setting,
                cell_labels: std::array::from_fn(|i| parts[i].label),
                source_ids: std::array::from_fn(|i| parts[i].sample_id),
                seed: grid_seed,
                pixels: compose(&parts)?,
            })
        })
        .collect()
}

pub fn write_manifest(grids: &[GridSample]) -> Result<String> {
    let mut out = String::new();
    for g in grids {
        out.push_str(&serde_json::to_string(&g.record())?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_manifest(text: &str) -> Result<Vec<GridRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("grid manifest line {}: {e}", i + 1))))
        .collect()
}

/// Per-cell class scores and the head positions pooled into each cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellLogits {
    /// `[cells, 10]`.
    pub logits: Tensor,
    /// Flat head-map positions contributing to each cell.
    pub positions: Vec<Vec<usize>>,
    pub head_dims: (usize, usize),
}

impl CellLogits {
    pub fn cell(&self, i: usize) -> &[f64] {
        &self.logits.data()[i * NUM_CLASSES..(i + 1) * NUM_CLASSES]
    }
}

/// Global-average-pooled logits of the whole grid.
pub fn forward_gridpg(model: &ModelGraph, x: &Tensor) -> Result<Tensor> {
    Ok(spatial_mean(&model.class_maps(x)?))
}

/// Each cell is passed alone through the backbone and head; logits pool
/// only that cell's head positions. Head maps are re-tiled at grid layout.
pub fn forward_difull(model: &ModelGraph, x: &Tensor) -> Result<CellLogits> {
    let (_, size, _) = x.dims3()?;
    let mut logits = Vec::with_capacity(NUM_CELLS * NUM_CLASSES);
    let mut positions = Vec::with_capacity(NUM_CELLS);
    let stride = model.stride_at(SplitPoint::Final);
    let head = size / stride;
    for i in 0..NUM_CELLS {
        let b = CellBox::of_cell(i, GRID_N, size);
        let maps = model.class_maps(&x.crop(b.y0, b.x0, b.h, b.w)?)?;
        logits.extend_from_slice(spatial_mean(&maps).data());
        let hb = CellBox::of_cell(i, GRID_N, head);
        positions.push(box_positions(&hb, head));
    }
    Ok(CellLogits { logits: Tensor::new(vec![NUM_CELLS, NUM_CLASSES], logits)?, positions, head_dims: (head, head) })
}

/// One pass over the whole grid; each cell pools the head positions whose
/// receptive-field center lies above it.
pub fn forward_dipart(model: &ModelGraph, x: &Tensor) -> Result<CellLogits> {
    let maps = model.class_maps(x)?;
    let (_, h, w) = maps.dims3()?;
    let (_, size, _) = x.dims3()?;
    let positions = cell_positions(model, size, GRID_N)?;
    let mut logits = Vec::with_capacity(NUM_CELLS * NUM_CLASSES);
    for pos in &positions {
        for c in 0..NUM_CLASSES {
            let plane = &maps.data()[c * h * w..(c + 1) * h * w];
            logits.push(pos.iter().map(|&p| plane[p]).sum::<f64>() / pos.len() as f64);
        }
    }
    Ok(CellLogits { logits: Tensor::new(vec![positions.len(), NUM_CLASSES], logits)?, positions, head_dims: (h, w) })
}

fn box_positions(b: &CellBox, width: usize) -> Vec<usize> {
    (b.y0..b.y0 + b.h).flat_map(|y| (b.x0..b.x0 + b.w).map(move |x| y * width + x)).collect()
}

/// Assigns every head position of a square `input_size` input to the cell of
/// an `n x n` partition that contains its receptive-field center. Centers on
/// a seam go to the lesser cell index. Returned row-major over head positions.
pub fn rf_center_map(model: &ModelGraph, input_size: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || input_size % n != 0 {
        return Err(Error::InvalidArgument(format!("{input_size} px cannot be split into {n} cells per side")));
    }
    let (offset, stride) = model.head_geometry();
    let head = input_size / stride;
    let cell = (input_size / n) as f64;
    let axis = |i: usize| -> usize {
        let center = offset + (stride * i) as f64;
        let q = center / cell;
        let idx = if q.fract() == 0.0 && q > 0.0 { q as usize - 1 } else { q.floor().max(0.0) as usize };
        idx.min(n - 1)
    };
    Ok((0..head * head).map(|p| axis(p / head) * n + axis(p % head)).collect())
}

fn cell_positions(model: &ModelGraph, input_size: usize, n: usize) -> Result<Vec<Vec<usize>>> {
    let map = rf_center_map(model, input_size, n)?;
    let mut out = vec![Vec::new(); n * n];
    for (p, &c) in map.iter().enumerate() {
        out[c].push(p);
    }
    if let Some(i) = out.iter().position(|v| v.is_empty()) {
        return Err(shape_err(format!("no head position has its center over cell {i}")));
    }
    Ok(out)
}

/// The scalar an attribution method explains: the pooled class score of one
/// grid cell under a setting, seen as a function of the split activation.
pub struct ExplainTarget<'m> {
    pub split: Split<'m>,
    pub setting: Setting,
    pub cell: usize,
    pub class: usize,
    /// `f_pre` of the grid. Under DiFull the per-cell activations are tiled
    /// back into grid layout.
    pub activation: Tensor,
    /// Part of the activation that reaches `f_explain` (the target cell under
    /// DiFull, the whole map otherwise).
    pub region: CellBox,
    /// Pooled head positions within the region's head map; `None` means all.
    positions: Option<Vec<usize>>,
}

impl<'m> ExplainTarget<'m> {
    /// Explains the class shown in `cell` of `grid`.
    pub fn for_sample(model: &'m ModelGraph, grid: &GridSample, point: SplitPoint, cell: usize) -> Result<Self> {
        if cell >= NUM_CELLS {
            return Err(Error::InvalidArgument(format!("target cell {cell} out of range for a 2x2 grid")));
        }
        Self::new(model, grid.setting, point, &grid.model_input(), cell, grid.cell_labels[cell])
    }

    /// `x` is the normalized `[3, 2S, 2S]` grid.
    pub fn new(model: &'m ModelGraph, setting: Setting, point: SplitPoint, x: &Tensor, cell: usize, class: usize) -> Result<Self> {
        if cell >= NUM_CELLS {
            return Err(Error::InvalidArgument(format!("target cell {cell} out of range for a 2x2 grid")));
        }
        if class >= NUM_CLASSES {
            return Err(Error::InvalidArgument(format!("target class {class} out of range")));
        }
        let (c, size, w) = x.dims3()?;
        if c != CHANNELS || size != w || size % (GRID_N * model.stride_at(SplitPoint::Final)) != 0 {
            return Err(shape_err(format!("grid input must be [3, 2S, 2S] with S a multiple of 8, got {:?}", x.shape())));
        }
        let split = model.split(point);
        let activation = match setting {
            Setting::DiFull => {
                let mut tiles = Vec::with_capacity(NUM_CELLS);
                for i in 0..NUM_CELLS {
                    let b = CellBox::of_cell(i, GRID_N, size);
                    tiles.push(split.pre(&x.crop(b.y0, b.x0, b.h, b.w)?)?);
                }
                let (tc, th, tw) = tiles[0].dims3()?;
                let mut a = Tensor::zeros(vec![tc, th * GRID_N, tw * GRID_N]);
                for (i, t) in tiles.iter().enumerate() {
                    a.paste(t, (i / GRID_N) * th, (i % GRID_N) * tw)?;
                }
                a
            }
            _ => split.pre(x)?,
        };
        let a_size = activation.shape()[1];
        let (region, positions) = match setting {
            Setting::GridPg => (CellBox { y0: 0, x0: 0, h: a_size, w: a_size }, None),
            Setting::DiFull => (CellBox::of_cell(cell, GRID_N, a_size), None),
            Setting::DiPart => {
                let pos = cell_positions(model, size, GRID_N)?.swap_remove(cell);
                (CellBox { y0: 0, x0: 0, h: a_size, w: a_size }, Some(pos))
            }
        };
        Ok(Self { split, setting, cell, class, activation, region, positions })
    }

    /// Split-resolution box of grid cell `i`.
    pub fn cell_box(&self, i: usize) -> CellBox {
        CellBox::of_cell(i, GRID_N, self.activation.shape()[1])
    }

    fn region_of<'a>(&self, a: &'a Tensor) -> Result<std::borrow::Cow<'a, Tensor>> {
        let r = &self.region;
        if r.y0 == 0 && r.x0 == 0 && r.h == a.shape()[1] && r.w == a.shape()[2] {
            Ok(std::borrow::Cow::Borrowed(a))
        } else {
            Ok(std::borrow::Cow::Owned(a.crop(r.y0, r.x0, r.h, r.w)?))
        }
    }

    /// Pools the target class from the region's head maps.
    pub fn pool(&self, head_maps: &Tensor) -> Result<f64> {
        let (c, h, w) = head_maps.dims3()?;
        if self.class >= c {
            return Err(shape_err("head maps have too few classes"));
        }
        let plane = &head_maps.data()[self.class * h * w..(self.class + 1) * h * w];
        Ok(match &self.positions {
            None => plane.iter().sum::<f64>() / (h * w) as f64,
            Some(pos) => pos.iter().map(|&p| plane[p]).sum::<f64>() / pos.len() as f64,
        })
    }

    /// Target score for a full split activation `a` (same shape as `activation`).
    pub fn score(&self, a: &Tensor) -> Result<f64> {
        self.activation.expect_same_shape(a)?;
        self.pool(&self.split.explain(&*self.region_of(a)?)?)
    }

    /// Score and its gradient with respect to the full split activation.
    pub fn gradient(&self, a: &Tensor, mode: BackwardMode) -> Result<(f64, Tensor)> {
        self.activation.expect_same_shape(a)?;
        let mut tape = Tape::new();
        let leaf = tape.leaf(a.clone());
        let r = self.region;
        let input = if r.h == a.shape()[1] && r.w == a.shape()[2] { leaf } else { tape.crop(leaf, r.y0, r.x0, r.h, r.w)? };
        let maps = self.split.explain_on_tape(&mut tape, input)?;
        let y = tape.channel_mean(maps, self.class, self.positions.clone())?;
        let score = tape.value(y).item()?;
        let grads = tape.backward(y, &[leaf], mode)?;
        Ok((score, grads.into_ordered(&[leaf]).pop().expect("one gradient")))
    }

    /// Cached `f_explain` activations of the region, for incremental updates.
    pub fn cache(&self) -> Result<ExplainCache> {
        self.split.explain_cached(&*self.region_of(&self.activation)?)
    }

    /// Change of the target score when the rectangle `window` (full split
    /// coordinates) of the activation is overwritten by `fill`.
    pub fn occlusion_delta(&self, cache: &ExplainCache, window: &CellBox, fill: f64) -> Result<f64> {
        let Some(hit) = window.intersect(&self.region) else {
            return Ok(0.0);
        };
        let (c, _, _) = self.activation.dims3()?;
        let (ly, lx) = (hit.y0 - self.region.y0, hit.x0 - self.region.x0);
        let original = cache.input().crop(ly, lx, hit.h, hit.w)?;
        if original.data().iter().all(|&v| v == fill) {
            return Ok(0.0);
        }
        let patch = Patch { y0: ly, x0: lx, values: Tensor::full(vec![c, hit.h, hit.w], fill) };
        let out = self.split.explain_patch(cache, &patch)?;
        let base = cache.head_maps();
        let (_, h, w) = base.dims3()?;
        let (_, ph, pw) = out.values.dims3()?;
        let plane = self.class * h * w;
        let mut delta = 0.0;
        let count = match &self.positions {
            None => {
                for y in 0..ph {
                    for x in 0..pw {
                        delta += out.values.at3(self.class, y, x) - base.data()[plane + (out.y0 + y) * w + out.x0 + x];
                    }
                }
                h * w
            }
            Some(pos) => {
                for &p in pos {
                    let (y, x) = (p / w, p % w);
                    if y >= out.y0 && y < out.y0 + ph && x >= out.x0 && x < out.x0 + pw {
                        delta += out.values.at3(self.class, y - out.y0, x - out.x0) - base.data()[plane + p];
                    }
                }
                pos.len()
            }
        };
        Ok(delta / count as f64)
    }
}
