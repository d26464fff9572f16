//! Deterministic synthetic ten-class image dataset.
//!
//! Each image shows one figure whose shape and color determine the class,
//! placed at a random position, scale and rotation over a textured
//! background. Classes 0 and 1 share their color and differ in shape and size.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{mix64, Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 64;
pub const CHANNELS: usize = 3;
pub const NUM_CLASSES: usize = 10;
pub const GENERATOR_VERSION: &str = "shapes-1";

const MAGIC: &[u8; 4] = b"ADS1";
const FORMAT_VERSION: u32 = 1;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "red-disc",
    "red-square",
    "green-triangle",
    "blue-plus",
    "yellow-ring",
    "magenta-bar",
    "cyan-star",
    "orange-half-disc",
    "white-frame",
    "purple-diamond",
];

const CLASS_COLORS: [[f64; 3]; NUM_CLASSES] = [
    [0.86, 0.12, 0.12],
    [0.86, 0.12, 0.12],
    [0.10, 0.75, 0.20],
    [0.15, 0.30, 0.95],
    [0.95, 0.88, 0.10],
    [0.90, 0.15, 0.85],
    [0.10, 0.85, 0.90],
    [1.00, 0.55, 0.05],
    [0.97, 0.97, 0.97],
    [0.50, 0.15, 0.75],
];

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `[3, S, S]`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub label: usize,
    pub sample_id: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub image_size: usize,
    pub generator_version: String,
    /// Free-form provenance (resolved run configuration), JSON.
    pub meta: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<LabeledImage>,
    pub eval: Vec<LabeledImage>,
}

/// Maps stored `[0,1]` pixels to the model's input range `[-1,1]`.
pub fn to_model_input(pixels: &Tensor) -> Tensor {
    pixels.map(|v| 2.0 * v - 1.0)
}

/// Generates `n_train + n_eval` images. Sample ids run over both splits, train first;
/// labels cycle through the classes so each split is balanced.
pub fn generate(seed: u64, n_train: usize, n_eval: usize) -> Result<Dataset> {
    if n_train < NUM_CLASSES || n_eval < NUM_CLASSES {
        return Err(Error::InvalidArgument(format!(
            "need at least {NUM_CLASSES} samples per split, got train={n_train} eval={n_eval}"
        )));
    }
    let train = (0..n_train).map(|i| render_sample(seed, i as u64, i % NUM_CLASSES)).collect();
    let eval = (0..n_eval).map(|i| render_sample(seed, (n_train + i) as u64, i % NUM_CLASSES)).collect();
    Ok(Dataset {
        manifest: DatasetManifest {
            seed,
            n_train,
            n_eval,
            image_size: IMAGE_SIZE,
            generator_version: GENERATOR_VERSION.to_string(),
            meta: String::new(),
        },
        train,
        eval,
    })
}

/// Renders one image. A pure function of `(seed, sample_id, label)`.
pub fn render_sample(seed: u64, sample_id: u64, label: usize) -> LabeledImage {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(sample_id.wrapping_add(0x5EED))));
    let s = IMAGE_SIZE;

    // background: muted tint, two gratings, pixel noise
    let gray = rng.random_range(0.25..0.6);
    let tint: [f64; 3] = std::array::from_fn(|_| gray + rng.random_range(-0.08..0.08));
    let gratings: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            let ang = rng.random_range(0.0..PI);
            let freq = rng.random_range(0.08..0.35);
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.02..0.07);
            (ang, freq, phase, amp)
        })
        .collect();

    // figure placement
    let radius = rng.random_range(11.0..17.0);
    let margin = radius + 3.0;
    let cy = rng.random_range(margin..s as f64 - margin);
    let cx = rng.random_range(margin..s as f64 - margin);
    let theta = rng.random_range(0.0..2.0 * PI);
    let color: [f64; 3] = std::array::from_fn(|c| (CLASS_COLORS[label][c] + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0));
    let (sin_t, cos_t) = theta.sin_cos();

    let mut data = vec![0.0; CHANNELS * s * s];
    for y in 0..s {
        for x in 0..s {
            let mut bg = [0.0; 3];
            let tex: f64 = gratings
                .iter()
                .map(|&(ang, f, ph, amp)| amp * ((x as f64 * ang.cos() + y as f64 * ang.sin()) * f + ph).sin())
                .sum();
            for (c, b) in bg.iter_mut().enumerate() {
                *b = tint[c] + tex + rng.random_range(-0.04..0.04);
            }
            // 3x3 supersampled coverage
            let mut cover = 0.0;
            for sy in 0..3 {
                for sx in 0..3 {
                    let py = y as f64 + (sy as f64 + 0.5) / 3.0 - cy;
                    let px = x as f64 + (sx as f64 + 0.5) / 3.0 - cx;
                    let u = (cos_t * px + sin_t * py) / radius;
                    let v = (-sin_t * px + cos_t * py) / radius;
                    if inside(label, u, v) {
                        cover += 1.0 / 9.0;
                    }
                }
            }
            for c in 0..CHANNELS {
                let v = (1.0 - cover) * bg[c] + cover * color[c];
                data[(c * s + y) * s + x] = v.clamp(0.0, 1.0) as f32 as f64;
            }
        }
    }
    LabeledImage { pixels: Tensor::from_parts(vec![CHANNELS, s, s], data), label, sample_id }
}

/// Point-in-shape test in the figure's rotated unit frame.
fn inside(label: usize, u: f64, v: f64) -> bool {
    let d2 = u * u + v * v;
    match label {
        0 => d2 <= 1.0,
        1 => u.abs() <= 0.5 && v.abs() <= 0.5,
        2 => {
            // equilateral triangle inscribed in the unit circle
            (0..3).all(|k| {
                let a = PI / 2.0 + 2.0 * PI * k as f64 / 3.0 + PI / 3.0;
                u * a.cos() + v * a.sin() <= 0.5
            })
        }
        3 => (u.abs() <= 0.33 && v.abs() <= 1.0) || (v.abs() <= 0.33 && u.abs() <= 1.0),
        4 => (0.3025..=1.0).contains(&d2),
        5 => u.abs() <= 1.0 && v.abs() <= 0.4,
        6 => {
            let phi = v.atan2(u);
            let lobe = ((1.0 + (5.0 * phi).cos()) / 2.0).powf(1.5);
            d2.sqrt() <= 0.42 + 0.58 * lobe
        }
        7 => d2 <= 1.0 && v >= -0.15,
        8 => {
            let m = u.abs().max(v.abs());
            (0.55..=0.9).contains(&m)
        }
        9 => u.abs() + v.abs() <= 1.05,
        _ => false,
    }
}

impl Dataset {
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.manifest;
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(FORMAT_VERSION);
        w.u64(m.seed);
        w.u32(m.n_train as u32);
        w.u32(m.n_eval as u32);
        w.u32(m.image_size as u32);
        w.u32(CHANNELS as u32);
        w.str(&m.generator_version);
        w.str(&m.meta);
        for img in self.train.iter().chain(&self.eval) {
            w.u16(img.label as u16);
            for &v in img.pixels.data() {
                w.f32(v as f32);
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "dataset file");
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version(format!("dataset format version {version}, this build reads {FORMAT_VERSION}")));
        }
        let seed = r.u64()?;
        let n_train = r.u32()? as usize;
        let n_eval = r.u32()? as usize;
        let image_size = r.u32()? as usize;
        let channels = r.u32()? as usize;
        if channels != CHANNELS {
            return Err(Error::Format(format!("dataset has {channels} channels, expected {CHANNELS}")));
        }
        let generator_version = r.str()?;
        if generator_version != GENERATOR_VERSION {
            return Err(Error::Version(format!(
                "dataset generator {generator_version:?}, this build produces {GENERATOR_VERSION:?}"
            )));
        }
        let meta = r.str()?;
        let n_pix = channels * image_size * image_size;
        let mut read_split = |count: usize, first_id: usize| -> Result<Vec<LabeledImage>> {
            (0..count)
                .map(|i| {
                    let label = r.u16()? as usize;
                    if label >= NUM_CLASSES {
                        return Err(Error::Format(format!("label {label} out of range")));
                    }
                    let pixels = Tensor::from_parts(vec![channels, image_size, image_size], r.f32s_widened(n_pix)?);
                    Ok(LabeledImage { pixels, label, sample_id: (first_id + i) as u64 })
                })
                .collect()
        };
        let train = read_split(n_train, 0)?;
        let eval = read_split(n_eval, n_train)?;
        r.finish()?;
        Ok(Self {
            manifest: DatasetManifest { seed, n_train, n_eval, image_size, generator_version, meta },
            train,
            eval,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact { path: path.to_path_buf(), producer: "gen-data" });
        }
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Eval-split image by global sample id.
    pub fn eval_by_id(&self, sample_id: u64) -> Option<&LabeledImage> {
        let idx = sample_id.checked_sub(self.manifest.n_train as u64)? as usize;
        self.eval.get(idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let a = generate(7, 20, 10).unwrap().to_bytes();
        let b = generate(7, 20, 10).unwrap().to_bytes();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate(7, 10, 10).unwrap();
        let b = generate(8, 10, 10).unwrap();
        assert_ne!(a.train[0].pixels, b.train[0].pixels);
    }

    #[test]
    fn balanced_labels() {
        let d = generate(3, 1000, 10).unwrap();
        let mut hist = [0usize; NUM_CLASSES];
        for img in &d.train {
            hist[img.label] += 1;
        }
        assert_eq!(hist, [100; NUM_CLASSES]);
    }

    #[test]
    fn pixels_in_unit_range() {
        let d = generate(11, 10, 10).unwrap();
        for img in d.train.iter().chain(&d.eval) {
            assert_eq!(img.pixels.shape(), &[3, IMAGE_SIZE, IMAGE_SIZE]);
            assert!(img.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let d = generate(5, 10, 10).unwrap();
        let back = Dataset::from_bytes(&d.to_bytes()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn corrupt_and_empty_files_are_rejected() {
        let mut bytes = generate(5, 10, 10).unwrap().to_bytes();
        assert!(matches!(Dataset::from_bytes(&[]), Err(Error::Truncated(_))));
        let cut = bytes[..bytes.len() - 3].to_vec();
        assert!(matches!(Dataset::from_bytes(&cut), Err(Error::Truncated(_))));
        bytes[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_other_format_version() {
        let mut bytes = generate(5, 10, 10).unwrap().to_bytes();
        bytes[4] = 9;
        assert!(matches!(Dataset::from_bytes(&bytes), Err(Error::Version(_))));
    }
}
