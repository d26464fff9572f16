//! PNG output for signed attribution maps.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const GAP: u32 = 4;

/// Zero-centered diverging colors: negative blue, zero white, positive red.
/// `t` is clamped to `[-1, 1]`.
pub fn diverging(t: f64) -> Rgb<u8> {
    let t = t.clamp(-1.0, 1.0);
    let fade = |s: f64| (255.0 * (1.0 - s)).round() as u8;
    if t >= 0.0 {
        Rgb([255, fade(t), fade(t)])
    } else {
        Rgb([fade(-t), fade(-t), 255])
    }
}

/// Renders a `[H, W]` map scaled by its own largest magnitude.
pub fn render_map(map: &Tensor) -> Result<RgbImage> {
    let &[h, w] = map.shape() else {
        return Err(Error::Shape(format!("render expects a [H, W] map, got {:?}", map.shape())));
    };
    let m = map.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if m > 0.0 { 1.0 / m } else { 0.0 };
    let d = map.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| diverging(d[y as usize * w + x as usize] * scale)))
}

/// Places images left to right on a white strip.
pub fn montage(images: &[RgbImage]) -> RgbImage {
    let h = images.iter().map(|i| i.height()).max().unwrap_or(0);
    let w = images.iter().map(|i| i.width()).sum::<u32>() + GAP * images.len().saturating_sub(1) as u32;
    let mut out = RgbImage::from_pixel(w.max(1), h.max(1), Rgb([255, 255, 255]));
    let mut x0 = 0;
    for img in images {
        image::imageops::replace(&mut out, img, x0 as i64, 0);
        x0 += img.width() + GAP;
    }
    out
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_is_zero_centered() {
        assert_eq!(diverging(0.0), Rgb([255, 255, 255]));
        assert_eq!(diverging(1.0), Rgb([255, 0, 0]));
        assert_eq!(diverging(-1.0), Rgb([0, 0, 255]));
        assert_eq!(diverging(7.0), diverging(1.0));
    }

    #[test]
    fn map_scales_by_peak_magnitude() {
        let m = Tensor::new(vec![1, 3], vec![-2.0, 0.0, 1.0]).unwrap();
        let img = render_map(&m).unwrap();
        assert_eq!(*img.get_pixel(0, 0), Rgb([0, 0, 255]));
        assert_eq!(*img.get_pixel(2, 0), Rgb([255, 128, 128]));
        assert_eq!(*render_map(&Tensor::zeros(vec![2, 2])).unwrap().get_pixel(1, 1), Rgb([255, 255, 255]));
    }

    #[test]
    fn montage_lays_out_with_gaps() {
        let a = RgbImage::new(3, 2);
        let b = RgbImage::new(5, 4);
        let m = montage(&[a, b]);
        assert_eq!(m.dimensions(), (3 + GAP + 5, 4));
        assert_eq!(*m.get_pixel(3, 0), Rgb([255, 255, 255]));
        assert_eq!(*m.get_pixel(0, 3), Rgb([255, 255, 255]));
    }
}
