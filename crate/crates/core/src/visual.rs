//! Heatmap colouring and overlays for anomalous attention maps.
//!
//! The colormap is a piecewise-linear sequential red ramp (near-white at 0,
//! saturated red at 0.6, dark red at 1) whose lightness falls monotonically,
//! so the strongest attention reads as the deepest red.

use image::{DynamicImage, Rgb, RgbImage};

use crate::attention::AttentionMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const STOPS: [(f64, [f64; 3]); 4] = [
    (0.0, [255.0, 245.0, 240.0]),
    (0.3, [252.0, 146.0, 114.0]),
    (0.6, [222.0, 45.0, 38.0]),
    (1.0, [103.0, 0.0, 13.0]),
];

/// Blend weight of the heatmap at attention 1.
pub const OVERLAY_ALPHA: f64 = 0.65;

/// Colour for an attention value, clamped into `[0,1]`.
pub fn colormap(v: f64) -> [u8; 3] {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    let i = STOPS.windows(2).position(|w| v <= w[1].0).unwrap_or(STOPS.len() - 2);
    let ((t0, c0), (t1, c1)) = (STOPS[i], STOPS[i + 1]);
    let f = (v - t0) / (t1 - t0);
    let mut out = [0u8; 3];
    for k in 0..3 {
        out[k] = (c0[k] + f * (c1[k] - c0[k])).round() as u8;
    }
    out
}

pub fn heatmap(map: &AttentionMap) -> DynamicImage {
    let (h, w) = (map.height(), map.width());
    let d = map.data();
    DynamicImage::ImageRgb8(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        Rgb(colormap(d[y as usize * w + x as usize]))
    }))
}

/// Input blended with the coloured map; the blend weight grows with the
/// attention value so unattended pixels keep the input colour.
pub fn overlay(image: &Tensor, map: &AttentionMap) -> Result<DynamicImage> {
    let s = image.shape();
    if s.len() != 3 || s[1] != map.height() || s[2] != map.width() || (s[0] != 1 && s[0] != 3) {
        return Err(Error::shape(format!(
            "overlay of image {s:?} with a {}x{} map",
            map.height(),
            map.width()
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let px = image.data();
    let d = map.data();
    Ok(DynamicImage::ImageRgb8(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let a = OVERLAY_ALPHA * d[i].clamp(0.0, 1.0);
        let col = colormap(d[i]);
        let mut out = [0u8; 3];
        for k in 0..3 {
            let base = px[(if c == 1 { 0 } else { k }) * h * w + i].clamp(0.0, 1.0) * 255.0;
            out[k] = ((1.0 - a) * base + a * col[k] as f64).round() as u8;
        }
        Rgb(out)
    })))
}
