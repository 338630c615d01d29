//! Conversions between tensors and 8-bit images on disk.

use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::attention::Mask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::ingest(path, format!("unreadable image: {e}")))
}

/// Decodes to `(channels, size, size)` in `[0,1]`, bilinearly resized.
/// Grayscale sources are replicated across channels; colour sources are
/// reduced to luma when `channels == 1`.
pub fn image_to_tensor(img: &DynamicImage, size: usize, channels: usize) -> Tensor {
    let resized = if img.width() as usize == size && img.height() as usize == size {
        img.clone()
    } else {
        img.resize_exact(size as u32, size as u32, FilterType::Triangle)
    };
    let plane = size * size;
    let mut data = vec![0.0; channels * plane];
    if channels == 1 {
        let g = resized.to_luma8();
        for (i, p) in g.pixels().enumerate() {
            data[i] = p.0[0] as f64 / 255.0;
        }
    } else {
        let rgb = resized.to_rgb8();
        for (i, p) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = p.0[c] as f64 / 255.0;
            }
        }
    }
    Tensor::from_vec(&[channels, size, size], data).expect("sized buffer")
}

/// Decodes a ground-truth mask with nearest-neighbour resizing; any nonzero
/// pixel above mid-grey is foreground.
pub fn image_to_mask(img: &DynamicImage, size: usize) -> Mask {
    let g = img.to_luma8();
    let g = if g.width() as usize == size && g.height() as usize == size {
        g
    } else {
        image::imageops::resize(&g, size as u32, size as u32, FilterType::Nearest)
    };
    Mask {
        height: size,
        width: size,
        bits: g.pixels().map(|p| p.0[0] > 127).collect(),
    }
}

/// Encodes a `(C,H,W)` tensor as an 8-bit grayscale or RGB image.
pub fn tensor_to_image(t: &Tensor) -> Result<DynamicImage> {
    let s = t.shape();
    if s.len() != 3 || (s[0] != 1 && s[0] != 3) {
        return Err(Error::shape(format!("expected (1|3, H, W), got {s:?}")));
    }
    let (h, w) = (s[1] as u32, s[2] as u32);
    let plane = (h * w) as usize;
    let d = t.data();
    Ok(if s[0] == 1 {
        DynamicImage::ImageLuma8(GrayImage::from_fn(w, h, |x, y| Luma([to_u8(d[(y * w + x) as usize])])))
    } else {
        DynamicImage::ImageRgb8(RgbImage::from_fn(w, h, |x, y| {
            let i = (y * w + x) as usize;
            Rgb([to_u8(d[i]), to_u8(d[plane + i]), to_u8(d[2 * plane + i])])
        }))
    })
}

pub fn mask_to_image(mask: &Mask) -> GrayImage {
    ImageBuffer::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        Luma([if mask.bits[y as usize * mask.width + x as usize] { 255 } else { 0 }])
    })
}

/// Writes a PNG, creating parent directories.
pub fn save_png(img: &DynamicImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}
