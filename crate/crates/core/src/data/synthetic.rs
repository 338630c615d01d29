//! Procedural defect datasets with exact ground-truth masks.
//!
//! Every anomalous image is rendered as a normal texture first; the defect is
//! then painted over it, so pixels outside the mask are identical to the
//! paired normal rendering and pixels inside it always differ.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Mask;
use crate::data::{DatasetSplit, Sample};
use crate::error::{Error, Result};
use crate::model::Label;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureKind {
    Stripes,
    Blobs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefectKind {
    /// Rectangle of a contrasting tone.
    Patch,
    /// Thick curved stroke.
    Scratch,
}

impl DefectKind {
    pub fn name(self) -> &'static str {
        match self {
            DefectKind::Patch => "patch",
            DefectKind::Scratch => "scratch",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    /// Normal training images.
    pub n_normal: usize,
    /// Anomalous test images (each with a mask).
    pub n_anomalous: usize,
    /// Normal test images.
    pub n_test_normal: usize,
    pub image_size: usize,
    pub channels: usize,
    pub texture: TextureKind,
    pub defect: DefectKind,
    /// Target defect area as a fraction of the image, in `(0, 0.25]`.
    pub defect_area_frac: f64,
    /// Half-width of the uniform pixel noise, in `[0, 0.1]`.
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_normal: 100,
            n_anomalous: 20,
            n_test_normal: 20,
            image_size: 64,
            channels: 3,
            texture: TextureKind::Stripes,
            defect: DefectKind::Patch,
            defect_area_frac: 0.05,
            noise: 0.02,
        }
    }
}

// Texture tones stay in [0.3, 0.7]; defects sit at the extremes.
const TONE_LO: f64 = 0.3;
const TONE_HI: f64 = 0.7;
const DARK: f64 = 0.05;
const BRIGHT: f64 = 0.95;

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.defect_area_frac > 0.0 && self.defect_area_frac <= 0.25) {
            return Err(Error::arg(format!(
                "defect_area_frac {} outside (0, 0.25]",
                self.defect_area_frac
            )));
        }
        if self.image_size < 8 {
            return Err(Error::arg(format!("image_size {} < 8", self.image_size)));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::arg(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if !(0.0..=0.1).contains(&self.noise) {
            return Err(Error::arg(format!("noise {} outside [0, 0.1]", self.noise)));
        }
        if self.target_area() < 1.0 {
            return Err(Error::arg(format!(
                "defect_area_frac {} is below one pixel at {}x{}",
                self.defect_area_frac, self.image_size, self.image_size
            )));
        }
        Ok(())
    }

    fn target_area(&self) -> f64 {
        self.defect_area_frac * (self.image_size * self.image_size) as f64
    }
}

/// Per-dataset texture parameters shared by every image so that the normal
/// class is a single visual mode.
#[derive(Clone, Copy, Debug)]
struct Style {
    angle: f64,
    period: f64,
}

fn style_for(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Style {
    Style {
        angle: rng.random_range(0.0..PI),
        period: cfg.image_size as f64 / 6.0,
    }
}

fn render_texture(cfg: &SyntheticConfig, style: Style, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = cfg.image_size;
    let mid = 0.5 * (TONE_LO + TONE_HI);
    let amp = 0.5 * (TONE_HI - TONE_LO);
    let mut plane = vec![0.0; n * n];
    match cfg.texture {
        TextureKind::Stripes => {
            let phase = rng.random_range(0.0..2.0 * PI);
            let (c, s) = (style.angle.cos(), style.angle.sin());
            for y in 0..n {
                for x in 0..n {
                    let t = (x as f64 * c + y as f64 * s) * 2.0 * PI / style.period + phase;
                    plane[y * n + x] = mid + amp * t.sin();
                }
            }
        }
        TextureKind::Blobs => {
            let sigma = style.period * 0.6;
            let bumps: Vec<(f64, f64)> = (0..6)
                .map(|_| (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64)))
                .collect();
            for y in 0..n {
                for x in 0..n {
                    let v: f64 = bumps
                        .iter()
                        .map(|&(bx, by)| {
                            let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                            (-d2 / (2.0 * sigma * sigma)).exp()
                        })
                        .sum();
                    // v / (1 + v) maps [0, inf) into [0, 1).
                    plane[y * n + x] = TONE_LO + (TONE_HI - TONE_LO) * v / (1.0 + v);
                }
            }
        }
    }
    if cfg.noise > 0.0 {
        for p in &mut plane {
            *p += rng.random_range(-cfg.noise..=cfg.noise);
        }
    }
    plane
}

fn to_tensor(cfg: &SyntheticConfig, plane: &[f64]) -> Tensor {
    let n = cfg.image_size;
    let data: Vec<f64> = (0..cfg.channels).flat_map(|_| plane.iter().copied()).collect();
    Tensor::from_vec(&[cfg.channels, n, n], data).expect("sized buffer")
}

fn patch_mask(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let n = cfg.image_size;
    let area = cfg.target_area();
    let aspect = rng.random_range(0.7..1.4);
    let w = ((area * aspect).sqrt().round() as usize).clamp(1, n);
    let h = ((area / w as f64).round() as usize).clamp(1, n);
    let x0 = rng.random_range(0..=n - w);
    let y0 = rng.random_range(0..=n - h);
    let mut bits = vec![false; n * n];
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            bits[y * n + x] = true;
        }
    }
    bits
}

/// Stamps disks along a quadratic curve until the painted area reaches the
/// target; thickens the stroke if the curve runs out first.
fn scratch_mask(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let n = cfg.image_size;
    let nf = n as f64;
    let target = cfg.target_area();
    let margin = 0.15 * nf;
    let pick = |rng: &mut ChaCha8Rng| (rng.random_range(margin..nf - margin), rng.random_range(margin..nf - margin));
    let p0 = pick(rng);
    let mut p2 = pick(rng);
    // Keep the stroke long enough to carry the area at a modest width.
    if ((p2.0 - p0.0).powi(2) + (p2.1 - p0.1).powi(2)).sqrt() < 0.4 * nf {
        p2 = (nf - p0.0, nf - p0.1);
    }
    let p1 = (rng.random_range(0.0..nf), rng.random_range(0.0..nf));
    let mut best = Vec::new();
    for radius in 1..=n / 2 {
        let r = radius as f64 * 0.75;
        let mut bits = vec![false; n * n];
        let mut count = 0usize;
        let steps = 8 * n;
        'walk: for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let u = 1.0 - t;
            let cx = u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0;
            let cy = u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1;
            let (lo_x, hi_x) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(n - 1));
            let (lo_y, hi_y) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(n - 1));
            for y in lo_y..=hi_y {
                for x in lo_x..=hi_x {
                    let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                    if d2 <= r * r && !bits[y * n + x] {
                        bits[y * n + x] = true;
                        count += 1;
                        if count as f64 >= target {
                            break 'walk;
                        }
                    }
                }
            }
        }
        best = bits;
        if count as f64 >= target {
            break;
        }
    }
    best
}

/// Renders one normal/anomalous pair from a per-sample seed: the normal
/// texture, the same texture with the defect painted in, and the defect mask.
pub fn render_pair(cfg: &SyntheticConfig, dataset_seed: u64, sample_seed: u64) -> Result<(Tensor, Tensor, Mask)> {
    cfg.validate()?;
    let style = style_for(cfg, &mut ChaCha8Rng::seed_from_u64(dataset_seed));
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    Ok(render_pair_with(cfg, style, &mut rng))
}

fn render_pair_with(cfg: &SyntheticConfig, style: Style, rng: &mut ChaCha8Rng) -> (Tensor, Tensor, Mask) {
    let n = cfg.image_size;
    let normal = render_texture(cfg, style, rng);
    let bits = match cfg.defect {
        DefectKind::Patch => patch_mask(cfg, rng),
        DefectKind::Scratch => scratch_mask(cfg, rng),
    };
    let tone = if rng.random_bool(0.5) { DARK } else { BRIGHT };
    let mut anomalous = normal.clone();
    for (i, &on) in bits.iter().enumerate() {
        if on {
            let jitter = if cfg.noise > 0.0 { rng.random_range(-0.25 * cfg.noise..=0.25 * cfg.noise) } else { 0.0 };
            anomalous[i] = (tone + jitter).clamp(0.0, 1.0);
        }
    }
    let mask = Mask::new(n, n, bits).expect("sized mask");
    (to_tensor(cfg, &normal), to_tensor(cfg, &anomalous), mask)
}

fn normal_sample(cfg: &SyntheticConfig, style: Style, seed: u64, id: String) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Sample {
        image: to_tensor(cfg, &render_texture(cfg, style, &mut rng)),
        label: Label::Normal,
        mask: None,
        id,
    }
}

/// Builds a seeded split: `n_normal` training normals, and a test set of
/// `n_test_normal` normals followed by `n_anomalous` masked anomalies.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<DatasetSplit> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let style = style_for(cfg, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut split = DatasetSplit::default();
    for i in 0..cfg.n_normal {
        let s = master.random::<u64>();
        split.train_normal.push(normal_sample(cfg, style, s, format!("train/good/{i:03}")));
    }
    for i in 0..cfg.n_test_normal {
        let s = master.random::<u64>();
        split.test.push(normal_sample(cfg, style, s, format!("test/good/{i:03}")));
    }
    for i in 0..cfg.n_anomalous {
        let s = master.random::<u64>();
        let (_, image, mask) = render_pair_with(cfg, style, &mut ChaCha8Rng::seed_from_u64(s));
        split.test.push(Sample {
            image,
            label: Label::Anomalous,
            mask: Some(mask),
            id: format!("test/{}/{i:03}", cfg.defect.name()),
        });
    }
    Ok(split)
}

/// Per-sample seeds in generation order, so that tests can re-render the
/// normal counterpart of the `i`-th anomaly.
pub fn anomaly_seeds(cfg: &SyntheticConfig, seed: u64) -> Vec<u64> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let skip = cfg.n_normal + cfg.n_test_normal;
    (0..skip + cfg.n_anomalous)
        .map(|_| master.random::<u64>())
        .skip(skip)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(defect: DefectKind, texture: TextureKind) -> SyntheticConfig {
        SyntheticConfig {
            n_normal: 6,
            n_anomalous: 8,
            n_test_normal: 3,
            image_size: 32,
            texture,
            defect,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_and_shaped() {
        let cfg = small(DefectKind::Patch, TextureKind::Stripes);
        let a = generate_synthetic(&cfg, 3).unwrap();
        let b = generate_synthetic(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sizes(), (6, 0, 11));
        assert_ne!(a, generate_synthetic(&cfg, 4).unwrap());
        a.validate().unwrap();
        assert!(a.train_normal.iter().all(|s| s.mask.is_none()));
        assert!(a.test_anomalous().all(|s| s.mask.is_some()));
        for s in a.train_normal.iter().chain(&a.test) {
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn mask_area_and_exactness() {
        for defect in [DefectKind::Patch, DefectKind::Scratch] {
            for texture in [TextureKind::Stripes, TextureKind::Blobs] {
                for frac in [0.01, 0.05, 0.25] {
                    let cfg = SyntheticConfig { defect_area_frac: frac, ..small(defect, texture) };
                    let split = generate_synthetic(&cfg, 9).unwrap();
                    let seeds = anomaly_seeds(&cfg, 9);
                    for (s, &seed) in split.test_anomalous().zip(&seeds) {
                        let m = s.mask.as_ref().unwrap();
                        let f = m.fraction();
                        assert!(f >= 0.5 * frac && f <= 1.5 * frac, "{defect:?} {frac}: {f}");
                        let (normal, anom, mask) = render_pair(&cfg, 9, seed).unwrap();
                        assert_eq!(&anom, &s.image);
                        assert_eq!(&mask, m);
                        let plane = 32 * 32;
                        for c in 0..cfg.channels {
                            for i in 0..plane {
                                let (a, b) = (anom.data()[c * plane + i], normal.data()[c * plane + i]);
                                if m.bits[i] {
                                    assert!((a - b).abs() > 0.1);
                                } else {
                                    assert_eq!(a.to_bits(), b.to_bits());
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        for frac in [0.0, -0.1, 0.3, f64::NAN] {
            let cfg = SyntheticConfig { defect_area_frac: frac, ..Default::default() };
            assert!(matches!(generate_synthetic(&cfg, 0), Err(Error::Argument(_))));
        }
        let cfg = SyntheticConfig { image_size: 8, defect_area_frac: 0.001, ..Default::default() };
        assert!(generate_synthetic(&cfg, 0).is_err());
        let cfg = SyntheticConfig { channels: 2, ..Default::default() };
        assert!(generate_synthetic(&cfg, 0).is_err());
    }
}
