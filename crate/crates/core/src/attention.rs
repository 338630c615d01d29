//! Grad-CAM attention over the latent feature maps.
//!
//! The attention for a target scalar `y` over feature maps `F_k` is
//! `normalize(upsample(ReLU(sum_k alpha_k F_k)))` with `alpha_k` the spatial
//! mean of `dy/dF_k`. Both targets used here (sum of the latent, or a class
//! logit of the linear head) are linear in `F`, so `dy/dF` is a function of
//! parameters alone and is built directly on the tape. Losses on the
//! attention map therefore differentiate through the Grad-CAM weights into
//! the head and encoder exactly as a double-backward pass would.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{self, Bound, Label, LatentState, Model, ModelConfig};
use crate::tensor::Tensor;

/// Threshold applied to anomalous attention maps for localization.
pub const LOCALIZATION_THRESHOLD: f64 = 0.5;

/// Scalar whose gradient weights the feature channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CamTarget {
    /// Sum of every latent activation (unsupervised attention).
    LatentSum,
    /// Classifier logit of one class (weakly-supervised attention).
    Class(Label),
}

/// Resolution at which attention maps are produced for the training losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionResolution {
    #[default]
    Input,
    Latent,
}

/// A single attention map with values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    values: Tensor,
}

impl AttentionMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::shape(format!("attention map must be 2-D, got {:?}", values.shape())));
        }
        if values.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::arg("attention values must lie in [0,1]"));
        }
        Ok(AttentionMap { values })
    }

    pub fn height(&self) -> usize {
        self.values.dim(0)
    }

    pub fn width(&self) -> usize {
        self.values.dim(1)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn data(&self) -> &[f64] {
        self.values.data()
    }

    /// Splits a `(B,H,W)` batch into per-image maps.
    pub fn unbatch(batch: &Tensor) -> Result<Vec<AttentionMap>> {
        if batch.shape().len() != 3 {
            return Err(Error::shape(format!("expected (B,H,W), got {:?}", batch.shape())));
        }
        (0..batch.dim(0)).map(|i| AttentionMap::new(batch.index_first(i))).collect()
    }
}

/// Binary localization mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(format!(
                "mask {height}x{width} needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Mask { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.bits.len().max(1) as f64
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// `dy/dF` for `target`, shaped like one image's feature maps `(K,s,s)`.
pub fn grad_map_graph(cfg: &ModelConfig, g: &mut Graph, p: &Bound, target: CamTarget) -> Result<Var> {
    let feat = cfg.feature_shape();
    let latent_len: usize = cfg.latent_shape().iter().product();
    // d target / d latent, as a (1, latent_len) row
    let dlatent = match target {
        CamTarget::LatentSum => g.constant(Tensor::ones(&[1, latent_len])),
        CamTarget::Class(label) => {
            if cfg.mode != model::Mode::Weak {
                return Err(Error::Mode("class attention needs the weak-mode classifier".into()));
            }
            let w = p.var("cls.w")?;
            g.row(w, label.index())?
        }
    };
    let grad = if cfg.conv_latent {
        dlatent
    } else {
        // latent mean = W_mu . flatten(hidden) + b
        let w_mu = p.var("enc.mu.w")?;
        g.matmul(dlatent, w_mu)?
    };
    if !g.value(grad).all_finite() {
        return Err(Error::Numeric("non-finite Grad-CAM gradient".into()));
    }
    g.reshape(grad, &feat)
}

/// Raw class-activation map `ReLU(sum_k alpha_k F_k)` at feature resolution,
/// `(B,s,s)`.
pub fn raw_cam_graph(g: &mut Graph, features: Var, grad_map: Var) -> Result<Var> {
    let alpha = g.spatial_mean(grad_map)?;
    let weighted = g.channel_weighted_sum(features, alpha)?;
    Ok(g.relu(weighted))
}

/// Bilinear resize to `size x size` then per-image min-max rescale.
pub fn upsample_normalize_graph(g: &mut Graph, raw: Var, size: usize) -> Result<Var> {
    let s = g.shape(raw).to_vec();
    let up = if s[s.len() - 2..] == [size, size] {
        raw
    } else {
        g.bilinear(raw, size, size)?
    };
    g.minmax_normalize(up)
}

/// Full Grad-CAM attention `(B,size,size)` on the tape.
pub fn gradcam_graph(g: &mut Graph, features: Var, grad_map: Var, size: usize) -> Result<Var> {
    let raw = raw_cam_graph(g, features, grad_map)?;
    upsample_normalize_graph(g, raw, size)
}

/// Grad-CAM with explicit gradients `(K,s,s)` over a feature batch
/// `(B,K,s,s)`.
pub fn gradcam(features: &Tensor, grads: &Tensor, size: usize) -> Result<Vec<AttentionMap>> {
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let gm = g.constant(grads.clone());
    let a = gradcam_graph(&mut g, f, gm, size)?;
    AttentionMap::unbatch(g.value(a))
}

/// Attention for the sum-of-latent target over a spatial latent `z`
/// `(B,K,s,s)`; every channel gets unit weight.
pub fn gradcam_from_latent(z: &Tensor, size: usize) -> Result<Vec<AttentionMap>> {
    if z.shape().len() != 4 {
        return Err(Error::shape(format!("expected spatial latent (B,K,s,s), got {:?}", z.shape())));
    }
    let grads = Tensor::ones(&z.shape()[1..]);
    gradcam(z, &grads, size)
}

/// Feature maps of `x` under `model` at the deterministic latent mean.
fn features_graph(model: &Model, g: &mut Graph, p: &Bound, x: &Tensor) -> Result<Var> {
    let xv = g.constant(x.clone());
    let enc = model::encode_graph(&model.config, g, p, xv)?;
    Ok(if model.config.conv_latent { enc.mu } else { enc.hidden })
}

/// Attention maps of `x` for `target`, evaluated on the latent mean.
pub fn attention_maps(model: &Model, x: &Tensor, target: CamTarget) -> Result<Vec<AttentionMap>> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, |_| false);
    let features = features_graph(model, &mut g, &p, x)?;
    let gm = grad_map_graph(&model.config, &mut g, &p, target)?;
    let a = gradcam_graph(&mut g, features, gm, model.config.image_size)?;
    AttentionMap::unbatch(g.value(a))
}

/// Class-conditional attention from an already computed latent state.
pub fn gradcam_for_class(model: &Model, state: &LatentState, class: Label) -> Result<Vec<AttentionMap>> {
    if !model.config.conv_latent {
        return Err(Error::arg(
            "class attention from a latent state needs a spatial latent; use attention_maps for the flat variant",
        ));
    }
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, |_| false);
    let z = g.constant(state.z.clone());
    let gm = grad_map_graph(&model.config, &mut g, &p, CamTarget::Class(class))?;
    let a = gradcam_graph(&mut g, z, gm, model.config.image_size)?;
    AttentionMap::unbatch(g.value(a))
}

/// Parses a class tag, e.g. from a CLI flag.
pub fn parse_class(tag: &str) -> Result<Label> {
    match tag {
        "normal" | "c_n" => Ok(Label::Normal),
        "anomalous" | "c_a" => Ok(Label::Anomalous),
        other => Err(Error::arg(format!("unknown class tag {other:?}"))),
    }
}

pub fn invert(map: &AttentionMap) -> AttentionMap {
    AttentionMap {
        values: map.values.map(|v| 1.0 - v),
    }
}

/// `mask[i,j] = value[i,j] > t`.
pub fn threshold(map: &AttentionMap, t: f64) -> Result<Mask> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::arg(format!("threshold {t} outside [0,1]")));
    }
    Mask::new(map.height(), map.width(), map.data().iter().map(|&v| v > t).collect())
}

/// Value-level upsample + normalize of one raw map `(h,w)`.
pub fn upsample_normalize(raw: &Tensor, size: usize) -> Result<AttentionMap> {
    if raw.shape().len() != 2 {
        return Err(Error::shape(format!("expected a 2-D raw map, got {:?}", raw.shape())));
    }
    if !raw.all_finite() {
        return Err(Error::Numeric("non-finite raw attention".into()));
    }
    let mut g = Graph::new();
    let batched = raw.clone().reshape(&[1, raw.dim(0), raw.dim(1)])?;
    let r = g.constant(batched);
    let a = upsample_normalize_graph(&mut g, r, size)?;
    Ok(AttentionMap::unbatch(g.value(a))?.remove(0))
}
