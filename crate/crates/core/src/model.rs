//! Encoder with a convolutional (or, for ablations, flattened) latent
//! variable, residual upsampling decoder, discriminator and the
//! weakly-supervised classifier head.
//!
//! Parameters live in a name-keyed [`Params`] store. Forward passes bind the
//! store onto an autodiff [`Graph`]; [`Model`] wraps the common value-level
//! calls for inference and tests.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LEAK: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Unsupervised,
    Weak,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Unsupervised => "unsupervised",
            Mode::Weak => "weak",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unsupervised" => Ok(Mode::Unsupervised),
            "weak" => Ok(Mode::Weak),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Image-level class. The discriminant is the classifier logit column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal = 0,
    Anomalous = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Normal),
            1 => Ok(Label::Anomalous),
            other => Err(Error::arg(format!("class index {other} is neither normal (0) nor anomalous (1)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub latent_channels: usize,
    pub encoder_depth: usize,
    pub base_width: usize,
    pub mode: Mode,
    /// `false` swaps the spatial latent for a flat vector of `flat_latent_dim`.
    pub conv_latent: bool,
    pub flat_latent_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            channels: 3,
            latent_channels: 64,
            encoder_depth: 4,
            base_width: 16,
            mode: Mode::Unsupervised,
            conv_latent: true,
            flat_latent_dim: 100,
        }
    }
}

impl ModelConfig {
    pub fn latent_spatial(&self) -> usize {
        self.image_size >> self.encoder_depth.min(usize::BITS as usize - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < 32 || !self.image_size.is_power_of_two() {
            return bad(format!("image_size {} must be a power of two >= 32", self.image_size));
        }
        if self.encoder_depth < 3 {
            return bad(format!("encoder_depth {} must be >= 3", self.encoder_depth));
        }
        if self.latent_spatial() < 2 || self.latent_spatial() << self.encoder_depth != self.image_size {
            return bad(format!(
                "latent must stay spatial: image_size {} / 2^{} leaves {}",
                self.image_size,
                self.encoder_depth,
                self.image_size as f64 / (1u64 << self.encoder_depth.min(63)) as f64
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.latent_channels == 0 || self.base_width == 0 || self.flat_latent_dim == 0 {
            return bad("latent_channels, base_width and flat_latent_dim must be positive".into());
        }
        Ok(())
    }

    fn width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    /// Channels of the deepest encoder stage.
    pub fn top_width(&self) -> usize {
        self.width(self.encoder_depth - 1)
    }

    /// Shape of the latent for one image, without the batch axis.
    pub fn latent_shape(&self) -> Vec<usize> {
        if self.conv_latent {
            let s = self.latent_spatial();
            vec![self.latent_channels, s, s]
        } else {
            vec![self.flat_latent_dim]
        }
    }

    /// Shape of the maps Grad-CAM weights: the latent itself when spatial,
    /// otherwise the last encoder activation.
    pub fn feature_shape(&self) -> Vec<usize> {
        let s = self.latent_spatial();
        if self.conv_latent {
            vec![self.latent_channels, s, s]
        } else {
            vec![self.top_width(), s, s]
        }
    }

    fn flat_hidden(&self) -> usize {
        let s = self.latent_spatial();
        self.top_width() * s * s
    }

    fn flat_feature(&self) -> usize {
        self.latent_shape().iter().product()
    }
}

/// Named differentiable parameters for every network of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    tensors: BTreeMap<String, Tensor>,
}

pub const ENCODER: &str = "enc.";
pub const DECODER: &str = "dec.";
pub const DISCRIMINATOR: &str = "disc.";
pub const CLASSIFIER: &str = "cls.";

impl Params {
    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Params { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn has_classifier(&self) -> bool {
        self.tensors.keys().any(|k| k.starts_with(CLASSIFIER))
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Puts every tensor on the graph; names for which `trainable` holds
    /// become gradient-tracked leaves, the rest constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        self.bind_where(g, |_| true, trainable)
    }

    /// Like [`Params::bind`], restricted to the names for which `include`
    /// holds.
    pub fn bind_where(&self, g: &mut Graph, include: impl Fn(&str) -> bool, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .filter(|(name, _)| include(name))
            .map(|(name, t)| {
                let v = if trainable(name) {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters bound onto one graph.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Adds the bindings of `other`, e.g. discriminator constants bound
    /// after the discriminator update.
    pub fn merge(&mut self, other: Bound) {
        self.vars.extend(other.vars);
    }
}

struct Initializer {
    rng: ChaCha8Rng,
    tensors: BTreeMap<String, Tensor>,
}

impl Initializer {
    /// LeCun-uniform: `U(-sqrt(3/fan_in), sqrt(3/fan_in))`, unit variance
    /// propagation for fan-in `fan_in`.
    fn weight(&mut self, name: String, shape: &[usize], fan_in: usize) {
        let bound = (3.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.tensors.insert(name, Tensor::from_vec(shape, data).expect("shape product"));
    }

    fn fill(&mut self, name: String, shape: &[usize], value: f64) {
        self.tensors.insert(name, Tensor::full(shape, value));
    }

    fn conv(&mut self, prefix: &str, c_out: usize, c_in: usize, k: usize, bias: bool) {
        self.weight(format!("{prefix}.w"), &[c_out, c_in, k, k], c_in * k * k);
        if bias {
            self.fill(format!("{prefix}.b"), &[c_out], 0.0);
        }
    }

    fn linear(&mut self, prefix: &str, out_f: usize, in_f: usize) {
        self.weight(format!("{prefix}.w"), &[out_f, in_f], in_f);
        self.fill(format!("{prefix}.b"), &[out_f], 0.0);
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.fill(format!("{prefix}.g"), &[c], 1.0);
        self.fill(format!("{prefix}.s"), &[c], 0.0);
    }

    /// Stride-2 downsampling stack shared by encoder and discriminator.
    fn down_stack(&mut self, net: &str, cfg: &ModelConfig) {
        let mut c_in = cfg.channels;
        for i in 0..cfg.encoder_depth {
            let c_out = cfg.width(i);
            self.conv(&format!("{net}{i}"), c_out, c_in, 4, i == 0);
            if i > 0 {
                self.norm(&format!("{net}{i}.n"), c_out);
            }
            c_in = c_out;
        }
    }
}

/// Draws a fresh parameter set. Deterministic for a given `(config, seed)`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<Params> {
    config.validate()?;
    let mut init = Initializer {
        rng: ChaCha8Rng::seed_from_u64(seed),
        tensors: BTreeMap::new(),
    };
    let top = config.top_width();

    init.down_stack(ENCODER, config);
    if config.conv_latent {
        init.conv("enc.mu", config.latent_channels, top, 1, true);
        init.conv("enc.logvar", config.latent_channels, top, 1, true);
        init.conv("dec.in", top, config.latent_channels, 1, true);
    } else {
        init.linear("enc.mu", config.flat_latent_dim, config.flat_hidden());
        init.linear("enc.logvar", config.flat_latent_dim, config.flat_hidden());
        init.linear("dec.in", config.flat_hidden(), config.flat_latent_dim);
    }
    for (i, (c_in, c_out)) in decoder_widths(config).into_iter().enumerate() {
        init.conv(&format!("dec.{i}"), c_out, c_in, 3, true);
        if c_in != c_out {
            init.conv(&format!("dec.{i}.skip"), c_out, c_in, 1, false);
        }
    }
    init.conv("dec.out", config.channels, config.base_width, 3, true);

    init.down_stack(DISCRIMINATOR, config);
    let s = config.latent_spatial();
    init.linear("disc.out", 1, top * s * s);

    if config.mode == Mode::Weak {
        init.linear("cls", 2, config.flat_feature());
    }
    Ok(Params {
        tensors: init.tensors,
    })
}

/// `(in, out)` channels per decoder stage, deepest first.
fn decoder_widths(cfg: &ModelConfig) -> Vec<(usize, usize)> {
    (0..cfg.encoder_depth)
        .map(|i| {
            let c_in = cfg.width(cfg.encoder_depth - 1 - i);
            let c_out = cfg.width(cfg.encoder_depth.saturating_sub(2 + i));
            (c_in, c_out)
        })
        .collect()
}

/// Graph handles for one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOut {
    pub mu: Var,
    pub logvar: Var,
    /// Last convolutional activation (Grad-CAM site of the flat ablation).
    pub hidden: Var,
}

fn check_images(cfg: &ModelConfig, shape: &[usize]) -> Result<()> {
    let want = [cfg.channels, cfg.image_size, cfg.image_size];
    if shape.len() != 4 || shape[1..] != want || shape[0] == 0 {
        return Err(Error::shape(format!(
            "expected images (B, {}, {}, {}), got {shape:?}",
            want[0], want[1], want[2]
        )));
    }
    Ok(())
}

fn down_stack(cfg: &ModelConfig, g: &mut Graph, p: &Bound, net: &str, x: Var) -> Result<Var> {
    let mut h = x;
    for i in 0..cfg.encoder_depth {
        let w = p.var(&format!("{net}{i}.w"))?;
        let b = if i == 0 { Some(p.var(&format!("{net}{i}.b"))?) } else { None };
        h = g.conv2d(h, w, b, 2, 1)?;
        if i > 0 {
            h = g.instance_norm(h, p.var(&format!("{net}{i}.n.g"))?, p.var(&format!("{net}{i}.n.s"))?, NORM_EPS)?;
        }
        h = g.leaky_relu(h, LEAK);
    }
    Ok(h)
}

pub fn encode_graph(cfg: &ModelConfig, g: &mut Graph, p: &Bound, x: Var) -> Result<EncoderOut> {
    check_images(cfg, g.shape(x))?;
    let hidden = down_stack(cfg, g, p, ENCODER, x)?;
    let (mu, logvar) = if cfg.conv_latent {
        (
            g.conv2d(hidden, p.var("enc.mu.w")?, Some(p.var("enc.mu.b")?), 1, 0)?,
            g.conv2d(hidden, p.var("enc.logvar.w")?, Some(p.var("enc.logvar.b")?), 1, 0)?,
        )
    } else {
        let bsz = g.shape(hidden)[0];
        let flat = g.reshape(hidden, &[bsz, cfg.flat_hidden()])?;
        (
            g.linear(flat, p.var("enc.mu.w")?, p.var("enc.mu.b")?)?,
            g.linear(flat, p.var("enc.logvar.w")?, p.var("enc.logvar.b")?)?,
        )
    };
    Ok(EncoderOut { mu, logvar, hidden })
}

/// `z = mu + exp(logvar / 2) * eps` with `eps ~ N(0, I)` drawn from `rng`
/// when `sample`, otherwise `z = mu`.
pub fn reparameterize_graph(g: &mut Graph, enc: &EncoderOut, rng: &mut impl Rng, sample: bool) -> Result<Var> {
    if !sample {
        return Ok(enc.mu);
    }
    if !g.value(enc.logvar).all_finite() {
        return Err(Error::Numeric("non-finite log-variance".into()));
    }
    let shape = g.shape(enc.mu).to_vec();
    let n: usize = shape.iter().product();
    let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let eps = g.constant(Tensor::from_vec(&shape, eps)?);
    let half = g.scale(enc.logvar, 0.5);
    let std = g.exp(half);
    let noise = g.mul(std, eps)?;
    g.add(enc.mu, noise)
}

fn check_latent(cfg: &ModelConfig, shape: &[usize]) -> Result<()> {
    if shape.len() < 2 || shape[1..] != cfg.latent_shape()[..] {
        return Err(Error::shape(format!(
            "expected latent (B, {:?}), got {shape:?}",
            cfg.latent_shape()
        )));
    }
    Ok(())
}

pub fn decode_graph(cfg: &ModelConfig, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
    check_latent(cfg, g.shape(z))?;
    let bsz = g.shape(z)[0];
    let s = cfg.latent_spatial();
    let mut h = if cfg.conv_latent {
        g.conv2d(z, p.var("dec.in.w")?, Some(p.var("dec.in.b")?), 1, 0)?
    } else {
        let lin = g.linear(z, p.var("dec.in.w")?, p.var("dec.in.b")?)?;
        g.reshape(lin, &[bsz, cfg.top_width(), s, s])?
    };
    for (i, (c_in, c_out)) in decoder_widths(cfg).into_iter().enumerate() {
        let up = g.upsample2x(h)?;
        let act = g.leaky_relu(up, LEAK);
        let conv = g.conv2d(act, p.var(&format!("dec.{i}.w"))?, Some(p.var(&format!("dec.{i}.b"))?), 1, 1)?;
        let skip = if c_in == c_out {
            up
        } else {
            g.conv2d(up, p.var(&format!("dec.{i}.skip.w"))?, None, 1, 0)?
        };
        h = g.add(conv, skip)?;
    }
    let act = g.leaky_relu(h, LEAK);
    let out = g.conv2d(act, p.var("dec.out.w")?, Some(p.var("dec.out.b")?), 1, 1)?;
    Ok(g.sigmoid(out))
}

/// Per-image probability that the input is a real (not reconstructed) image.
pub fn discriminate_graph(cfg: &ModelConfig, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
    check_images(cfg, g.shape(x))?;
    let bsz = g.shape(x)[0];
    let h = down_stack(cfg, g, p, DISCRIMINATOR, x)?;
    let flat = g.reshape(h, &[bsz, cfg.flat_hidden()])?;
    let logit = g.linear(flat, p.var("disc.out.w")?, p.var("disc.out.b")?)?;
    let prob = g.sigmoid(logit);
    g.reshape(prob, &[bsz])
}

/// Two-class logits `(B, 2)` ordered `(normal, anomalous)` from the
/// flattened latent.
pub fn classify_graph(cfg: &ModelConfig, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
    if cfg.mode != Mode::Weak {
        return Err(Error::Mode("the classifier head exists only in weak mode".into()));
    }
    check_latent(cfg, g.shape(z))?;
    let bsz = g.shape(z)[0];
    let flat = g.reshape(z, &[bsz, cfg.flat_feature()])?;
    g.linear(flat, p.var("cls.w")?, p.var("cls.b")?)
}

/// Value-level latent for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub mu: Tensor,
    pub logvar: Tensor,
    pub z: Tensor,
}

/// A configuration paired with its parameters, for value-level inference.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Model { config, params })
    }

    /// Deterministic encoding; `z` equals `mu`.
    pub fn encode(&self, x: &Tensor) -> Result<LatentState> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let xv = g.constant(x.clone());
        let enc = encode_graph(&self.config, &mut g, &p, xv)?;
        let mu = g.value(enc.mu).clone();
        Ok(LatentState {
            z: mu.clone(),
            logvar: g.value(enc.logvar).clone(),
            mu,
        })
    }

    pub fn reparameterize(&self, state: &LatentState, rng: &mut impl Rng, sample: bool) -> Result<Tensor> {
        let mut g = Graph::new();
        let enc = EncoderOut {
            mu: g.constant(state.mu.clone()),
            logvar: g.constant(state.logvar.clone()),
            hidden: g.constant(Tensor::scalar(0.0)),
        };
        let z = reparameterize_graph(&mut g, &enc, rng, sample)?;
        Ok(g.value(z).clone())
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let zv = g.constant(z.clone());
        let out = decode_graph(&self.config, &mut g, &p, zv)?;
        Ok(g.value(out).clone())
    }

    pub fn discriminate(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let xv = g.constant(x.clone());
        let out = discriminate_graph(&self.config, &mut g, &p, xv)?;
        Ok(g.value(out).clone())
    }

    pub fn classify(&self, state: &LatentState) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let zv = g.constant(state.z.clone());
        let out = classify_graph(&self.config, &mut g, &p, zv)?;
        Ok(g.value(out).clone())
    }

    /// Deterministic reconstruction through the latent mean.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let state = self.encode(x)?;
        self.decode(&state.z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn micro_config() -> ModelConfig {
        ModelConfig {
            image_size: 32,
            channels: 1,
            latent_channels: 2,
            encoder_depth: 3,
            base_width: 2,
            ..ModelConfig::default()
        }
    }

    fn batch(cfg: &ModelConfig, b: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b * cfg.channels * cfg.image_size * cfg.image_size;
        Tensor::from_vec(
            &[b, cfg.channels, cfg.image_size, cfg.image_size],
            (0..n).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::default();
        assert_eq!(init_params(&cfg, 7).unwrap(), init_params(&cfg, 7).unwrap());
        assert_ne!(init_params(&cfg, 7).unwrap(), init_params(&cfg, 8).unwrap());
    }

    #[test]
    fn rejects_collapsed_latent() {
        let cfg = ModelConfig {
            image_size: 32,
            encoder_depth: 5,
            ..ModelConfig::default()
        };
        assert!(matches!(init_params(&cfg, 0), Err(Error::Config(_))));
        let small = ModelConfig {
            image_size: 16,
            encoder_depth: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(small.validate(), Err(Error::Config(_))));
        let shallow = ModelConfig {
            encoder_depth: 2,
            ..ModelConfig::default()
        };
        assert!(matches!(shallow.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn default_latent_is_four_by_four() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.latent_spatial(), 4);
        let model = Model::new(cfg.clone(), 1).unwrap();
        let state = model.encode(&batch(&cfg, 2, 0)).unwrap();
        assert_eq!(state.mu.shape(), &[2, 64, 4, 4]);
        assert_eq!(state.logvar.shape(), &[2, 64, 4, 4]);
    }

    #[test]
    fn round_trip_shapes() {
        for &size in &[32, 64, 128] {
            for conv_latent in [true, false] {
                let cfg = ModelConfig {
                    image_size: size,
                    channels: 1,
                    latent_channels: 4,
                    base_width: 2,
                    encoder_depth: 4,
                    conv_latent,
                    ..ModelConfig::default()
                };
                let model = Model::new(cfg.clone(), 3).unwrap();
                let x = batch(&cfg, 2, 1);
                let out = model.reconstruct(&x).unwrap();
                assert_eq!(out.shape(), x.shape());
                assert!(out.min() > 0.0 && out.max() < 1.0);
            }
        }
    }

    #[test]
    fn forward_passes_are_pure() {
        let cfg = micro_config();
        let model = Model::new(cfg.clone(), 5).unwrap();
        let x = batch(&cfg, 3, 2);
        assert_eq!(model.encode(&x).unwrap(), model.encode(&x).unwrap());
        let d = model.discriminate(&x).unwrap();
        assert_eq!(d.shape(), &[3]);
        assert!(d.data().iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(d, model.discriminate(&x).unwrap());
        let z = model.encode(&x).unwrap().z;
        assert_eq!(model.decode(&z).unwrap(), model.decode(&z).unwrap());
    }

    #[test]
    fn zero_image_encodes_finite() {
        let cfg = ModelConfig::default();
        let model = Model::new(cfg.clone(), 2).unwrap();
        let state = model.encode(&Tensor::zeros(&[1, 3, 64, 64])).unwrap();
        assert!(state.mu.all_finite() && state.logvar.all_finite());
    }

    #[test]
    fn shape_errors() {
        let cfg = micro_config();
        let model = Model::new(cfg, 0).unwrap();
        assert!(matches!(model.encode(&Tensor::zeros(&[1, 3, 32, 32])), Err(Error::Shape(_))));
        assert!(matches!(model.decode(&Tensor::zeros(&[1, 2, 8, 8])), Err(Error::Shape(_))));
        assert!(matches!(model.discriminate(&Tensor::zeros(&[1, 1, 16, 16])), Err(Error::Shape(_))));
    }

    #[test]
    fn reparameterize_branches() {
        let model = Model::new(micro_config(), 0).unwrap();
        let mu = Tensor::from_vec(&[1, 2, 4, 4], (0..32).map(|i| i as f64 * 0.1).collect()).unwrap();
        let state = LatentState {
            mu: mu.clone(),
            logvar: Tensor::full(&[1, 2, 4, 4], -40.0),
            z: mu.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(model.reparameterize(&state, &mut rng, false).unwrap(), mu);
        let z = model.reparameterize(&state, &mut rng, true).unwrap();
        for (a, b) in z.data().iter().zip(mu.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let wide = LatentState {
            logvar: Tensor::zeros(&[1, 2, 4, 4]),
            ..state
        };
        let z1 = model.reparameterize(&wide, &mut ChaCha8Rng::seed_from_u64(9), true).unwrap();
        let z2 = model.reparameterize(&wide, &mut ChaCha8Rng::seed_from_u64(9), true).unwrap();
        assert_eq!(z1, z2);
        assert_ne!(z1, mu);
    }

    #[test]
    fn classifier_requires_weak_mode() {
        let model = Model::new(micro_config(), 0).unwrap();
        assert!(!model.params.has_classifier());
        let state = model.encode(&batch(&micro_config(), 1, 0)).unwrap();
        assert!(matches!(model.classify(&state), Err(Error::Mode(_))));

        let weak = ModelConfig {
            mode: Mode::Weak,
            ..micro_config()
        };
        let model = Model::new(weak.clone(), 0).unwrap();
        let state = model.encode(&batch(&weak, 3, 0)).unwrap();
        let logits = model.classify(&state).unwrap();
        assert_eq!(logits.shape(), &[3, 2]);
        for row in logits.data().chunks(2) {
            let m = row[0].max(row[1]);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let p: f64 = row.iter().map(|v| (v - m).exp() / z).sum();
            assert!((p - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn anomalous_logit_gradient_is_nonzero() {
        // finite-difference probe of d logit_a / d z on a tiny head
        let weak = ModelConfig {
            mode: Mode::Weak,
            ..micro_config()
        };
        let model = Model::new(weak.clone(), 4).unwrap();
        let state = model.encode(&batch(&weak, 1, 3)).unwrap();
        let base = model.classify(&state).unwrap().data()[1];
        let mut max_delta: f64 = 0.0;
        for i in 0..state.z.len() {
            let mut probe = state.clone();
            probe.z.data_mut()[i] += 1e-5;
            let d = (model.classify(&probe).unwrap().data()[1] - base) / 1e-5;
            max_delta = max_delta.max(d.abs());
        }
        assert!(max_delta > 1e-3);
    }
}
