//! Alternating adversarial training for both supervision modes, the Adam
//! optimizer, metric records and checkpoints.
//!
//! Each batch runs one discriminator update on real images against detached
//! reconstructions, then one update of encoder, decoder (and classifier in
//! weak mode) against the weighted objective, with the freshly updated
//! discriminator held constant.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{self, AttentionResolution, CamTarget};
use crate::autodiff::{Graph, Var};
use crate::data::{self, DatasetSplit, Sample};
use crate::error::{Error, Result};
use crate::evaluation::{self, ScoreCalibration};
use crate::losses::{self, LossBundle, LossWeights};
use crate::model::{self, Bound, Label, Mode, Model, ModelConfig, Params, DISCRIMINATOR};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Encoder, decoder and classifier.
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    /// Overrides the per-mode default weights.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<LossWeights>,
    /// `false` zeroes the attention term of the mode (`w_ae` or `w_cga`).
    pub use_attention_loss: bool,
    /// Reparameterized sampling during training; evaluation always uses the mean.
    pub sample_latent: bool,
    /// Scale of the KL and generator adversarial terms during training.
    pub loss_scale: LossScale,
    /// Resolution of the attention maps entering the attention losses.
    pub attention_resolution: AttentionResolution,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Normal training images held out for score calibration; 0 calibrates
    /// on the training normals themselves.
    pub calibration_holdout: usize,
    /// Metric record file; defaults to `metrics.jsonl` in the run directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            lr_generator: 2e-4,
            lr_discriminator: 2e-4,
            weights: None,
            use_attention_loss: true,
            sample_latent: true,
            loss_scale: LossScale::PerPixel,
            attention_resolution: AttentionResolution::Input,
            seed: 0,
            checkpoint_every: 0,
            calibration_holdout: 10,
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        for (name, lr) in [("lr_generator", self.lr_generator), ("lr_discriminator", self.lr_discriminator)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if let Some(w) = &self.weights {
            w.validate()?;
        }
        Ok(())
    }

    /// Weights actually applied in `mode`, after the attention ablation.
    pub fn effective_weights(&self, mode: Mode) -> LossWeights {
        let mut w = self.weights.unwrap_or_else(|| LossWeights::for_mode(mode));
        if !self.use_attention_loss {
            w.w_ae = 0.0;
            w.w_cga = 0.0;
        }
        w
    }
}

/// Scale of the per-image terms (summed KL, generator adversarial term)
/// relative to the per-pixel reconstruction mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScale {
    /// Terms as defined in `losses`.
    Raw,
    /// Both divided by the image element count `C*H*W`: the objective is
    /// then the summed-likelihood objective divided by the pixel count.
    /// Unscaled, the KL collapses the posterior and the adversarial
    /// gradient swamps reconstruction.
    #[default]
    PerPixel,
}

impl LossScale {
    /// Factor applied to per-image terms for images of `pixels` elements.
    pub fn factor(self, pixels: usize) -> f64 {
        match self {
            LossScale::Raw => 1.0,
            LossScale::PerPixel => 1.0 / pixels as f64,
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one step to every parameter named in `grads`.
    pub fn update(&mut self, params: &mut Params, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.shape()));
            let (b1, b2) = (self.beta1, self.beta2);
            for (((pi, mi), vi), &gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(grad.data())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One line of the metric log: batch-size-weighted means over an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossBundle,
    /// Mean attention value (normal-class attention in weak mode).
    pub coverage: f64,
    pub wall_time_s: f64,
}

impl EpochRecord {
    /// Everything but wall time, for run-to-run comparisons.
    pub fn same_losses(&self, other: &EpochRecord) -> bool {
        self.epoch == other.epoch && self.losses == other.losses && self.coverage.to_bits() == other.coverage.to_bits()
    }
}

/// Graph handles of one generator-side forward pass.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorPass {
    pub xhat: Var,
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
    pub recon: Var,
    /// Scaled by `image_term_scale`.
    pub kl: Var,
    /// Factor applied to the per-image terms.
    pub image_term_scale: f64,
    /// Unsupervised mode.
    pub ae: Option<Var>,
    /// Weak mode.
    pub bce: Option<Var>,
    /// Weak mode.
    pub cga: Option<Var>,
    pub coverage: Var,
}

/// Training-time switches of [`generator_pass`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PassOptions {
    pub sample: bool,
    pub scale: LossScale,
    pub resolution: AttentionResolution,
}

/// Encoder, decoder and attention losses for a batch. Discriminator terms
/// are added by [`generator_objective`].
pub fn generator_pass(
    cfg: &ModelConfig,
    g: &mut Graph,
    p: &Bound,
    x: &Tensor,
    labels: &[Label],
    rng: &mut impl Rng,
    opts: PassOptions,
) -> Result<GeneratorPass> {
    if labels.len() != x.dim(0) {
        return Err(Error::shape(format!("{} labels for a batch of {}", labels.len(), x.dim(0))));
    }
    let xv = g.constant(x.clone());
    let enc = model::encode_graph(cfg, g, p, xv)?;
    let z = model::reparameterize_graph(g, &enc, rng, opts.sample)?;
    let xhat = model::decode_graph(cfg, g, p, z)?;
    let recon = losses::reconstruction_graph(g, x, xhat)?;
    let image_term_scale = opts.scale.factor(x.len() / x.dim(0));
    let kl_sum = losses::kl_graph(g, enc.mu, enc.logvar)?;
    let kl = g.scale(kl_sum, image_term_scale);
    // attention reads the latent mean, the same site used at evaluation
    let features = if cfg.conv_latent { enc.mu } else { enc.hidden };
    let size = match opts.resolution {
        AttentionResolution::Input => cfg.image_size,
        AttentionResolution::Latent => g.shape(features)[2],
    };
    let (ae, bce, cga, coverage) = match cfg.mode {
        Mode::Unsupervised => {
            let gm = attention::grad_map_graph(cfg, g, p, CamTarget::LatentSum)?;
            let a = attention::gradcam_graph(g, features, gm, size)?;
            let ae = losses::attention_expansion_graph(g, a)?;
            (Some(ae), None, None, g.mean(a))
        }
        Mode::Weak => {
            let logits = model::classify_graph(cfg, g, p, z)?;
            let bce = losses::classifier_graph(g, logits, labels)?;
            let preds = evaluation::classifier_predictions(g.value(logits))?;
            let gm_n = attention::grad_map_graph(cfg, g, p, CamTarget::Class(Label::Normal))?;
            let a_n = attention::gradcam_graph(g, features, gm_n, size)?;
            let gm_a = attention::grad_map_graph(cfg, g, p, CamTarget::Class(Label::Anomalous))?;
            let a_a = attention::gradcam_graph(g, features, gm_a, size)?;
            let cga = losses::guided_attention_graph(g, a_n, a_a, &preds, labels)?;
            (None, Some(bce), Some(cga), g.mean(a_n))
        }
    };
    Ok(GeneratorPass {
        xhat,
        mu: enc.mu,
        logvar: enc.logvar,
        z,
        recon,
        kl,
        image_term_scale,
        ae,
        bce,
        cga,
        coverage,
    })
}

/// Weighted generator objective given discriminator parameters `pd` bound
/// on the same graph. Returns `(total, scaled generator adversarial term)`.
pub fn generator_objective(
    cfg: &ModelConfig,
    g: &mut Graph,
    pass: &GeneratorPass,
    pd: &Bound,
    w: &LossWeights,
) -> Result<(Var, Var)> {
    let d_fake = model::discriminate_graph(cfg, g, pd, pass.xhat)?;
    let adv_raw = losses::generator_adversarial_graph(g, d_fake);
    let adv_gen = g.scale(adv_raw, pass.image_term_scale);
    let total = losses::weighted_sum_graph(
        g,
        &[
            (w.w_r, Some(pass.recon)),
            (w.w_r, Some(pass.kl)),
            (w.w_adv, Some(adv_gen)),
            (w.w_ae, pass.ae),
            (w.w_c, pass.bce),
            (w.w_cga, pass.cga),
        ],
    )?;
    Ok((total, adv_gen))
}

fn is_disc(name: &str) -> bool {
    name.starts_with(DISCRIMINATOR)
}

/// Collects finite gradients for every trainable binding.
fn collect_grads(g: &Graph, bound: &Bound, loss: Var) -> Result<BTreeMap<String, Tensor>> {
    let mut grads = g.backward(loss)?;
    let mut out = BTreeMap::new();
    for (name, &v) in bound.iter() {
        if !g.requires_grad(v) {
            continue;
        }
        if let Some(t) = grads.take(v) {
            if !t.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {name}")));
            }
            out.insert(name.clone(), t);
        }
    }
    Ok(out)
}

/// Generator-side forward state carried between the two half-steps.
pub struct GeneratorForward {
    graph: Graph,
    bound: Bound,
    pass: GeneratorPass,
}

impl GeneratorForward {
    pub fn reconstruction(&self) -> &Tensor {
        self.graph.value(self.pass.xhat)
    }
}

/// Resumable ChaCha8 position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub params: Params,
    pub opt_generator: Adam,
    pub opt_discriminator: Adam,
    pub rng: RngState,
    pub calibration: Option<ScoreCalibration>,
    pub log: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn model(&self) -> Model {
        Model {
            config: self.model_config.clone(),
            params: self.params.clone(),
        }
    }
}

/// Splits training normals into the training pool and the calibration
/// holdout. The holdout is a seeded draw, stable across resumes.
pub fn partition<'a>(split: &'a DatasetSplit, cfg: &TrainConfig) -> Result<(Vec<&'a Sample>, Vec<&'a Sample>)> {
    let normals = &split.train_normal;
    if cfg.calibration_holdout == 0 {
        let all: Vec<&Sample> = normals.iter().collect();
        let mut train = all.clone();
        train.extend(&split.train_anomalous);
        return Ok((train, all));
    }
    if normals.len() <= cfg.calibration_holdout {
        return Err(Error::Config(format!(
            "{} normal training images cannot spare a calibration holdout of {}",
            normals.len(),
            cfg.calibration_holdout
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_CA11_B8A7_0000);
    let idx: Vec<usize> = (0..normals.len()).collect();
    let mut held: Vec<usize> = idx.choose_multiple(&mut rng, cfg.calibration_holdout).copied().collect();
    held.sort_unstable();
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for (i, s) in normals.iter().enumerate() {
        if held.binary_search(&i).is_ok() {
            holdout.push(s);
        } else {
            train.push(s);
        }
    }
    train.extend(&split.train_anomalous);
    Ok((train, holdout))
}

/// Result of a completed training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
}

pub struct Trainer {
    model: Model,
    config: TrainConfig,
    weights: LossWeights,
    opt_g: Adam,
    opt_d: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    log: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(model_cfg.clone(), cfg.seed)?;
        Ok(Trainer {
            weights: cfg.effective_weights(model_cfg.mode),
            opt_g: Adam::new(cfg.lr_generator),
            opt_d: Adam::new(cfg.lr_discriminator),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1)),
            epoch: 0,
            log: Vec::new(),
            model,
            config: cfg.clone(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.train_config.validate()?;
        ckpt.model_config.validate()?;
        Ok(Trainer {
            weights: ckpt.train_config.effective_weights(ckpt.model_config.mode),
            rng: ckpt.rng.restore(),
            model: Model {
                config: ckpt.model_config,
                params: ckpt.params,
            },
            config: ckpt.train_config,
            opt_g: ckpt.opt_generator,
            opt_d: ckpt.opt_discriminator,
            epoch: ckpt.epoch,
            log: ckpt.log,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.model.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Sets the epoch budget, e.g. to extend a resumed run.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.config.epochs = epochs;
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn log(&self) -> &[EpochRecord] {
        &self.log
    }

    pub fn checkpoint(&self, calibration: Option<ScoreCalibration>) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config.clone(),
            train_config: self.config.clone(),
            epoch: self.epoch,
            params: self.model.params.clone(),
            opt_generator: self.opt_g.clone(),
            opt_discriminator: self.opt_d.clone(),
            rng: RngState::capture(&self.rng),
            calibration,
            log: self.log.clone(),
        }
    }

    /// Builds the generator graph for a batch (discriminator not yet bound).
    pub fn generator_forward(&mut self, x: &Tensor, labels: &[Label]) -> Result<GeneratorForward> {
        let mut graph = Graph::new();
        let bound = self.model.params.bind_where(&mut graph, |n| !is_disc(n), |_| true);
        let pass = generator_pass(
            &self.model.config,
            &mut graph,
            &bound,
            x,
            labels,
            &mut self.rng,
            PassOptions {
                sample: self.config.sample_latent,
                scale: self.config.loss_scale,
                resolution: self.config.attention_resolution,
            },
        )?;
        Ok(GeneratorForward { graph, bound, pass })
    }

    /// One discriminator update on real `x` against detached `xhat`. Returns
    /// the adversarial loss before the update.
    pub fn discriminator_step(&mut self, x: &Tensor, xhat: &Tensor) -> Result<f64> {
        let cfg = &self.model.config;
        let mut g = Graph::new();
        let pd = self.model.params.bind_where(&mut g, is_disc, |_| true);
        let real = g.constant(x.clone());
        let fake = g.constant(xhat.clone());
        let d_real = model::discriminate_graph(cfg, &mut g, &pd, real)?;
        let d_fake = model::discriminate_graph(cfg, &mut g, &pd, fake)?;
        let adv = losses::adversarial_graph(&mut g, d_real, d_fake)?;
        let value = g.value(adv).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite discriminator loss {value}")));
        }
        let grads = collect_grads(&g, &pd, adv)?;
        self.opt_d.update(&mut self.model.params, &grads)?;
        Ok(value)
    }

    /// Completes the generator graph with the current discriminator held
    /// constant and applies one generator update.
    pub fn generator_update(&mut self, fwd: GeneratorForward, adv: f64) -> Result<(LossBundle, f64)> {
        let GeneratorForward {
            mut graph,
            bound,
            pass,
        } = fwd;
        let pd = self.model.params.bind_where(&mut graph, is_disc, |_| false);
        let (total, adv_gen) = generator_objective(&self.model.config, &mut graph, &pass, &pd, &self.weights)?;
        let val = |v: Option<Var>| v.map_or(0.0, |v| graph.value(v).item());
        let bundle = LossBundle {
            recon: val(Some(pass.recon)),
            kl: val(Some(pass.kl)),
            adv,
            adv_gen: val(Some(adv_gen)),
            ae: val(pass.ae),
            bce: val(pass.bce),
            cga: val(pass.cga),
            total: val(Some(total)),
        };
        if !bundle.all_finite() {
            return Err(Error::Numeric(format!("non-finite loss {bundle:?}")));
        }
        let coverage = graph.value(pass.coverage).item();
        let grads = collect_grads(&graph, &bound, total)?;
        self.opt_g.update(&mut self.model.params, &grads)?;
        Ok((bundle, coverage))
    }

    /// Discriminator step then generator step on one batch.
    pub fn train_step(&mut self, batch: &[&Sample]) -> Result<(LossBundle, f64)> {
        let x = data::stack_images(batch.iter().copied())?;
        let labels: Vec<Label> = batch.iter().map(|s| s.label).collect();
        let fwd = self.generator_forward(&x, &labels)?;
        let xhat = fwd.reconstruction().clone();
        let adv = self.discriminator_step(&x, &xhat)?;
        self.generator_update(fwd, adv)
    }

    fn check_split(&self, split: &DatasetSplit) -> Result<()> {
        match self.model.config.mode {
            Mode::Unsupervised if !split.train_anomalous.is_empty() => Err(Error::arg(
                "unsupervised training takes normal images only; train_anomalous must be empty",
            )),
            Mode::Weak if split.train_anomalous.is_empty() => {
                Err(Error::arg("weak training needs labelled anomalous images"))
            }
            _ if split.train_normal.is_empty() => Err(Error::arg("no normal training images")),
            _ => Ok(()),
        }
    }

    /// Runs one epoch over the training pool and appends its record.
    pub fn run_epoch(&mut self, split: &DatasetSplit) -> Result<EpochRecord> {
        self.check_split(split)?;
        let (pool, _) = partition(split, &self.config)?;
        let start = Instant::now();
        let order = data::batches(pool.len(), self.config.batch_size, self.config.seed, self.epoch)?;
        let mut sum = LossBundle::default();
        let mut coverage = 0.0;
        for idx in &order {
            let batch: Vec<&Sample> = idx.iter().map(|&i| pool[i]).collect();
            let (b, cov) = self.train_step(&batch)?;
            let w = batch.len() as f64;
            sum.recon += w * b.recon;
            sum.kl += w * b.kl;
            sum.adv += w * b.adv;
            sum.adv_gen += w * b.adv_gen;
            sum.ae += w * b.ae;
            sum.bce += w * b.bce;
            sum.cga += w * b.cga;
            sum.total += w * b.total;
            coverage += w * cov;
        }
        let n = pool.len() as f64;
        let losses = LossBundle {
            recon: sum.recon / n,
            kl: sum.kl / n,
            adv: sum.adv / n,
            adv_gen: sum.adv_gen / n,
            ae: sum.ae / n,
            bce: sum.bce / n,
            cga: sum.cga / n,
            total: sum.total / n,
        };
        self.epoch += 1;
        let rec = EpochRecord {
            epoch: self.epoch,
            losses,
            coverage: coverage / n,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        self.log.push(rec.clone());
        Ok(rec)
    }

    /// Score calibration from the holdout (or the training normals).
    pub fn calibrate(&self, split: &DatasetSplit) -> Result<ScoreCalibration> {
        let (_, holdout) = partition(split, &self.config)?;
        let scores = evaluation::reconstruction_scores(&self.model, holdout)?;
        evaluation::calibrate(&scores)
    }

    /// Trains up to `config.epochs`, writing metric records and checkpoints
    /// under `run_dir` when given. A numeric failure leaves the last good
    /// state in `last_good.ckpt` and a report in `failure.json`.
    pub fn fit(&mut self, split: &DatasetSplit, run_dir: Option<&Path>) -> Result<TrainOutcome> {
        self.check_split(split)?;
        partition(split, &self.config)?;
        let log_path = self
            .config
            .log_path
            .clone()
            .or_else(|| run_dir.map(|d| d.join("metrics.jsonl")));
        if let Some(dir) = run_dir {
            fs::create_dir_all(dir)?;
        }
        let mut log_file = match &log_path {
            Some(p) => {
                if let Some(parent) = p.parent() {
                    fs::create_dir_all(parent)?;
                }
                Some(fs::OpenOptions::new().create(true).append(true).open(p)?)
            }
            None => None,
        };
        while self.epoch < self.config.epochs {
            let last_good = self.checkpoint(None);
            let rec = match self.run_epoch(split) {
                Ok(r) => r,
                Err(Error::Numeric(msg)) => {
                    let msg = format!("epoch {}: {msg}", last_good.epoch + 1);
                    if let Some(dir) = run_dir {
                        save_checkpoint(&last_good, &dir.join("last_good.ckpt"))?;
                        let report = serde_json::json!({
                            "error": "numeric",
                            "message": msg,
                            "last_good_epoch": last_good.epoch,
                            "checkpoint": "last_good.ckpt",
                        });
                        fs::write(dir.join("failure.json"), report.to_string() + "\n")?;
                    }
                    *self = Trainer::from_checkpoint(last_good)?;
                    return Err(Error::Numeric(msg));
                }
                Err(e) => return Err(e),
            };
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&rec).map_err(|e| Error::Checkpoint(e.to_string()))?)?;
            }
            if let (Some(dir), true) = (run_dir, self.config.checkpoint_every > 0) {
                if self.epoch % self.config.checkpoint_every == 0 && self.epoch < self.config.epochs {
                    save_checkpoint(&self.checkpoint(None), &dir.join(format!("epoch_{:04}.ckpt", self.epoch)))?;
                }
            }
        }
        let calibration = self.calibrate(split)?;
        let checkpoint = self.checkpoint(Some(calibration));
        if let Some(dir) = run_dir {
            save_checkpoint(&checkpoint, &dir.join("model.ckpt"))?;
        }
        Ok(TrainOutcome {
            log: self.log.clone(),
            checkpoint,
        })
    }
}

/// Trains from normal images only.
pub fn train_unsupervised(
    split: &DatasetSplit,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if model_cfg.mode != Mode::Unsupervised {
        return Err(Error::Mode(format!("train_unsupervised with a {} model config", model_cfg.mode)));
    }
    Trainer::new(model_cfg, cfg)?.fit(split, run_dir)
}

/// Trains with image-level labels on `split.train_anomalous`.
pub fn train_weak(
    split: &DatasetSplit,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if model_cfg.mode != Mode::Weak {
        return Err(Error::Mode(format!("train_weak with a {} model config", model_cfg.mode)));
    }
    Trainer::new(model_cfg, cfg)?.fit(split, run_dir)
}

// Checkpoint container:
//   magic | version u32 | header length u64 | JSON header | f64 LE tensors | sha256
// The digest covers every preceding byte.

/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ATNVAECK";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_config: ModelConfig,
    train_config: TrainConfig,
    epoch: usize,
    rng: RngState,
    calibration: Option<ScoreCalibration>,
    opt_generator: AdamHeader,
    opt_discriminator: AdamHeader,
    log: Vec<EpochRecord>,
    tensors: Vec<TensorEntry>,
}

fn adam_header(a: &Adam) -> AdamHeader {
    AdamHeader {
        lr: a.lr,
        beta1: a.beta1,
        beta2: a.beta2,
        eps: a.eps,
        step: a.step,
    }
}

fn ckpt_err(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

/// Serializes a checkpoint to bytes; deterministic for equal checkpoints.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (n, t) in ckpt.params.iter() {
        tensors.push((format!("params/{n}"), t));
    }
    for (tag, opt) in [("opt_generator", &ckpt.opt_generator), ("opt_discriminator", &ckpt.opt_discriminator)] {
        for (n, t) in &opt.m {
            tensors.push((format!("{tag}.m/{n}"), t));
        }
        for (n, t) in &opt.v {
            tensors.push((format!("{tag}.v/{n}"), t));
        }
    }
    let header = Header {
        model_config: ckpt.model_config.clone(),
        train_config: ckpt.train_config.clone(),
        epoch: ckpt.epoch,
        rng: ckpt.rng,
        calibration: ckpt.calibration,
        opt_generator: adam_header(&ckpt.opt_generator),
        opt_discriminator: adam_header(&ckpt.opt_discriminator),
        log: ckpt.log.clone(),
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(ckpt_err)?;
    let mut out = Vec::with_capacity(json.len() + 64 + tensors.iter().map(|(_, t)| 8 * t.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Parses bytes written by [`encode_checkpoint`].
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    const FIXED: usize = 8 + 4 + 8;
    if bytes.len() < FIXED + 32 {
        return Err(Error::Integrity(format!("checkpoint truncated to {} bytes", bytes.len())));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity("checkpoint checksum mismatch".into()));
    }
    if &body[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let json = body
        .get(FIXED..FIXED + hlen)
        .ok_or_else(|| Error::Checkpoint("header overruns file".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(ckpt_err)?;
    let mut cursor = &body[FIXED + hlen..];
    let mut params = BTreeMap::new();
    let mut opt_g = Adam::new(header.opt_generator.lr);
    let mut opt_d = Adam::new(header.opt_discriminator.lr);
    for (a, h) in [(&mut opt_g, &header.opt_generator), (&mut opt_d, &header.opt_discriminator)] {
        a.beta1 = h.beta1;
        a.beta2 = h.beta2;
        a.eps = h.eps;
        a.step = h.step;
    }
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        if cursor.len() < 8 * n {
            return Err(Error::Checkpoint(format!("tensor {} overruns file", entry.name)));
        }
        let (raw, rest) = cursor.split_at(8 * n);
        cursor = rest;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::from_vec(&entry.shape, data)?;
        let (kind, name) = entry
            .name
            .split_once('/')
            .ok_or_else(|| Error::Checkpoint(format!("bad tensor name {}", entry.name)))?;
        let slot = match kind {
            "params" => &mut params,
            "opt_generator.m" => &mut opt_g.m,
            "opt_generator.v" => &mut opt_g.v,
            "opt_discriminator.m" => &mut opt_d.m,
            "opt_discriminator.v" => &mut opt_d.v,
            other => return Err(Error::Checkpoint(format!("unknown tensor group {other}"))),
        };
        slot.insert(name.to_string(), t);
    }
    if !cursor.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", cursor.len())));
    }
    Ok(Checkpoint {
        model_config: header.model_config,
        train_config: header.train_config,
        epoch: header.epoch,
        params: Params::from_map(params),
        opt_generator: opt_g,
        opt_discriminator: opt_d,
        rng: header.rng,
        calibration: header.calibration,
        log: header.log,
    })
}

/// Writes atomically: a temporary sibling file is renamed over `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}
