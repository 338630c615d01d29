//! Training objectives.
//!
//! Each loss has a graph form (used by training, differentiable) and a
//! value form for inspection. All logarithms clamp their probability
//! argument to `[PROB_EPS, 1 - PROB_EPS]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{Label, Mode};
use crate::tensor::Tensor;

pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_r: f64,
    pub w_adv: f64,
    pub w_ae: f64,
    pub w_c: f64,
    pub w_cga: f64,
}

impl LossWeights {
    /// `w_r = 1, w_adv = 1, w_ae = 0.01`.
    pub fn unsupervised() -> Self {
        LossWeights {
            w_r: 1.0,
            w_adv: 1.0,
            w_ae: 0.01,
            w_c: 0.0,
            w_cga: 0.0,
        }
    }

    /// `w_r = 1, w_adv = 1, w_c = 0.001, w_cga = 0.01`.
    pub fn weak() -> Self {
        LossWeights {
            w_r: 1.0,
            w_adv: 1.0,
            w_ae: 0.0,
            w_c: 0.001,
            w_cga: 0.01,
        }
    }

    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::Unsupervised => Self::unsupervised(),
            Mode::Weak => Self::weak(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.w_r, self.w_adv, self.w_ae, self.w_c, self.w_cga];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Named scalar losses of one evaluation of the objective. In training
/// records `kl` and `adv_gen` already carry the run's loss scale, so
/// `total` is their plain weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub recon: f64,
    pub kl: f64,
    /// Discriminator view of the adversarial loss.
    pub adv: f64,
    /// Generator view (non-saturating), the term entering `total`.
    pub adv_gen: f64,
    pub ae: f64,
    pub bce: f64,
    pub cga: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn vae(&self) -> f64 {
        self.recon + self.kl
    }

    /// Recomputes the weighted objective of `mode` from the components.
    pub fn weighted_total(&self, mode: Mode, w: &LossWeights) -> f64 {
        match mode {
            Mode::Unsupervised => total_unsupervised(self.vae(), self.adv_gen, self.ae, w),
            Mode::Weak => total_weak(self.vae(), self.adv_gen, self.bce, self.cga, w),
        }
    }

    pub fn all_finite(&self) -> bool {
        [self.recon, self.kl, self.adv, self.adv_gen, self.ae, self.bce, self.cga, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Mean per-pixel binary cross-entropy between `x` and the reconstruction.
pub fn reconstruction_graph(g: &mut Graph, x: &Tensor, xhat: Var) -> Result<Var> {
    g.bce(xhat, x, PROB_EPS)
}

pub fn kl_graph(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    if !g.value(logvar).all_finite() || !g.value(mu).all_finite() {
        return Err(Error::Numeric("non-finite latent statistics".into()));
    }
    g.kl_std_normal(mu, logvar)
}

/// `-mean[log D(x) + log(1 - D(x_hat))]`, minimized by the discriminator.
pub fn adversarial_graph(g: &mut Graph, d_real: Var, d_fake: Var) -> Result<Var> {
    let log_real = g.log_clamped(d_real, PROB_EPS);
    let one_minus = g.rsub(1.0, d_fake);
    let log_fake = g.log_clamped(one_minus, PROB_EPS);
    let both = g.add(log_real, log_fake)?;
    let m = g.mean(both);
    Ok(g.scale(m, -1.0))
}

/// Non-saturating generator term `-mean log D(x_hat)`.
pub fn generator_adversarial_graph(g: &mut Graph, d_fake: Var) -> Var {
    let l = g.log_clamped(d_fake, PROB_EPS);
    let m = g.mean(l);
    g.scale(m, -1.0)
}

/// `mean_i mean_pixels (1 - A_i)` over a `(B,H,W)` attention batch.
pub fn attention_expansion_graph(g: &mut Graph, maps: Var) -> Result<Var> {
    if g.shape(maps).first().copied().unwrap_or(0) == 0 {
        return Err(Error::arg("attention expansion over an empty batch"));
    }
    let m = g.mean(maps);
    Ok(g.rsub(1.0, m))
}

pub fn classifier_graph(g: &mut Graph, logits: Var, labels: &[Label]) -> Result<Var> {
    let idx: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    g.cross_entropy(logits, &idx, PROB_EPS)
}

/// Per-image gate of the guided-attention loss: 1 when the image is normal
/// and predicted normal.
pub fn correct_normal_gate(predictions: &[Label], labels: &[Label]) -> Result<Vec<f64>> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    Ok(predictions
        .iter()
        .zip(labels)
        .map(|(&p, &y)| if p == Label::Normal && y == Label::Normal { 1.0 } else { 0.0 })
        .collect())
}

/// `(1/N) sum_i gate_i * mean_pixels(1 - A_n + A_a)`.
pub fn guided_attention_graph(
    g: &mut Graph,
    a_normal: Var,
    a_anom: Var,
    predictions: &[Label],
    labels: &[Label],
) -> Result<Var> {
    let n = g.shape(a_normal).first().copied().unwrap_or(0);
    if g.shape(a_normal) != g.shape(a_anom) || n != labels.len() {
        return Err(Error::shape(format!(
            "attention batches {:?} / {:?} with {} labels",
            g.shape(a_normal),
            g.shape(a_anom),
            labels.len()
        )));
    }
    let gate = correct_normal_gate(predictions, labels)?;
    let diff = g.sub(a_anom, a_normal)?;
    let per_pixel = g.offset(diff, 1.0);
    g.weighted_item_mean(per_pixel, &gate)
}

/// `w_r L + w_adv L_adv + w_ae L_ae` with `L` the VAE loss.
pub fn total_unsupervised(vae: f64, adv: f64, ae: f64, w: &LossWeights) -> f64 {
    w.w_r * vae + w.w_adv * adv + w.w_ae * ae
}

/// `w_r L + w_adv L_adv + w_c L_bce + w_cga L_cga`.
pub fn total_weak(vae: f64, adv: f64, bce: f64, cga: f64, w: &LossWeights) -> f64 {
    w.w_r * vae + w.w_adv * adv + w.w_c * bce + w.w_cga * cga
}

/// Graph form of the weighted sum; `None` terms are absent from the mode.
pub fn weighted_sum_graph(g: &mut Graph, terms: &[(f64, Option<Var>)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(w, term) in terms {
        let Some(t) = term else { continue };
        if w == 0.0 {
            continue;
        }
        let scaled = g.scale(t, w);
        acc = Some(match acc {
            Some(a) => g.add(a, scaled)?,
            None => scaled,
        });
    }
    Ok(acc.unwrap_or_else(|| g.constant(Tensor::scalar(0.0))))
}

fn eval(build: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let v = build(&mut g)?;
    Ok(g.value(v).item())
}

pub fn reconstruction_loss(x: &Tensor, xhat: &Tensor) -> Result<f64> {
    eval(|g| {
        let xh = g.constant(xhat.clone());
        reconstruction_graph(g, x, xh)
    })
}

pub fn kl_divergence(mu: &Tensor, logvar: &Tensor) -> Result<f64> {
    eval(|g| {
        let m = g.constant(mu.clone());
        let lv = g.constant(logvar.clone());
        kl_graph(g, m, lv)
    })
}

pub fn adversarial_loss(d_real: &Tensor, d_fake: &Tensor) -> Result<f64> {
    eval(|g| {
        let r = g.constant(d_real.clone());
        let f = g.constant(d_fake.clone());
        adversarial_graph(g, r, f)
    })
}

pub fn attention_expansion_loss(maps: &Tensor) -> Result<f64> {
    eval(|g| {
        let m = g.constant(maps.clone());
        attention_expansion_graph(g, m)
    })
}

pub fn classifier_loss(logits: &Tensor, labels: &[Label]) -> Result<f64> {
    eval(|g| {
        let l = g.constant(logits.clone());
        classifier_graph(g, l, labels)
    })
}

pub fn complementary_guided_attention_loss(
    a_normal: &Tensor,
    a_anom: &Tensor,
    predictions: &[Label],
    labels: &[Label],
) -> Result<f64> {
    eval(|g| {
        let n = g.constant(a_normal.clone());
        let a = g.constant(a_anom.clone());
        guided_attention_graph(g, n, a, predictions, labels)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Anomalous as A, Normal as N};

    fn t(shape: &[usize], v: f64) -> Tensor {
        Tensor::full(shape, v)
    }

    #[test]
    fn reconstruction_closed_forms() {
        let half = t(&[2, 1, 3, 3], 0.5);
        assert!((reconstruction_loss(&half, &half).unwrap() - 2f64.ln()).abs() < 1e-12);
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(reconstruction_loss(&x, &x).unwrap() <= 1e-6);
        let l = reconstruction_loss(&t(&[1, 1, 1, 1], 1.0), &t(&[1, 1, 1, 1], 0.25)).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(reconstruction_loss(&half, &t(&[1, 1, 3, 3], 0.5)), Err(Error::Shape(_))));
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_divergence(&t(&[1, 2, 2, 2], 0.0), &t(&[1, 2, 2, 2], 0.0)).unwrap(), 0.0);
        assert!((kl_divergence(&t(&[1, 1], 1.0), &t(&[1, 1], 0.0)).unwrap() - 0.5).abs() < 1e-15);
        let bad = Tensor::from_vec(&[1, 1], vec![f64::INFINITY]).unwrap();
        assert!(matches!(kl_divergence(&t(&[1, 1], 0.0), &bad), Err(Error::Numeric(_))));
    }

    #[test]
    fn adversarial_closed_forms() {
        let l = adversarial_loss(&t(&[4], 0.5), &t(&[4], 0.5)).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
        let perfect = adversarial_loss(&t(&[3], 1.0), &t(&[3], 0.0)).unwrap();
        assert!(perfect < 1e-6);
        let a = Tensor::from_vec(&[3], vec![0.9, 0.2, 0.6]).unwrap();
        let b = Tensor::from_vec(&[3], vec![0.1, 0.7, 0.3]).unwrap();
        let ap = Tensor::from_vec(&[3], vec![0.6, 0.9, 0.2]).unwrap();
        let bp = Tensor::from_vec(&[3], vec![0.3, 0.1, 0.7]).unwrap();
        let d = adversarial_loss(&a, &b).unwrap() - adversarial_loss(&ap, &bp).unwrap();
        assert!(d.abs() < 1e-12);
    }

    #[test]
    fn expansion_closed_forms() {
        assert_eq!(attention_expansion_loss(&t(&[2, 4, 4], 1.0)).unwrap(), 0.0);
        assert_eq!(attention_expansion_loss(&t(&[2, 4, 4], 0.0)).unwrap(), 1.0);
        let m = Tensor::from_vec(&[1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(attention_expansion_loss(&m).unwrap(), 0.5);
        assert!(matches!(attention_expansion_loss(&t(&[0, 2, 2], 0.0)), Err(Error::Argument(_))));
    }

    #[test]
    fn classifier_closed_forms() {
        let uniform = t(&[3, 2], 0.3);
        assert!((classifier_loss(&uniform, &[N, A, A]).unwrap() - 2f64.ln()).abs() < 1e-12);
        let confident = Tensor::from_vec(&[2, 2], vec![30.0, -30.0, -30.0, 30.0]).unwrap();
        assert!(classifier_loss(&confident, &[N, A]).unwrap() < 1e-12);
        let wrong = Tensor::from_vec(&[1, 2], vec![500.0, -500.0]).unwrap();
        let l = classifier_loss(&wrong, &[A]).unwrap();
        assert!(l.is_finite() && l > 10.0);
    }

    #[test]
    fn guided_attention_closed_forms() {
        let ones = t(&[1, 3, 3], 1.0);
        let zeros = t(&[1, 3, 3], 0.0);
        assert_eq!(complementary_guided_attention_loss(&ones, &zeros, &[N], &[N]).unwrap(), 0.0);
        assert_eq!(complementary_guided_attention_loss(&zeros, &ones, &[N], &[N]).unwrap(), 2.0);
        assert_eq!(complementary_guided_attention_loss(&zeros, &ones, &[A], &[N]).unwrap(), 0.0);
        assert_eq!(complementary_guided_attention_loss(&zeros, &ones, &[A], &[A]).unwrap(), 0.0);
        // gated images still count in the denominator
        let two_n = t(&[2, 3, 3], 0.0);
        let two_a = t(&[2, 3, 3], 1.0);
        assert_eq!(complementary_guided_attention_loss(&two_n, &two_a, &[N, A], &[N, N]).unwrap(), 1.0);
        assert!(matches!(
            complementary_guided_attention_loss(&two_n, &two_a, &[N], &[N]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn weighted_totals() {
        let w = LossWeights::unsupervised();
        assert!((total_unsupervised(2.0, 1.0, 0.5, &w) - 3.005).abs() < 1e-12);
        let w = LossWeights::weak();
        assert!((total_weak(1.0, 1.0, 2.0, 1.0, &w) - 2.012).abs() < 1e-12);
        let zero = LossWeights {
            w_r: 0.0,
            w_adv: 0.0,
            w_ae: 0.0,
            w_c: 0.0,
            w_cga: 0.0,
        };
        assert_eq!(total_unsupervised(2.0, 1.0, 0.5, &zero), 0.0);
        assert_eq!(total_weak(2.0, 1.0, 0.5, 3.0, &zero), 0.0);
        assert_eq!((w.w_r, w.w_adv, w.w_c, w.w_cga), (1.0, 1.0, 0.001, 0.01));
        let u = LossWeights::unsupervised();
        assert_eq!((u.w_r, u.w_adv, u.w_ae), (1.0, 1.0, 0.01));
        assert!(LossWeights { w_r: -1.0, ..u }.validate().is_err());
    }

    #[test]
    fn weighted_sum_graph_matches_scalar_form() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.constant(Tensor::scalar(1.0));
        let c = g.constant(Tensor::scalar(0.5));
        let w = LossWeights::unsupervised();
        let s = weighted_sum_graph(&mut g, &[(w.w_r, Some(a)), (w.w_adv, Some(b)), (w.w_ae, Some(c)), (1.0, None)]).unwrap();
        assert!((g.value(s).item() - 3.005).abs() < 1e-12);
    }
}
