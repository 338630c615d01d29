//! Anomaly scoring, detection, localization and the evaluation metrics.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionMap, CamTarget, Mask, LOCALIZATION_THRESHOLD};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{Label, Mode, Model};
use crate::tensor::Tensor;

/// Minimum number of normal scores accepted by [`calibrate`].
pub const MIN_CALIBRATION_SCORES: usize = 10;
/// Images per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 16;

/// Mean absolute per-pixel difference between an image (or batch) and its
/// reconstruction.
pub fn anomaly_score(x: &Tensor, xhat: &Tensor) -> Result<f64> {
    if x.shape() != xhat.shape() {
        return Err(Error::shape(format!("score: {:?} vs {:?}", x.shape(), xhat.shape())));
    }
    if x.is_empty() {
        return Err(Error::shape("score of an empty image"));
    }
    let total: f64 = x.data().iter().zip(xhat.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(total / x.len() as f64)
}

/// Per-image scores of a `(B,C,H,W)` batch against its reconstruction.
pub fn batch_scores(x: &Tensor, xhat: &Tensor) -> Result<Vec<f64>> {
    if x.shape() != xhat.shape() || x.shape().len() != 4 {
        return Err(Error::shape(format!("score: {:?} vs {:?}", x.shape(), xhat.shape())));
    }
    (0..x.dim(0))
        .map(|i| anomaly_score(&x.index_first(i), &xhat.index_first(i)))
        .collect()
}

/// Reconstruction scores through the deterministic latent mean, computed
/// in chunks.
pub fn reconstruction_scores<'a>(model: &Model, samples: impl IntoIterator<Item = &'a Sample>) -> Result<Vec<f64>> {
    let samples: Vec<&Sample> = samples.into_iter().collect();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let x = crate::data::stack_images(chunk.iter().copied())?;
        out.extend(batch_scores(&x, &model.reconstruct(&x)?)?);
    }
    Ok(out)
}

/// Linear map of raw scores onto `[0,1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreCalibration {
    pub s_min: f64,
    pub s_max: f64,
}

/// Linear-interpolated percentile, `q` in `[0,1]`, of sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `s_min` is the smallest normal score; `s_max` is twice the 99th
/// percentile, so a normalized score of 0.5 sits near the normal tail.
pub fn calibrate(normal_scores: &[f64]) -> Result<ScoreCalibration> {
    if normal_scores.len() < MIN_CALIBRATION_SCORES {
        return Err(Error::Calibration(format!(
            "need at least {MIN_CALIBRATION_SCORES} normal scores, got {}",
            normal_scores.len()
        )));
    }
    if normal_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Calibration("non-finite normal score".into()));
    }
    let mut sorted = normal_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let s_min = sorted[0];
    if sorted[sorted.len() - 1] == s_min {
        return Err(Error::Calibration(format!("all {} normal scores equal {s_min}", sorted.len())));
    }
    let s_max = 2.0 * percentile(&sorted, 0.99);
    if s_max <= s_min {
        return Err(Error::Calibration(format!("degenerate range [{s_min}, {s_max}]")));
    }
    Ok(ScoreCalibration { s_min, s_max })
}

/// `(s - s_min) / (s_max - s_min)` clipped to `[0,1]`.
pub fn normalize(s: f64, cal: &ScoreCalibration) -> f64 {
    ((s - cal.s_min) / (cal.s_max - cal.s_min)).clamp(0.0, 1.0)
}

/// Anomalous iff the normalized score strictly exceeds 0.5.
pub fn detect(s_norm: f64) -> Label {
    if s_norm > 0.5 {
        Label::Anomalous
    } else {
        Label::Normal
    }
}

/// Argmax of `(B,2)` logits; ties go to normal.
pub fn classifier_predictions(logits: &Tensor) -> Result<Vec<Label>> {
    if logits.shape().len() != 2 || logits.dim(1) != 2 {
        return Err(Error::shape(format!("expected (B,2) logits, got {:?}", logits.shape())));
    }
    Ok(logits
        .data()
        .chunks(2)
        .map(|r| if r[1] > r[0] { Label::Anomalous } else { Label::Normal })
        .collect())
}

/// Anomalous attention maps of a batch and their thresholded masks.
///
/// Unsupervised models use the inverted latent attention; weak models use
/// the anomalous-class attention.
pub fn localize(model: &Model, x: &Tensor, mode: Mode) -> Result<Vec<(AttentionMap, Mask)>> {
    if mode != model.config.mode {
        return Err(Error::Mode(format!(
            "requested {mode} localization from a {} checkpoint",
            model.config.mode
        )));
    }
    let maps = match mode {
        Mode::Unsupervised => attention::attention_maps(model, x, CamTarget::LatentSum)?
            .iter()
            .map(attention::invert)
            .collect(),
        Mode::Weak => attention::attention_maps(model, x, CamTarget::Class(Label::Anomalous))?,
    };
    maps.into_iter()
        .map(|m| {
            let mask = attention::threshold(&m, LOCALIZATION_THRESHOLD)?;
            Ok((m, mask))
        })
        .collect()
}

/// `|pred & gt| / |pred | gt|`; 1 when both masks are empty.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::shape(format!(
            "iou: {}x{} vs {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.bits.iter().zip(&gt.bits) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Area under the ROC curve via the rank-sum statistic: the probability
/// that a random positive outscores a random negative, ties counting half.
pub fn pixel_auroc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::shape(format!("{} scores for {} labels", scores.len(), positives.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Evaluation("NaN score".into()));
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Evaluation(format!(
            "AuROC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 1-based average ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| positives[k]).count();
        rank_sum += avg_rank * pos_in_tie as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Image-level AuROC where `scores` rank anomalousness.
pub fn image_auroc(labels: &[Label], scores: &[f64]) -> Result<f64> {
    let pos: Vec<bool> = labels.iter().map(|&l| l == Label::Anomalous).collect();
    pixel_auroc(scores, &pos)
}

/// Mean of the per-class accuracies.
pub fn balanced_accuracy(labels: &[Label], predictions: &[Label]) -> Result<f64> {
    if labels.len() != predictions.len() {
        return Err(Error::shape(format!("{} labels, {} predictions", labels.len(), predictions.len())));
    }
    let acc = |class: Label| -> Result<f64> {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.is_empty() {
            return Err(Error::Evaluation(format!("balanced accuracy needs {class:?} samples")));
        }
        Ok(idx.iter().filter(|&&i| predictions[i] == class).count() as f64 / idx.len() as f64)
    };
    Ok(0.5 * (acc(Label::Anomalous)? + acc(Label::Normal)?))
}

/// How pixel AuROC aggregates over images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AurocPooling {
    /// One ROC over the pixels of every test image.
    #[default]
    Pooled,
    /// Mean of per-image ROCs over anomalous images.
    PerImage,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub auroc_pooling: AurocPooling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub label: Label,
    pub s_a_raw: f64,
    pub s_a_norm: f64,
    pub predicted: Label,
    /// Present for anomalous images.
    pub iou: Option<f64>,
    /// Fraction of pixels in the predicted mask.
    pub mask_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_images: usize,
    pub n_anomalous: usize,
    pub mean_iou: f64,
    pub pixel_auroc: f64,
    pub balanced_accuracy: f64,
    /// Ranks images by normalized score (unsupervised) or classifier
    /// probability (weak).
    pub image_auroc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    pub rows: Vec<EvalRow>,
    pub summary: EvalSummary,
}

fn softmax_anomalous(logits: &Tensor) -> Vec<f64> {
    logits
        .data()
        .chunks(2)
        .map(|r| {
            let m = r[0].max(r[1]);
            let (a, b) = ((r[0] - m).exp(), (r[1] - m).exp());
            b / (a + b)
        })
        .collect()
}

/// Scores, detects and localizes every test sample on the latent mean path.
pub fn evaluate(model: &Model, cal: &ScoreCalibration, test: &[Sample], opts: &EvalOptions) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Evaluation("empty test set".into()));
    }
    if let Some(s) = test.iter().find(|s| s.label == Label::Anomalous && s.mask.is_none()) {
        return Err(Error::Evaluation(format!("anomalous test image {} has no mask", s.id)));
    }
    let mode = model.config.mode;
    let mut rows = Vec::with_capacity(test.len());
    let mut rank_scores = Vec::with_capacity(test.len());
    let mut pixel_scores = Vec::new();
    let mut pixel_truth = Vec::new();
    let mut per_image_auroc = Vec::new();
    for chunk in test.chunks(EVAL_CHUNK) {
        let x = crate::data::stack_images(chunk)?;
        let state = model.encode(&x)?;
        let xhat = model.decode(&state.z)?;
        let raw = batch_scores(&x, &xhat)?;
        let (predicted, ranks): (Vec<Label>, Vec<f64>) = match mode {
            Mode::Unsupervised => {
                let norm: Vec<f64> = raw.iter().map(|&s| normalize(s, cal)).collect();
                (norm.iter().map(|&s| detect(s)).collect(), norm)
            }
            Mode::Weak => {
                let logits = model.classify(&state)?;
                (classifier_predictions(&logits)?, softmax_anomalous(&logits))
            }
        };
        let located = localize(model, &x, mode)?;
        for (i, s) in chunk.iter().enumerate() {
            let (map, mask) = &located[i];
            let gt = s.mask.clone().unwrap_or_else(|| Mask::empty(mask.height, mask.width));
            let iou_v = if s.label == Label::Anomalous { Some(iou(mask, &gt)?) } else { None };
            if s.label == Label::Anomalous && opts.auroc_pooling == AurocPooling::PerImage && !gt.is_empty() && gt.count() < gt.bits.len() {
                per_image_auroc.push(pixel_auroc(map.data(), &gt.bits)?);
            }
            pixel_scores.extend_from_slice(map.data());
            pixel_truth.extend_from_slice(&gt.bits);
            rows.push(EvalRow {
                id: s.id.clone(),
                label: s.label,
                s_a_raw: raw[i],
                s_a_norm: normalize(raw[i], cal),
                predicted: predicted[i],
                iou: iou_v,
                mask_fraction: mask.fraction(),
            });
            rank_scores.push(ranks[i]);
        }
    }
    let labels: Vec<Label> = rows.iter().map(|r| r.label).collect();
    let preds: Vec<Label> = rows.iter().map(|r| r.predicted).collect();
    let ious: Vec<f64> = rows.iter().filter_map(|r| r.iou).collect();
    let pixel = match opts.auroc_pooling {
        AurocPooling::Pooled => pixel_auroc(&pixel_scores, &pixel_truth)?,
        AurocPooling::PerImage => mean(&per_image_auroc)
            .ok_or_else(|| Error::Evaluation("no anomalous image with both pixel classes".into()))?,
    };
    let summary = EvalSummary {
        n_images: rows.len(),
        n_anomalous: ious.len(),
        mean_iou: mean(&ious).ok_or_else(|| Error::Evaluation("no anomalous test images".into()))?,
        pixel_auroc: pixel,
        balanced_accuracy: balanced_accuracy(&labels, &preds)?,
        image_auroc: image_auroc(&labels, &rank_scores)?,
    };
    Ok(EvalReport { mode, rows, summary })
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl EvalReport {
    /// Recomputes mean IoU and balanced accuracy from the rows.
    pub fn recompute(&self) -> Result<(f64, f64)> {
        let ious: Vec<f64> = self.rows.iter().filter_map(|r| r.iou).collect();
        let labels: Vec<Label> = self.rows.iter().map(|r| r.label).collect();
        let preds: Vec<Label> = self.rows.iter().map(|r| r.predicted).collect();
        Ok((
            mean(&ious).ok_or_else(|| Error::Evaluation("no IoU rows".into()))?,
            balanced_accuracy(&labels, &preds)?,
        ))
    }

    pub fn summary_table(&self) -> String {
        let s = &self.summary;
        let mut out = String::new();
        let _ = writeln!(out, "mode               {}", self.mode);
        let _ = writeln!(out, "images             {} ({} anomalous)", s.n_images, s.n_anomalous);
        let _ = writeln!(out, "mean IoU           {:.4}", s.mean_iou);
        let _ = writeln!(out, "pixel AuROC        {:.4}", s.pixel_auroc);
        let _ = writeln!(out, "balanced accuracy  {:.4}", s.balanced_accuracy);
        let _ = writeln!(out, "image AuROC        {:.4}", s.image_auroc);
        out
    }

    /// Writes `eval.jsonl` (one row per image), `summary.json` and
    /// `summary.txt` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut f = fs::File::create(dir.join("eval.jsonl"))?;
        for r in &self.rows {
            writeln!(f, "{}", serde_json::to_string(r).map_err(|e| Error::Evaluation(e.to_string()))?)?;
        }
        let summary = serde_json::to_string_pretty(&self.summary).map_err(|e| Error::Evaluation(e.to_string()))?;
        fs::write(dir.join("summary.json"), summary + "\n")?;
        fs::write(dir.join("summary.txt"), self.summary_table())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_examples() {
        let ones = Tensor::ones(&[1, 2, 2]);
        assert_eq!(anomaly_score(&ones, &ones).unwrap(), 0.0);
        assert_eq!(anomaly_score(&ones, &Tensor::zeros(&[1, 2, 2])).unwrap(), 1.0);
        let half = Tensor::from_vec(&[1, 2, 2], vec![1.0, 1.0, 0.5, 0.5]).unwrap();
        assert!((anomaly_score(&ones, &half).unwrap() - 0.25).abs() < 1e-15);
        assert!(anomaly_score(&ones, &Tensor::ones(&[1, 2, 3])).is_err());
    }

    #[test]
    fn calibration_examples() {
        let normals: Vec<f64> = (0..11).map(|i| 0.01 + 0.001 * i as f64).collect();
        let cal = calibrate(&normals).unwrap();
        assert_eq!(cal.s_min, 0.01);
        // p99 of 0.010..0.020 by linear interpolation is 0.0199.
        assert!((cal.s_max - 2.0 * 0.0199).abs() < 1e-12);
        assert_eq!(normalize(cal.s_min, &cal), 0.0);
        assert_eq!(normalize(1.0, &cal), 1.0);
        let s = normalize(0.05, &cal);
        // (0.05 - 0.01) / (0.0398 - 0.01) = 1.34, clipped.
        assert_eq!(s, 1.0);
        assert!((normalize(0.02, &cal) - 0.01 / 0.0298).abs() < 1e-12);
        assert_eq!(detect(s), Label::Anomalous);
        assert!(matches!(calibrate(&[0.1; 12]), Err(Error::Calibration(_))));
        assert!(matches!(calibrate(&normals[..9]), Err(Error::Calibration(_))));
    }

    #[test]
    fn detection_tie_rule() {
        assert_eq!(detect(0.6), Label::Anomalous);
        assert_eq!(detect(0.4), Label::Normal);
        assert_eq!(detect(0.5), Label::Normal);
    }

    #[test]
    fn metric_examples() {
        let m = |bits: &[u8]| Mask::new(1, bits.len(), bits.iter().map(|&b| b == 1).collect()).unwrap();
        assert_eq!(iou(&m(&[1, 1, 0, 0]), &m(&[1, 1, 0, 0])).unwrap(), 1.0);
        assert_eq!(iou(&m(&[1, 1, 0, 0]), &m(&[0, 0, 1, 1])).unwrap(), 0.0);
        let v = iou(&m(&[1, 1, 1, 1, 0, 0]), &m(&[0, 0, 1, 1, 1, 1])).unwrap();
        assert!((v - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(iou(&m(&[0, 0]), &m(&[0, 0])).unwrap(), 1.0);

        assert_eq!(pixel_auroc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(pixel_auroc(&[0.9, 0.2, 0.8, 0.1], &[true, true, false, false]).unwrap(), 0.75);
        assert_eq!(pixel_auroc(&[0.3; 6], &[true, false, true, false, false, false]).unwrap(), 0.5);
        assert!(pixel_auroc(&[0.1, 0.2], &[true, true]).is_err());

        use Label::{Anomalous as A, Normal as N};
        assert_eq!(balanced_accuracy(&[A, N], &[A, N]).unwrap(), 1.0);
        let labels = [A, A, A, A, A, N, N, N, N, N];
        let preds = [A, A, A, A, N, N, N, N, A, A];
        assert!((balanced_accuracy(&labels, &preds).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(balanced_accuracy(&labels, &[A; 10]).unwrap(), 0.5);
    }

    #[test]
    fn classifier_argmax_ties_normal() {
        let logits = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 2.0, 1.0, 0.5, 0.5]).unwrap();
        assert_eq!(
            classifier_predictions(&logits).unwrap(),
            vec![Label::Anomalous, Label::Normal, Label::Normal]
        );
    }
}
