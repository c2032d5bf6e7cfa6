//! Training and defense orchestration: classifier and purifier training
//! loops, threshold calibration, detection, routed classification, and the
//! summary statistics the reports are built from.

use crate::attack::{run_attack, AdversarialBatch, AttackSpec};
use crate::data::{seeded_rng, Dataset};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossWeights};
use crate::models::{classify, predictions, purify, ClassifierSNN, NeSNN, RecSNN};
use crate::optim::{adam_step, lr_at_epoch, AdamHyper, AdamState};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;

/// Shared training-loop settings. Milestones are 1-based epochs after which
/// the learning rate drops by 10x; they must be strictly increasing and lie
/// strictly below the epoch count.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub milestones: Vec<usize>,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, lr: f32, milestones: Vec<usize>) -> Result<TrainConfig> {
        if epochs == 0 || batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        for pair in milestones.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::Config(format!(
                    "milestones must be strictly increasing, got {milestones:?}"
                )));
            }
        }
        if let Some(&last) = milestones.last() {
            if last >= epochs {
                return Err(Error::Config(format!(
                    "milestone {last} must lie below the epoch count {epochs}"
                )));
            }
        }
        if milestones.first().is_some_and(|&m| m == 0) {
            return Err(Error::Config("milestones are 1-based epochs, 0 is invalid".into()));
        }
        Ok(TrainConfig {
            epochs,
            batch_size,
            lr,
            milestones,
        })
    }
}

/// Ground-truth per-pixel noise level of an attacked batch: the magnitude
/// of the realized perturbation.
pub fn noise_level_maps(batch: &AdversarialBatch) -> Result<Tensor> {
    batch.n_real.abs()
}

fn divergence(err: Error, epoch: usize, step: usize) -> Error {
    match err {
        Error::NonFinite(op) => Error::Diverged {
            epoch,
            step,
            msg: format!("non-finite value produced by {op}"),
        },
        other => other,
    }
}

fn epoch_batches(n: usize, batch_size: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Supervised classifier training with cross-entropy over time-averaged
/// logits. Returns the mean batch loss per epoch.
pub fn train_classifier(
    model: &mut ClassifierSNN,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<f32>> {
    if data.is_empty() {
        return Err(Error::Usage("cannot train on an empty dataset".into()));
    }
    let hp = AdamHyper::default();
    let mut state = AdamState::new();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = lr_at_epoch(cfg.lr, &cfg.milestones, epoch);
        let mut shuffle_rng = seeded_rng(seed, "classifier-shuffle", epoch as u64);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for (step, idx) in epoch_batches(data.len(), cfg.batch_size, &mut shuffle_rng)
            .into_iter()
            .enumerate()
        {
            let (x, labels) = data.batch(&idx)?;
            let loss = (|| {
                let logits = classify(model, &x, model.t_steps)?;
                logits.cross_entropy_logits(&labels)
            })()
            .map_err(|e| divergence(e, epoch, step + 1))?;
            total += loss.item()? as f64;
            batches += 1;
            let grads = loss.backward().map_err(|e| divergence(e, epoch, step + 1))?;
            let mut params = model.params_mut();
            adam_step(&mut params, &grads, &mut state, lr, &hp)?;
        }
        curve.push((total / batches as f64) as f32);
    }
    Ok(curve)
}

/// Joint purifier training. Every epoch re-attacks each batch with the
/// configured attack against the (frozen) classifier, supervises the
/// estimator on the realized perturbation magnitudes and the reconstructor
/// on the clean pixels, and updates both networks with one optimizer.
/// Returns the mean batch loss per epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_purifier(
    ne: &mut NeSNN,
    rec: &mut RecSNN,
    classifier: &ClassifierSNN,
    data: &Dataset,
    cfg: &TrainConfig,
    attack: &AttackSpec,
    weights: &LossWeights,
    seed: u64,
) -> Result<Vec<f32>> {
    if data.is_empty() {
        return Err(Error::Usage("cannot train on an empty dataset".into()));
    }
    let hp = AdamHyper::default();
    let mut state = AdamState::new();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = lr_at_epoch(cfg.lr, &cfg.milestones, epoch);
        let mut shuffle_rng = seeded_rng(seed, "purifier-shuffle", epoch as u64);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for (step, idx) in epoch_batches(data.len(), cfg.batch_size, &mut shuffle_rng)
            .into_iter()
            .enumerate()
        {
            let (x_clean, labels) = data.batch(&idx)?;
            let stream = ((epoch as u64) << 32) | step as u64;
            let mut attack_rng = seeded_rng(seed, "purifier-attack", stream);
            let loss = (|| {
                let adv = run_attack(attack, classifier, &x_clean, &labels, &mut attack_rng)?;
                let sigma_real = noise_level_maps(&adv)?;
                let out = purify(ne, rec, &adv.x_adv)?;
                total_loss(&out.x_hat, &x_clean, &out.sigma_hat, &sigma_real, weights)
            })()
            .map_err(|e| divergence(e, epoch, step + 1))?;
            total += loss.item()? as f64;
            batches += 1;
            let grads = loss.backward().map_err(|e| divergence(e, epoch, step + 1))?;
            let mut params = ne.params_mut();
            params.extend(rec.params_mut());
            adam_step(&mut params, &grads, &mut state, lr, &hp)?;
        }
        curve.push((total / batches as f64) as f32);
    }
    Ok(curve)
}

/// Per-image L-infinity distance between two equally shaped batches.
pub fn linf_per_image(a: &Tensor, b: &Tensor) -> Result<Vec<f32>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "linf distance needs equal shapes, got {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    let (n, c, h, w) = a.shape().dims4()?;
    let plane = c * h * w;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut m = 0.0f32;
        for j in i * plane..(i + 1) * plane {
            m = m.max((a.data()[j] - b.data()[j]).abs());
        }
        out.push(m);
    }
    Ok(out)
}

/// How far purification moved each image: the detector's raw score.
pub fn purification_scores(ne: &NeSNN, rec: &RecSNN, x: &Tensor) -> Result<Vec<f32>> {
    let out = purify(ne, rec, x)?;
    linf_per_image(x, &out.x_hat)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionConfig {
    pub threshold: f32,
}

impl DetectionConfig {
    pub fn new(threshold: f32) -> Result<DetectionConfig> {
        if !(threshold > 0.0) || !threshold.is_finite() {
            return Err(Error::Config("detection threshold must be positive".into()));
        }
        Ok(DetectionConfig { threshold })
    }

    /// Strict exceedance: a score equal to the threshold is not flagged.
    pub fn flags(&self, score: f32) -> bool {
        score > self.threshold
    }
}

#[derive(Clone, Debug)]
pub struct DetectionVerdict {
    pub index: usize,
    pub score: f32,
    pub flagged: bool,
}

/// Score a batch and flag images whose purification distance exceeds the
/// threshold.
pub fn detect(
    ne: &NeSNN,
    rec: &RecSNN,
    x: &Tensor,
    cfg: &DetectionConfig,
) -> Result<Vec<DetectionVerdict>> {
    let scores = purification_scores(ne, rec, x)?;
    Ok(scores
        .iter()
        .enumerate()
        .map(|(index, &score)| DetectionVerdict {
            index,
            score,
            flagged: cfg.flags(score),
        })
        .collect())
}

/// Nearest-rank quantile: the smallest element with at least a `q` fraction
/// of the sample at or below it.
pub fn nearest_rank_quantile(scores: &[f32], q: f32) -> Result<f32> {
    if scores.is_empty() {
        return Err(Error::Usage("quantile of an empty sample".into()));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Config("quantile must lie in (0,1]".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = ((q as f64) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.max(1) - 1])
}

/// Calibrate the detector on clean data: the threshold is the given
/// quantile of clean purification scores, so roughly a `1-q` fraction of
/// clean images will be falsely flagged.
pub fn calibrate_threshold(
    ne: &NeSNN,
    rec: &RecSNN,
    clean: &Tensor,
    quantile: f32,
) -> Result<DetectionConfig> {
    let scores = purification_scores(ne, rec, clean)?;
    DetectionConfig::new(nearest_rank_quantile(&scores, quantile)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DefenseMode {
    /// Classify the purified image unconditionally.
    AlwaysPurify,
    /// Classify the purified image only when the detector flags the input.
    DetectAndRoute,
}

#[derive(Clone, Debug)]
pub struct DefendedPrediction {
    pub verdict: DetectionVerdict,
    pub routed: bool,
    pub predicted: usize,
}

/// Classify a batch behind the defense. Both the raw and the purified
/// logits are computed; the routing decision picks per image which one the
/// final prediction comes from.
pub fn defended_classify(
    classifier: &ClassifierSNN,
    ne: &NeSNN,
    rec: &RecSNN,
    x: &Tensor,
    cfg: &DetectionConfig,
    mode: DefenseMode,
) -> Result<Vec<DefendedPrediction>> {
    let out = purify(ne, rec, x)?;
    let scores = linf_per_image(x, &out.x_hat)?;
    let plain = predictions(&classify(classifier, x, classifier.t_steps)?)?;
    let pure = predictions(&classify(classifier, &out.x_hat, classifier.t_steps)?)?;
    Ok(scores
        .iter()
        .enumerate()
        .map(|(index, &score)| {
            let flagged = cfg.flags(score);
            let routed = match mode {
                DefenseMode::AlwaysPurify => true,
                DefenseMode::DetectAndRoute => flagged,
            };
            DefendedPrediction {
                verdict: DetectionVerdict {
                    index,
                    score,
                    flagged,
                },
                routed,
                predicted: if routed { pure[index] } else { plain[index] },
            }
        })
        .collect())
}

/// Fraction of correct undefended predictions.
pub fn accuracy(classifier: &ClassifierSNN, x: &Tensor, labels: &[usize]) -> Result<f32> {
    let preds = predictions(&classify(classifier, x, classifier.t_steps)?)?;
    if preds.len() != labels.len() {
        return Err(Error::Usage("label count does not match batch".into()));
    }
    if preds.is_empty() {
        return Err(Error::Usage("accuracy of an empty batch".into()));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f32 / preds.len() as f32)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistogramBin {
    pub low: f32,
    pub high: f32,
    pub count: usize,
}

/// Histogram of detector scores. With an attack the batch is perturbed
/// first (using the classifier as gradient source); without one the clean
/// scores are binned. An empty batch yields zero counts over [0,1].
#[allow(clippy::too_many_arguments)]
pub fn linf_histogram(
    classifier: &ClassifierSNN,
    ne: &NeSNN,
    rec: &RecSNN,
    x: &Tensor,
    labels: &[usize],
    attack: Option<&AttackSpec>,
    bins: usize,
    rng: &mut impl rand::Rng,
) -> Result<Vec<HistogramBin>> {
    if bins < 2 {
        return Err(Error::Config("histogram needs at least 2 bins".into()));
    }
    let n = x.shape().dims()[0];
    if n == 0 {
        return Ok(bin_scores(&[], bins));
    }
    let scores = match attack {
        Some(spec) => {
            let adv = run_attack(spec, classifier, x, labels, rng)?;
            purification_scores(ne, rec, &adv.x_adv)?
        }
        None => purification_scores(ne, rec, x)?,
    };
    Ok(bin_scores(&scores, bins))
}

pub fn bin_scores(scores: &[f32], bins: usize) -> Vec<HistogramBin> {
    // bins always start at zero: the scores are L-infinity distances
    let max = scores.iter().fold(0.0f32, |a, &b| a.max(b));
    let hi = if scores.is_empty() || max <= 0.0 { 1.0 } else { max };
    let width = hi / bins as f32;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            low: width * i as f32,
            high: if i + 1 == bins { hi } else { width * (i + 1) as f32 },
            count: 0,
        })
        .collect();
    for &s in scores {
        let mut b = (s / width) as usize;
        if b >= bins {
            b = bins - 1;
        }
        out[b].count += 1;
    }
    out
}

/// Peak signal-to-noise ratio between two [0,1] batches, in dB. Identical
/// inputs give infinity.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f32> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "psnr needs equal shapes, got {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    if a.numel() == 0 {
        return Err(Error::Usage("psnr of empty tensors".into()));
    }
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f32::INFINITY);
    }
    Ok((10.0 * (1.0 / mse).log10()) as f32)
}
