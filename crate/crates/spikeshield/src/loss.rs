//! Purifier training objective: Charbonnier + KL reconstruction terms, the
//! asymmetric noise-estimation penalty, a TV smoothness regularizer, and
//! their weighted total. All losses are scalar graph tensors, so gradients
//! flow back to the reconstruction and the noise map.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const KL_FLOOR: f32 = 1e-8;

/// Weights and shape parameters of the total objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_asymm: f32,
    pub lambda_tv: f32,
    /// Asymmetry knob in (0, 0.5): underestimates of the noise level cost
    /// (1-gamma), overestimates cost gamma.
    pub gamma: f32,
    pub eps_char: f32,
}

impl LossWeights {
    pub fn new(lambda_asymm: f32, lambda_tv: f32, gamma: f32, eps_char: f32) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 0.5) {
            return Err(Error::Config(format!(
                "gamma must lie in (0, 0.5), got {gamma}"
            )));
        }
        if lambda_asymm < 0.0 || lambda_tv < 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got lambda_asymm={lambda_asymm} lambda_tv={lambda_tv}"
            )));
        }
        if !(eps_char > 0.0) {
            return Err(Error::Config(format!(
                "eps_char must be positive, got {eps_char}"
            )));
        }
        Ok(LossWeights {
            lambda_asymm,
            lambda_tv,
            gamma,
            eps_char,
        })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_asymm: 0.5,
            lambda_tv: 0.05,
            gamma: 0.3,
            eps_char: 1e-3,
        }
    }
}

/// Smooth L1: mean of `sqrt((x_hat - x)^2 + eps_char^2)`.
pub fn charbonnier(x_hat: &Tensor, x: &Tensor, eps_char: f32) -> Result<Tensor> {
    if x_hat.shape() != x.shape() {
        return Err(Error::ShapeMismatch(format!(
            "charbonnier: {} vs {}",
            x_hat.shape(),
            x.shape()
        )));
    }
    let d = x_hat.sub(x)?;
    d.square()?.add_scalar(eps_char * eps_char)?.sqrt()?.mean_all()
}

/// KL divergence between per-image pixel-intensity distributions, mean over
/// the batch. Each image is shifted by a small floor and normalized to sum
/// to one, so the result is defined for any non-negative input.
pub fn kl_divergence(x_hat: &Tensor, x: &Tensor) -> Result<Tensor> {
    if x_hat.shape() != x.shape() {
        return Err(Error::ShapeMismatch(format!(
            "kl_divergence: {} vs {}",
            x_hat.shape(),
            x.shape()
        )));
    }
    let (_, c, h, w) = x_hat.shape().dims4()?;
    let p = per_image_distribution(x_hat, c, h, w)?;
    let q = per_image_distribution(x, c, h, w)?;
    let log_ratio = p.log()?.sub(&q.log()?)?;
    p.mul(&log_ratio)?.sum_per_image()?.mean_all()
}

fn per_image_distribution(x: &Tensor, c: usize, h: usize, w: usize) -> Result<Tensor> {
    let shifted = x.add_scalar(KL_FLOOR)?;
    let norm = shifted.sum_per_image()?.expand_per_image(c, h, w)?;
    shifted.div(&norm)
}

/// Asymmetric squared error on the noise-level map: each element pays
/// `|gamma - 1[sigma_hat < sigma]| * (sigma_hat - sigma)^2`, mean-reduced.
/// With gamma < 0.5 underestimation is the expensive direction.
pub fn asymmetric_loss(sigma_hat: &Tensor, sigma: &Tensor, gamma: f32) -> Result<Tensor> {
    if sigma_hat.shape() != sigma.shape() {
        return Err(Error::ShapeMismatch(format!(
            "asymmetric_loss: {} vs {}",
            sigma_hat.shape(),
            sigma.shape()
        )));
    }
    if !(gamma > 0.0 && gamma < 0.5) {
        return Err(Error::Config(format!(
            "gamma must lie in (0, 0.5), got {gamma}"
        )));
    }
    let under = sigma_hat.lt_mask(sigma)?;
    let weight = under.mul_scalar(-1.0)?.add_scalar(gamma)?.abs()?;
    let d = sigma_hat.sub(sigma)?;
    weight.mul(&d.square()?)?.mean_all()
}

/// Squared forward-difference smoothness penalty, normalized by the element
/// count of the map.
pub fn tv_regularizer(sigma_hat: &Tensor) -> Result<Tensor> {
    let horizontal = sigma_hat.diff_w()?.square()?.sum_all()?;
    let vertical = sigma_hat.diff_h()?.square()?.sum_all()?;
    horizontal
        .add(&vertical)?
        .mul_scalar(1.0 / sigma_hat.numel() as f32)
}

/// The full objective: reconstruction (Charbonnier + KL) plus weighted
/// asymmetric and TV terms.
pub fn total_loss(
    x_hat: &Tensor,
    x: &Tensor,
    sigma_hat: &Tensor,
    sigma: &Tensor,
    weights: &LossWeights,
) -> Result<Tensor> {
    let rec = charbonnier(x_hat, x, weights.eps_char)?.add(&kl_divergence(x_hat, x)?)?;
    let asym = asymmetric_loss(sigma_hat, sigma, weights.gamma)?;
    let tv = tv_regularizer(sigma_hat)?;
    rec.add(&asym.mul_scalar(weights.lambda_asymm)?)?
        .add(&tv.mul_scalar(weights.lambda_tv)?)
}
