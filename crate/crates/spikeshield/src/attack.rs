//! White-box evasion attacks under an L-infinity budget, plus a Gaussian
//! noise baseline. Every attack returns the perturbed batch together with
//! the realized per-pixel perturbation after clamping, which downstream
//! training uses as the ground-truth noise map.

use crate::error::{Error, Result};
use crate::models::ClassifierSNN;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::Distribution;
use std::collections::BTreeMap;
use std::fmt;

/// Anything that can report the gradient of its classification loss with
/// respect to pixels. Implemented by the spiking classifier; tests use
/// scripted stand-ins.
pub trait GradientSource {
    fn input_gradient(&self, x: &Tensor, labels: &[usize]) -> Result<Tensor>;
}

impl GradientSource for ClassifierSNN {
    fn input_gradient(&self, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let leaf = x.detach_var();
        let logits = crate::models::classify(self, &leaf, self.t_steps)?;
        let loss = logits.cross_entropy_logits(labels)?;
        let grads = loss.backward()?;
        Tensor::new(x.shape().clone(), grads.grad(&leaf)?.to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackKind {
    Gaussian,
    Fgsm,
    Ifgsm,
    Mifgsm,
    Pgd,
}

/// A fully specified attack. Construct through the per-kind helpers or
/// [`AttackSpec::parse`]; both enforce the cross-field invariants.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub eps: f32,
    pub steps: usize,
    pub step_size: f32,
    pub momentum: f32,
    pub random_start: bool,
    pub noise_std: f32,
}

pub const DEFAULT_EPS: f32 = 8.0 / 255.0;
pub const DEFAULT_ALPHA: f32 = 2.0 / 255.0;
pub const DEFAULT_STEPS: usize = 10;

impl AttackSpec {
    pub fn gaussian(noise_std: f32) -> Result<AttackSpec> {
        if !(noise_std > 0.0) || !noise_std.is_finite() {
            return Err(Error::Config("gaussian noise_std must be positive".into()));
        }
        Ok(AttackSpec {
            kind: AttackKind::Gaussian,
            eps: 0.0,
            steps: 1,
            step_size: 0.0,
            momentum: 0.0,
            random_start: false,
            noise_std,
        })
    }

    pub fn fgsm(eps: f32) -> Result<AttackSpec> {
        check_eps(eps)?;
        Ok(AttackSpec {
            kind: AttackKind::Fgsm,
            eps,
            steps: 1,
            step_size: eps,
            momentum: 0.0,
            random_start: false,
            noise_std: 0.0,
        })
    }

    pub fn ifgsm(eps: f32, steps: usize, step_size: f32) -> Result<AttackSpec> {
        check_eps(eps)?;
        check_steps(steps, step_size)?;
        Ok(AttackSpec {
            kind: AttackKind::Ifgsm,
            eps,
            steps,
            step_size,
            momentum: 0.0,
            random_start: false,
            noise_std: 0.0,
        })
    }

    pub fn mifgsm(eps: f32, steps: usize, step_size: f32, momentum: f32) -> Result<AttackSpec> {
        check_eps(eps)?;
        check_steps(steps, step_size)?;
        if !(momentum >= 0.0) || !momentum.is_finite() {
            return Err(Error::Config("momentum must be non-negative".into()));
        }
        Ok(AttackSpec {
            kind: AttackKind::Mifgsm,
            eps,
            steps,
            step_size,
            momentum,
            random_start: false,
            noise_std: 0.0,
        })
    }

    pub fn pgd(eps: f32, steps: usize, step_size: f32, random_start: bool) -> Result<AttackSpec> {
        check_eps(eps)?;
        check_steps(steps, step_size)?;
        Ok(AttackSpec {
            kind: AttackKind::Pgd,
            eps,
            steps,
            step_size,
            momentum: 0.0,
            random_start,
            noise_std: 0.0,
        })
    }

    /// Parse the textual form used in configs and reports, e.g.
    /// `fgsm(eps=16/255)` or `pgd(eps=8/255,steps=10,alpha=2/255)`.
    /// Omitted arguments fall back to the evaluation defaults.
    pub fn parse(text: &str) -> Result<AttackSpec> {
        let text = text.trim();
        let (name, args) = match text.split_once('(') {
            Some((name, rest)) => {
                let inner = rest
                    .strip_suffix(')')
                    .ok_or_else(|| Error::Config(format!("attack {text:?}: missing ')'")))?;
                (name.trim(), inner)
            }
            None => (text, ""),
        };
        let mut kv = BTreeMap::new();
        for part in args.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("attack argument {part:?} is not key=value")))?;
            if kv.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("attack argument {} repeated", k.trim())));
            }
        }
        let mut num = |key: &str, default: f32| -> Result<f32> {
            match kv.remove(key) {
                Some(v) => parse_ratio(&v),
                None => Ok(default),
            }
        };
        let spec = match name {
            "gaussian" => AttackSpec::gaussian(num("std", DEFAULT_EPS)?)?,
            "fgsm" => AttackSpec::fgsm(num("eps", DEFAULT_EPS)?)?,
            "ifgsm" => {
                let eps = num("eps", DEFAULT_EPS)?;
                let alpha = num("alpha", DEFAULT_ALPHA)?;
                let steps = take_steps(&mut kv)?;
                AttackSpec::ifgsm(eps, steps, alpha)?
            }
            "mifgsm" => {
                let eps = num("eps", DEFAULT_EPS)?;
                let alpha = num("alpha", DEFAULT_ALPHA)?;
                let mu = num("mu", 1.0)?;
                let steps = take_steps(&mut kv)?;
                AttackSpec::mifgsm(eps, steps, alpha, mu)?
            }
            "pgd" => {
                let eps = num("eps", DEFAULT_EPS)?;
                let alpha = num("alpha", DEFAULT_ALPHA)?;
                let steps = take_steps(&mut kv)?;
                let rs = match kv.remove("random_start") {
                    Some(v) => match v.as_str() {
                        "true" => true,
                        "false" => false,
                        other => {
                            return Err(Error::Config(format!(
                                "random_start must be true or false, got {other:?}"
                            )))
                        }
                    },
                    None => false,
                };
                AttackSpec::pgd(eps, steps, alpha, rs)?
            }
            other => return Err(Error::Config(format!("unknown attack {other:?}"))),
        };
        if let Some(extra) = kv.keys().next() {
            return Err(Error::Config(format!(
                "attack {name}: unknown argument {extra:?}"
            )));
        }
        Ok(spec)
    }
}

fn take_steps(kv: &mut BTreeMap<String, String>) -> Result<usize> {
    match kv.remove("steps") {
        Some(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("steps must be an integer, got {v:?}"))),
        None => Ok(DEFAULT_STEPS),
    }
}

fn check_eps(eps: f32) -> Result<()> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::Config("eps must lie in (0,1]".into()));
    }
    Ok(())
}

fn check_steps(steps: usize, step_size: f32) -> Result<()> {
    if steps == 0 {
        return Err(Error::Config("steps must be >= 1".into()));
    }
    if !(step_size > 0.0 && step_size.is_finite()) {
        return Err(Error::Config("step size must be positive".into()));
    }
    Ok(())
}

/// Parse a plain decimal or an `a/b` ratio.
pub(crate) fn parse_ratio(s: &str) -> Result<f32> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once('/') {
        let num: f64 = a
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad ratio numerator {a:?}")))?;
        let den: f64 = b
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad ratio denominator {b:?}")))?;
        if den == 0.0 {
            return Err(Error::Config(format!("ratio {s:?} divides by zero")));
        }
        Ok((num / den) as f32)
    } else {
        s.parse()
            .map_err(|_| Error::Config(format!("bad number {s:?}")))
    }
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            AttackKind::Gaussian => write!(f, "gaussian(std={})", self.noise_std),
            AttackKind::Fgsm => write!(f, "fgsm(eps={})", self.eps),
            AttackKind::Ifgsm => write!(
                f,
                "ifgsm(eps={},steps={},alpha={})",
                self.eps, self.steps, self.step_size
            ),
            AttackKind::Mifgsm => write!(
                f,
                "mifgsm(eps={},steps={},alpha={},mu={})",
                self.eps, self.steps, self.step_size, self.momentum
            ),
            AttackKind::Pgd => write!(
                f,
                "pgd(eps={},steps={},alpha={},random_start={})",
                self.eps, self.steps, self.step_size, self.random_start
            ),
        }
    }
}

/// The perturbed batch plus the realized perturbation `x_adv - x` measured
/// after all clamping, so it is exactly what the model will see.
pub struct AdversarialBatch {
    pub x_adv: Tensor,
    pub n_real: Tensor,
    pub labels: Vec<usize>,
}

fn check_batch(x: &Tensor, labels: &[usize]) -> Result<usize> {
    let (n, ..) = x.shape().dims4()?;
    if labels.len() != n {
        return Err(Error::Usage(format!(
            "batch has {n} images but {} labels",
            labels.len()
        )));
    }
    if x.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Domain("attack input pixels must lie in [0,1]".into()));
    }
    Ok(n)
}

fn finish(x: &Tensor, adv: Vec<f32>, labels: &[usize]) -> Result<AdversarialBatch> {
    let n_real: Vec<f32> = adv.iter().zip(x.data()).map(|(a, o)| a - o).collect();
    Ok(AdversarialBatch {
        x_adv: Tensor::new(x.shape().clone(), adv)?,
        n_real: Tensor::new(x.shape().clone(), n_real)?,
        labels: labels.to_vec(),
    })
}

/// Additive Gaussian pixel noise, clamped to [0,1].
pub fn gaussian(
    x: &Tensor,
    labels: &[usize],
    noise_std: f32,
    rng: &mut impl Rng,
) -> Result<AdversarialBatch> {
    check_batch(x, labels)?;
    if !(noise_std > 0.0) {
        return Err(Error::Config("gaussian noise_std must be positive".into()));
    }
    let normal = rand_distr::Normal::new(0.0f32, noise_std)
        .map_err(|_| Error::Config("bad gaussian std".into()))?;
    let adv: Vec<f32> = x
        .data()
        .iter()
        .map(|&v| (v + normal.sample(rng)).clamp(0.0, 1.0))
        .collect();
    finish(x, adv, labels)
}

/// Project onto the eps-ball around the clean batch, then onto [0,1].
/// `o - eps` and `o + eps` are rounded values, so a clamped pixel can land
/// half an ulp outside the ball; nudge such pixels back toward the origin
/// until the realized difference fits. Feasibility holds in f32, not just
/// in exact arithmetic.
fn project(x0: &[f32], adv: &mut [f32], eps: f32) {
    for (a, &o) in adv.iter_mut().zip(x0) {
        *a = a.clamp(o - eps, o + eps).clamp(0.0, 1.0);
        while *a - o > eps {
            *a = (*a).next_down();
        }
        while o - *a > eps {
            *a = (*a).next_up();
        }
    }
}

fn ascent_step(adv: &mut [f32], grad: &[f32], step: f32) {
    for (a, &g) in adv.iter_mut().zip(grad) {
        let s = if g > 0.0 {
            1.0
        } else if g < 0.0 {
            -1.0
        } else {
            0.0
        };
        *a += step * s;
    }
}

/// Single-step sign ascent.
pub fn fgsm(
    source: &impl GradientSource,
    x: &Tensor,
    labels: &[usize],
    eps: f32,
) -> Result<AdversarialBatch> {
    check_batch(x, labels)?;
    check_eps(eps)?;
    let grad = source.input_gradient(x, labels)?;
    let mut adv = x.to_vec();
    ascent_step(&mut adv, grad.data(), eps);
    project(x.data(), &mut adv, eps);
    finish(x, adv, labels)
}

/// Iterated sign ascent with projection after every step.
pub fn ifgsm(
    source: &impl GradientSource,
    x: &Tensor,
    labels: &[usize],
    eps: f32,
    step_size: f32,
    steps: usize,
) -> Result<AdversarialBatch> {
    check_batch(x, labels)?;
    check_eps(eps)?;
    check_steps(steps, step_size)?;
    let adv = iterate(source, x, labels, eps, step_size, steps, 0.0, x.to_vec())?;
    finish(x, adv, labels)
}

/// Momentum variant: gradients are L1-normalized per image before entering
/// the running direction. With zero momentum it reproduces the iterated
/// attack exactly; a zero-gradient step leaves the direction decayed by mu.
pub fn mifgsm(
    source: &impl GradientSource,
    x: &Tensor,
    labels: &[usize],
    eps: f32,
    step_size: f32,
    steps: usize,
    momentum: f32,
) -> Result<AdversarialBatch> {
    check_batch(x, labels)?;
    check_eps(eps)?;
    check_steps(steps, step_size)?;
    if !(momentum >= 0.0) {
        return Err(Error::Config("momentum must be non-negative".into()));
    }
    let adv = iterate(source, x, labels, eps, step_size, steps, momentum, x.to_vec())?;
    finish(x, adv, labels)
}

/// Projected gradient descent: iterated ascent from an optional uniform
/// random start inside the eps-ball. Without the random start no random
/// numbers are drawn at all.
pub fn pgd(
    source: &impl GradientSource,
    x: &Tensor,
    labels: &[usize],
    eps: f32,
    step_size: f32,
    steps: usize,
    random_start: bool,
    rng: &mut impl Rng,
) -> Result<AdversarialBatch> {
    check_batch(x, labels)?;
    check_eps(eps)?;
    check_steps(steps, step_size)?;
    let mut start = x.to_vec();
    if random_start {
        for v in &mut start {
            *v += rng.random_range(-eps..=eps);
        }
        project(x.data(), &mut start, eps);
    }
    let adv = iterate(source, x, labels, eps, step_size, steps, 0.0, start)?;
    finish(x, adv, labels)
}

fn iterate(
    source: &impl GradientSource,
    x: &Tensor,
    labels: &[usize],
    eps: f32,
    step_size: f32,
    steps: usize,
    momentum: f32,
    start: Vec<f32>,
) -> Result<Vec<f32>> {
    let (_, c, h, w) = x.shape().dims4()?;
    let plane = c * h * w;
    let mut adv = start;
    let mut direction = vec![0.0f32; adv.len()];
    for _ in 0..steps {
        let current = Tensor::new(x.shape().clone(), adv.clone())?;
        let grad = source.input_gradient(&current, labels)?;
        if momentum == 0.0 {
            ascent_step(&mut adv, grad.data(), step_size);
        } else {
            for (img, g_img) in direction
                .chunks_mut(plane)
                .zip(grad.data().chunks(plane))
            {
                let l1: f32 = g_img.iter().map(|v| v.abs()).sum();
                for (d, &g) in img.iter_mut().zip(g_img) {
                    *d = momentum * *d + if l1 > 0.0 { g / l1 } else { 0.0 };
                }
            }
            ascent_step(&mut adv, &direction, step_size);
        }
        project(x.data(), &mut adv, eps);
    }
    Ok(adv)
}

/// Dispatch on an [`AttackSpec`]. The gradient source is unused for the
/// Gaussian baseline; the RNG is untouched unless the attack asks for
/// randomness.
pub fn run_attack(
    spec: &AttackSpec,
    source: &impl GradientSource,
    x: &Tensor,
    labels: &[usize],
    rng: &mut impl Rng,
) -> Result<AdversarialBatch> {
    match spec.kind {
        AttackKind::Gaussian => gaussian(x, labels, spec.noise_std, rng),
        AttackKind::Fgsm => fgsm(source, x, labels, spec.eps),
        AttackKind::Ifgsm => ifgsm(source, x, labels, spec.eps, spec.step_size, spec.steps),
        AttackKind::Mifgsm => mifgsm(
            source,
            x,
            labels,
            spec.eps,
            spec.step_size,
            spec.steps,
            spec.momentum,
        ),
        AttackKind::Pgd => pgd(
            source,
            x,
            labels,
            spec.eps,
            spec.step_size,
            spec.steps,
            spec.random_start,
            rng,
        ),
    }
}
