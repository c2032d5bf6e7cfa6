//! Adam with bias correction and a piecewise-constant learning-rate decay.

use crate::error::{Error, Result};
use crate::tensor::{GradStore, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one slot per parameter, keyed by the
/// position of the parameter in the update call. The step counter is shared.
#[derive(Default)]
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u32,
}

impl AdamState {
    pub fn new() -> AdamState {
        AdamState::default()
    }

    pub fn step_count(&self) -> u32 {
        self.t
    }
}

/// One Adam update over all parameters. Each tensor in `params` is replaced
/// by a fresh tracked leaf holding the updated values; gradients are looked
/// up in `grads` by tensor identity.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &GradStore,
    state: &mut AdamState,
    lr: f32,
    hp: &AdamHyper,
) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Config("learning rate must be positive".into()));
    }
    if state.t == 0 {
        state.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
    } else if state.m.len() != params.len() {
        return Err(Error::Usage(format!(
            "optimizer state tracks {} parameters, got {}",
            state.m.len(),
            params.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - (hp.beta1 as f64).powi(state.t as i32);
    let bc2 = 1.0 - (hp.beta2 as f64).powi(state.t as i32);
    let (bc1, bc2) = (bc1 as f32, bc2 as f32);
    for (slot, param) in params.iter_mut().enumerate() {
        let g = grads.grad(param)?;
        let m = &mut state.m[slot];
        let v = &mut state.v[slot];
        if m.len() != param.numel() {
            return Err(Error::Usage(format!(
                "optimizer slot {slot} sized for {} values, parameter has {}",
                m.len(),
                param.numel()
            )));
        }
        let mut next = param.to_vec();
        for i in 0..next.len() {
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            next[i] -= lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
        **param = Tensor::var(param.shape().clone(), next)?;
    }
    Ok(())
}

/// Learning rate for a 1-based epoch: the base rate divided by 10 after
/// each milestone epoch completes.
pub fn lr_at_epoch(base: f32, milestones: &[usize], epoch: usize) -> f32 {
    let drops = milestones.iter().filter(|&&m| m < epoch).count();
    base * 0.1f32.powi(drops as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_of(loss: &Tensor) -> GradStore {
        loss.backward().unwrap()
    }

    #[test]
    fn first_step_magnitude_is_closed_form() {
        let hp = AdamHyper::default();
        let lr = 0.01;
        for g0 in [3.0f32, -0.25, 1e-6] {
            let mut p = Tensor::var([1], vec![0.5]).unwrap();
            let loss = p.mul_scalar(g0).unwrap().sum_all().unwrap();
            let grads = grad_of(&loss);
            let mut state = AdamState::new();
            adam_step(&mut [&mut p], &grads, &mut state, lr, &hp).unwrap();
            let delta = p.data()[0] - 0.5;
            let expect = -lr * g0 / (g0.abs() + hp.eps);
            assert!(
                (delta - expect).abs() <= 1e-6 * expect.abs().max(1e-6),
                "g={g0}: delta {delta} vs {expect}"
            );
        }
    }

    #[test]
    fn quadratic_converges_to_target() {
        let hp = AdamHyper::default();
        let target = [0.3f32, -1.2, 2.0];
        let mut p = Tensor::var([3], vec![0.0, 0.0, 0.0]).unwrap();
        let mut state = AdamState::new();
        for _ in 0..800 {
            let c = Tensor::new([3], target.to_vec()).unwrap();
            let loss = p.sub(&c).unwrap().square().unwrap().sum_all().unwrap();
            let grads = grad_of(&loss);
            adam_step(&mut [&mut p], &grads, &mut state, 0.05, &hp).unwrap();
        }
        for (got, want) in p.data().iter().zip(target) {
            assert!((got - want).abs() < 1e-2, "got {got}, want {want}");
        }
        assert_eq!(state.step_count(), 800);
    }

    #[test]
    fn updated_parameters_stay_tracked() {
        let hp = AdamHyper::default();
        let mut p = Tensor::var([2], vec![1.0, 2.0]).unwrap();
        let loss = p.square().unwrap().sum_all().unwrap();
        let grads = grad_of(&loss);
        let mut state = AdamState::new();
        adam_step(&mut [&mut p], &grads, &mut state, 0.1, &hp).unwrap();
        assert!(p.requires_grad());
        assert!(p.is_leaf());
    }

    #[test]
    fn parameter_count_is_pinned_after_first_step() {
        let hp = AdamHyper::default();
        let mut a = Tensor::var([1], vec![1.0]).unwrap();
        let mut b = Tensor::var([1], vec![2.0]).unwrap();
        let loss = a.add(&b).unwrap().sum_all().unwrap();
        let grads = grad_of(&loss);
        let mut state = AdamState::new();
        adam_step(&mut [&mut a, &mut b], &grads, &mut state, 0.1, &hp).unwrap();
        let loss = a.sum_all().unwrap();
        let grads = grad_of(&loss);
        let err = adam_step(&mut [&mut a], &grads, &mut state, 0.1, &hp);
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let hp = AdamHyper::default();
        let mut a = Tensor::var([1], vec![1.0]).unwrap();
        let mut b = Tensor::var([1], vec![2.0]).unwrap();
        let loss = a.sum_all().unwrap();
        let grads = grad_of(&loss);
        let mut state = AdamState::new();
        assert!(adam_step(&mut [&mut a, &mut b], &grads, &mut state, 0.1, &hp).is_err());
    }

    #[test]
    fn schedule_decays_after_each_milestone() {
        let base = 1e-4f32;
        let ms = [30usize, 60];
        assert_eq!(lr_at_epoch(base, &ms, 1), base);
        assert_eq!(lr_at_epoch(base, &ms, 30), base);
        let e31 = lr_at_epoch(base, &ms, 31);
        assert!((e31 - 1e-5).abs() < 1e-12);
        let e60 = lr_at_epoch(base, &ms, 60);
        assert!((e60 - 1e-5).abs() < 1e-12);
        let e61 = lr_at_epoch(base, &ms, 61);
        assert!((e61 - 1e-6).abs() < 1e-12);
    }

    #[test]
    fn schedule_without_milestones_is_constant() {
        assert_eq!(lr_at_epoch(0.01, &[], 999), 0.01);
    }
}
