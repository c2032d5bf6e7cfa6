//! Spiking dynamics: LIF and multi-level-firing neurons, the rectangular
//! surrogate gradient, and temporal unrolling.
//!
//! Forward spikes are binary or small-integer counts; the backward pass sees
//! the rectangular surrogate window instead, recorded by the fire op itself.
//! Unrolling replays the whole membrane/reset recurrence on the graph, so
//! gradients flow through both layers and time, reset paths included.

use crate::error::{Error, Result};
use crate::tensor::{Op, Shape, Tensor};

/// Leaky integrate-and-fire neuron settings with hard reset to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LIFConfig {
    /// Membrane decay per step, in (0, 1].
    pub lambda_mem: f32,
    /// Firing threshold, > 0.
    pub theta: f32,
    /// Half-width of the rectangular surrogate window, > 0.
    pub surrogate_width: f32,
}

impl LIFConfig {
    pub fn new(lambda_mem: f32, theta: f32, surrogate_width: f32) -> Result<Self> {
        if !(lambda_mem > 0.0 && lambda_mem <= 1.0) {
            return Err(Error::Config(format!(
                "lambda_mem must be in (0,1], got {lambda_mem}"
            )));
        }
        if !(theta > 0.0) {
            return Err(Error::Config(format!("theta must be positive, got {theta}")));
        }
        if !(surrogate_width > 0.0) {
            return Err(Error::Config(format!(
                "surrogate_width must be positive, got {surrogate_width}"
            )));
        }
        Ok(LIFConfig {
            lambda_mem,
            theta,
            surrogate_width,
        })
    }
}

impl Default for LIFConfig {
    fn default() -> Self {
        LIFConfig {
            lambda_mem: 0.5,
            theta: 1.0,
            surrogate_width: 0.5,
        }
    }
}

/// Multi-level firing: a ladder of K thresholds at k*theta, emitting spike
/// counts in 0..=K per step, with a count-scaled soft reset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MLFConfig {
    pub levels: usize,
    pub lif: LIFConfig,
}

impl MLFConfig {
    pub fn new(levels: usize, lif: LIFConfig) -> Result<Self> {
        if levels == 0 {
            return Err(Error::Config("MLF needs at least one level".into()));
        }
        Ok(MLFConfig { levels, lif })
    }
}

impl Default for MLFConfig {
    fn default() -> Self {
        MLFConfig {
            levels: 2,
            lif: LIFConfig::default(),
        }
    }
}

/// Anything that fires through a threshold ladder.
pub trait FiringConfig {
    fn levels(&self) -> usize;
    fn theta(&self) -> f32;
    fn width(&self) -> f32;
}

impl FiringConfig for LIFConfig {
    fn levels(&self) -> usize {
        1
    }
    fn theta(&self) -> f32 {
        self.theta
    }
    fn width(&self) -> f32 {
        self.surrogate_width
    }
}

impl FiringConfig for MLFConfig {
    fn levels(&self) -> usize {
        self.levels
    }
    fn theta(&self) -> f32 {
        self.lif.theta
    }
    fn width(&self) -> f32 {
        self.lif.surrogate_width
    }
}

/// Per-layer state carried across timesteps: membrane and last output.
#[derive(Clone)]
pub struct SpikeState {
    pub u: Tensor,
    pub o: Tensor,
}

impl SpikeState {
    pub fn zeros(shape: impl Into<Shape>) -> SpikeState {
        let shape = shape.into();
        SpikeState {
            u: Tensor::zeros(shape.clone()),
            o: Tensor::zeros(shape),
        }
    }
}

impl Tensor {
    /// Threshold-ladder firing: counts thresholds k*theta (k = 1..=levels)
    /// reached by each element, boundary inclusive. Forward values are
    /// integers in 0..=levels; backward applies the rectangular surrogate
    /// `sum_k 1[|u - k*theta| <= width] / (2*width)`.
    pub fn fire_ladder(&self, levels: usize, theta: f32, width: f32) -> Result<Tensor> {
        if levels == 0 {
            return Err(Error::Config("fire_ladder needs at least one level".into()));
        }
        if !(theta > 0.0) {
            return Err(Error::Config(format!("fire_ladder: theta must be positive, got {theta}")));
        }
        if !(width > 0.0) {
            return Err(Error::Config(format!("fire_ladder: width must be positive, got {width}")));
        }
        let data = self
            .data()
            .iter()
            .map(|&u| {
                let mut count = 0u32;
                for k in 1..=levels {
                    if u >= k as f32 * theta {
                        count += 1;
                    }
                }
                count as f32
            })
            .collect();
        Tensor::from_op(
            self.shape().clone(),
            data,
            Op::FireLadder {
                membrane: self.clone(),
                levels,
                threshold: theta,
                width,
            },
            "fire_ladder",
        )
    }
}

/// One LIF step: decay-and-integrate, binary fire at theta, hard reset to
/// zero at fired positions. Returns the new state and the spike tensor.
pub fn lif_step(state: &SpikeState, input: &Tensor, cfg: &LIFConfig) -> Result<(SpikeState, Tensor)> {
    if state.u.shape() != input.shape() {
        return Err(Error::ShapeMismatch(format!(
            "lif_step: state {} vs input {}",
            state.u.shape(),
            input.shape()
        )));
    }
    let charged = state.u.axpy(cfg.lambda_mem, input)?;
    let spikes = charged.fire_ladder(1, cfg.theta, cfg.surrogate_width)?;
    let reset = charged.sub(&charged.mul(&spikes)?)?;
    Ok((
        SpikeState {
            u: reset,
            o: spikes.clone(),
        },
        spikes,
    ))
}

/// One MLF step: decay-and-integrate, ladder fire with output in 0..=K,
/// soft reset subtracting output*theta. K=1 is LIF with soft reset.
pub fn mlf_step(state: &SpikeState, input: &Tensor, cfg: &MLFConfig) -> Result<(SpikeState, Tensor)> {
    if state.u.shape() != input.shape() {
        return Err(Error::ShapeMismatch(format!(
            "mlf_step: state {} vs input {}",
            state.u.shape(),
            input.shape()
        )));
    }
    let charged = state.u.axpy(cfg.lif.lambda_mem, input)?;
    let out = charged.fire_ladder(cfg.levels, cfg.lif.theta, cfg.lif.surrogate_width)?;
    let reset = charged.sub_scaled(&out, cfg.lif.theta)?;
    Ok((
        SpikeState {
            u: reset,
            o: out.clone(),
        },
        out,
    ))
}

/// The backward window of the fire nonlinearity, evaluated standalone:
/// `sum_k 1[|u - k*theta| <= width] / (2*width)`. Returns an untracked map.
pub fn surrogate_grad(u: &Tensor, cfg: &impl FiringConfig) -> Result<Tensor> {
    let scale = 1.0 / (2.0 * cfg.width());
    let (levels, theta, width) = (cfg.levels(), cfg.theta(), cfg.width());
    let data = u
        .data()
        .iter()
        .map(|&v| {
            let mut acc = 0.0f32;
            for k in 1..=levels {
                if (v - k as f32 * theta).abs() <= width {
                    acc += scale;
                }
            }
            acc
        })
        .collect();
    Tensor::new(u.shape().clone(), data)
}

/// A layered spiking network driven by the same analog input at every step.
pub trait SpikingNet {
    type State;
    /// Zeroed membrane states sized for this input batch.
    fn init_state(&self, input: &Tensor) -> Result<Self::State>;
    /// One synchronous step over all layers; returns the final (non-spiking)
    /// layer's output for this step.
    fn step(&self, state: Self::State, input: &Tensor) -> Result<(Self::State, Tensor)>;
}

/// Direct-coding unroll: inject `input` at every one of `t_steps` steps from
/// zero state and return the mean of the final layer's per-step outputs. The
/// whole computation stays on the graph.
pub fn unroll<N: SpikingNet>(net: &N, input: &Tensor, t_steps: usize) -> Result<Tensor> {
    if t_steps == 0 {
        return Err(Error::Config("unroll needs at least one timestep".into()));
    }
    let mut state = net.init_state(input)?;
    let mut acc: Option<Tensor> = None;
    for _ in 0..t_steps {
        let (next, out) = net.step(state, input)?;
        state = next;
        acc = Some(match acc {
            None => out,
            Some(a) => a.add(&out)?,
        });
    }
    acc.expect("t_steps >= 1").mul_scalar(1.0 / t_steps as f32)
}
