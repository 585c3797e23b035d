//! Sigmoid-Scale residual gating, multi-input skips, and the regularization
//! schedules (linear dropout ramp, stochastic depth).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::ops::{self, sigmoid};
use crate::tensor::Tensor;

/// Logit initialization schedule for the residual gates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmoidInit {
    /// `λ_i = −i/2`
    #[default]
    Standard,
    /// `λ_i = −i/2 − 0.5`
    Large,
}

/// `x + σ(λ)·fx`.
pub fn sigmoid_scale_apply(x: &Tensor, fx: &Tensor, lambda: f64) -> Result<Tensor> {
    let s = sigmoid(lambda);
    x.zip_map(fx, "sigmoid_scale", |a, b| a + s * b)
}

/// Gate logits for `count` consecutive sublayers.
pub fn init_sigmoid_logits(count: usize, variant: SigmoidInit) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(invalid("init_sigmoid_logits: count must be >= 1"));
    }
    let shift = match variant {
        SigmoidInit::Standard => 0.0,
        SigmoidInit::Large => 0.5,
    };
    Ok((0..count).map(|i| -(i as f64) / 2.0 - shift).collect())
}

/// Per-channel `s0·x_t2 + s1·x_t1` on `[B, C, ...]` inputs.
pub fn multi_input_skip_combine(x_t2: &Tensor, x_t1: &Tensor, s0: &Tensor, s1: &Tensor) -> Result<Tensor> {
    if x_t2.shape() != x_t1.shape() {
        return Err(shape_err("multi_input_skip", x_t2.shape(), x_t1.shape()));
    }
    ops::add(&ops::channel_scale(x_t2, s0)?, &ops::channel_scale(x_t1, s1)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizationSchedule {
    pub final_dropout: f64,
    pub stochastic_depth_max: f64,
    pub total_epochs: usize,
}

impl RegularizationSchedule {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("final_dropout", self.final_dropout), ("stochastic_depth_max", self.stochastic_depth_max)] {
            if !(0.0..1.0).contains(&p) {
                return Err(invalid(format!("{name} = {p} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Dropout probability at `epoch`, rising linearly from 0 to the final rate.
pub fn dropout_rate_at(epoch: usize, sched: &RegularizationSchedule) -> Result<f64> {
    if epoch > sched.total_epochs {
        return Err(invalid(format!("epoch {epoch} outside [0, {}]", sched.total_epochs)));
    }
    let denom = sched.total_epochs.saturating_sub(1).max(1) as f64;
    Ok((sched.final_dropout * epoch as f64 / denom).min(sched.final_dropout))
}

/// Stochastic-depth rate of sublayer `index` out of `count`, ramping from 0.
pub fn drop_path_rate(index: usize, count: usize, max_rate: f64) -> f64 {
    if count <= 1 {
        return 0.0;
    }
    max_rate * index as f64 / (count - 1) as f64
}

/// Outcome of one stochastic-depth draw: whether the residual branch is kept
/// and the factor applied to it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gate {
    pub keep: bool,
    pub scale: f64,
}

pub fn stochastic_depth_gate<R: Rng + ?Sized>(rate: f64, training: bool, rng: &mut R) -> Gate {
    if !training || rate <= 0.0 {
        return Gate { keep: true, scale: 1.0 };
    }
    if rng.random::<f64>() < rate {
        Gate { keep: false, scale: 0.0 }
    } else {
        Gate { keep: true, scale: 1.0 / (1.0 - rate) }
    }
}

/// Inverted-dropout mask: zeros with probability `rate`, `1/(1−rate)` otherwise.
pub fn dropout_mask<R: Rng + ?Sized>(shape: &[usize], rate: f64, rng: &mut R) -> Tensor {
    let keep = 1.0 / (1.0 - rate);
    Tensor::from_fn(shape, |_| if rng.random::<f64>() < rate { 0.0 } else { keep })
}
