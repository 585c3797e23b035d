//! Training hyperparameters and the learning-rate schedule.

use serde::{Deserialize, Serialize};

use polynext_core::stabilization::RegularizationSchedule;

use crate::error::{Result, TrainError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRecipe {
    pub lr_max: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub warmup_multiplier: f64,
    pub label_smoothing: f64,
    /// `None` disables the weight average.
    #[serde(default)]
    pub ema_decay: Option<f64>,
    /// Defaults to `epochs − ⌈2/3·epochs⌉`.
    #[serde(default)]
    pub ema_start_epoch: Option<usize>,
    #[serde(default)]
    pub final_dropout: f64,
    #[serde(default)]
    pub stochastic_depth: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub hflip: bool,
    #[serde(default = "four")]
    pub crop_padding: usize,
    /// Global gradient-norm bound.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default)]
    pub train_samples: Option<usize>,
    #[serde(default)]
    pub val_samples: Option<usize>,
}

fn yes() -> bool {
    true
}

fn four() -> usize {
    4
}

impl TrainRecipe {
    /// ImageNet recipe.
    pub fn imagenet() -> Self {
        Self {
            lr_max: 0.004,
            weight_decay: 0.01,
            batch_size: 4096,
            epochs: 300,
            warmup_epochs: 20,
            warmup_multiplier: 0.1,
            label_smoothing: 0.1,
            ema_decay: Some(0.9999),
            ema_start_epoch: None,
            final_dropout: 0.0,
            stochastic_depth: 0.1,
            seed: 0,
            hflip: true,
            crop_padding: 4,
            grad_clip: None,
            checkpoint_every: None,
            train_samples: None,
            val_samples: None,
        }
    }

    /// Low-resolution (CIFAR-scale) recipe.
    pub fn low_res() -> Self {
        Self {
            lr_max: 1e-3,
            weight_decay: 0.05,
            batch_size: 96,
            epochs: 20,
            warmup_epochs: 0,
            label_smoothing: 0.1,
            ema_decay: None,
            stochastic_depth: 0.0,
            ..Self::imagenet()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Recipe(m));
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return bad(format!("lr_max = {} must be positive", self.lr_max));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing = {} outside [0, 1)", self.label_smoothing));
        }
        if self.weight_decay < 0.0 {
            return bad(format!("weight_decay = {} is negative", self.weight_decay));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if self.warmup_epochs > self.epochs {
            return bad(format!("warmup_epochs {} exceeds epochs {}", self.warmup_epochs, self.epochs));
        }
        if !(self.warmup_multiplier > 0.0 && self.warmup_multiplier <= 1.0) {
            return bad(format!("warmup_multiplier = {} outside (0, 1]", self.warmup_multiplier));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..=1.0).contains(&d) {
                return bad(format!("ema_decay = {d} outside [0, 1]"));
            }
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return bad(format!("grad_clip = {c} must be positive"));
            }
        }
        self.regularization().validate().map_err(|e| TrainError::Recipe(e.to_string()))
    }

    pub fn regularization(&self) -> RegularizationSchedule {
        RegularizationSchedule {
            final_dropout: self.final_dropout,
            stochastic_depth_max: self.stochastic_depth,
            total_epochs: self.epochs,
        }
    }

    pub fn ema_start(&self) -> usize {
        self.ema_start_epoch.unwrap_or(self.epochs - (2 * self.epochs).div_ceil(3))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text).map_err(|e| TrainError::Recipe(e.to_string()))?;
        r.validate()?;
        Ok(r)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("recipe serializes")
    }
}

/// Learning rate at `step` of `total_steps`, with `warmup_steps` linear
/// warmup from `lr_max·warmup_multiplier`.
pub fn cosine_lr(step: usize, total_steps: usize, warmup_steps: usize, recipe: &TrainRecipe) -> Result<f64> {
    if step >= total_steps {
        return Err(TrainError::Recipe(format!("step {step} outside [0, {total_steps})")));
    }
    let lr = recipe.lr_max;
    if step < warmup_steps {
        let m = recipe.warmup_multiplier;
        return Ok(lr * (m + (1.0 - m) * step as f64 / warmup_steps as f64));
    }
    let span = total_steps - warmup_steps;
    if span <= 1 {
        return Ok(lr);
    }
    let progress = (step - warmup_steps) as f64 / (span - 1) as f64;
    Ok(lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
