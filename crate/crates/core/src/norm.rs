//! LayerNorm, the position-wise BatchNorm with factorized affine, and the
//! running row-sum attention normalizer.
//!
//! The BatchNorm reduces over batch and channels separately at each spatial
//! position, so with frozen running statistics it is a fixed per-position
//! affine map and folds into constants.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{invalid, shape_err, Error, Result};
use crate::ops::{self, FactorizedAffine};
use crate::params::{Mode, ParamId, ParamKind, ParamStore, Session};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const MOMENTUM: f64 = 0.1;
/// Stabilizer in attention row normalization.
pub const ROW_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[serde(rename = "layernorm")]
    LayerNorm,
    #[serde(rename = "polybn")]
    PolyBatchNorm,
    /// No normalization. Only for degree tests.
    Identity,
}

// ---------------------------------------------------------------------------
// Value-level parameter sets
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn new(d: usize) -> Self {
        Self { gamma: Tensor::ones(&[d]), beta: Tensor::zeros(&[d]), eps: NORM_EPS }
    }
}

/// LayerNorm over the last axis with population variance.
pub fn layer_norm(x: &Tensor, p: &LayerNormParams) -> Result<Tensor> {
    let d = *x.shape().last().unwrap();
    if p.gamma.len() != d || p.beta.len() != d {
        return Err(shape_err("layer_norm", x.shape(), p.gamma.shape()));
    }
    let rows = x.reshape(&[x.len() / d, d])?;
    let (y, _) = ops::layer_norm(&rows, &p.gamma, &p.beta, p.eps)?;
    y.into_reshape(x.shape())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolyBatchNormParams {
    pub gamma_c: Tensor,
    pub gamma_hw: Tensor,
    pub beta_c: Tensor,
    pub beta_hw: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl PolyBatchNormParams {
    /// Identity affine, zero mean and unit variance running buffers.
    pub fn new(channels: usize, h: usize, w: usize) -> Self {
        Self {
            gamma_c: Tensor::ones(&[channels]),
            gamma_hw: Tensor::ones(&[h, w]),
            beta_c: Tensor::zeros(&[channels]),
            beta_hw: Tensor::zeros(&[h, w]),
            running_mean: Tensor::zeros(&[h, w]),
            running_var: Tensor::ones(&[h, w]),
            momentum: MOMENTUM,
            eps: NORM_EPS,
        }
    }

    /// Learnable affine scalars: `2C + 2HW`.
    pub fn affine_param_count(&self) -> usize {
        self.gamma_c.len() + self.beta_c.len() + self.gamma_hw.len() + self.beta_hw.len()
    }

    fn affine(&self) -> FactorizedAffine<'_> {
        FactorizedAffine { gamma_c: &self.gamma_c, gamma_hw: &self.gamma_hw, beta_c: &self.beta_c, beta_hw: &self.beta_hw }
    }
}

fn check_positions(x: &Tensor, positions: usize) -> Result<()> {
    if x.rank() < 2 {
        return Err(Error::InvalidShape(x.shape().to_vec(), "expected [batch, channels, ...]".into()));
    }
    let s: usize = x.shape()[2..].iter().product();
    if s != positions {
        return Err(invalid(format!(
            "input spatial size {:?} does not match the {positions} positions bound at construction",
            &x.shape()[2..]
        )));
    }
    Ok(())
}

fn check_batch_stats(x: &Tensor) -> Result<()> {
    if x.dim(0) * x.dim(1) < 2 {
        return Err(invalid(format!(
            "poly_bn train mode needs B*C >= 2 values per position, got shape {:?}",
            x.shape()
        )));
    }
    Ok(())
}

fn ema(old: &Tensor, batch: &[f64], m: f64) -> Tensor {
    Tensor::from_fn(old.shape(), |i| (1.0 - m) * old.data()[i] + m * batch[i])
}

/// Position-wise BatchNorm. Train mode normalizes with the batch statistics
/// over `(B, C)` and updates the running buffers; infer mode uses the buffers.
pub fn poly_bn_forward(x: &Tensor, p: &mut PolyBatchNormParams, mode: Mode) -> Result<Tensor> {
    check_positions(x, p.gamma_hw.len())?;
    match mode {
        Mode::Train => {
            check_batch_stats(x)?;
            let (mean, var) = ops::position_stats(x)?;
            let (y, _) = ops::position_norm(x, &mean, &var, p.eps, p.affine())?;
            p.running_mean = ema(&p.running_mean, &mean, p.momentum);
            p.running_var = ema(&p.running_var, &var, p.momentum);
            Ok(y)
        }
        Mode::Infer => {
            let (y, _) = ops::position_norm(x, p.running_mean.data(), p.running_var.data(), p.eps, p.affine())?;
            Ok(y)
        }
    }
}

/// Per-(channel, position) affine map `y = a ⊙ x + b`, both `[C, positions]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionAffine {
    pub a: Tensor,
    pub b: Tensor,
}

impl PositionAffine {
    pub fn channels(&self) -> usize {
        self.a.dim(0)
    }

    pub fn positions(&self) -> usize {
        self.a.dim(1)
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() < 2 || x.dim(1) != self.channels() {
            return Err(shape_err("affine", x.shape(), self.a.shape()));
        }
        check_positions(x, self.positions())?;
        let per = self.a.len();
        let mut out = x.data().to_vec();
        for sample in out.chunks_mut(per) {
            for ((v, a), b) in sample.iter_mut().zip(self.a.data()).zip(self.b.data()) {
                *v = a * *v + b;
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    /// Multiply the whole map by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self { a: ops::scale(&self.a, s), b: ops::scale(&self.b, s) }
    }
}

/// Collapse an inference-mode BatchNorm into `A = γ_cγ_hw/√(var+ε)`,
/// `B = (β_c + β_hw) − A·mean`.
pub fn fold_norm_to_affine(p: &PolyBatchNormParams) -> PositionAffine {
    let c = p.gamma_c.len();
    let s = p.gamma_hw.len();
    let mut a = vec![0.0; c * s];
    let mut b = vec![0.0; c * s];
    for ch in 0..c {
        for pos in 0..s {
            let av = p.gamma_c.data()[ch] * p.gamma_hw.data()[pos] / (p.running_var.data()[pos] + p.eps).sqrt();
            a[ch * s + pos] = av;
            b[ch * s + pos] = p.beta_c.data()[ch] + p.beta_hw.data()[pos] - av * p.running_mean.data()[pos];
        }
    }
    PositionAffine { a: Tensor::from_parts(vec![c, s], a), b: Tensor::from_parts(vec![c, s], b) }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningRowSumParams {
    /// `[heads, N]` multiplier.
    pub gamma: Tensor,
    /// `[heads, N]` running row sums.
    pub running: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl RunningRowSumParams {
    /// `γ = 1` and running sums at `N`, the row sum of an all-ones matrix.
    pub fn new(heads: usize, n: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[heads, n]),
            running: Tensor::full(&[heads, n], n as f64),
            momentum: MOMENTUM,
            eps: ROW_EPS,
        }
    }

    /// Constant per-(head, query) multiplier `γ/(R + ε)`.
    pub fn factor(&self) -> Tensor {
        Tensor::from_fn(self.gamma.shape(), |i| self.gamma.data()[i] / (self.running.data()[i] + self.eps))
    }
}

fn check_non_negative(a: &Tensor) -> Result<()> {
    if let Some(i) = a.data().iter().position(|&v| v < 0.0) {
        return Err(invalid(format!("row-sum normalization needs non-negative weights, got {} at {i}", a.data()[i])));
    }
    Ok(())
}

/// `Â = γ ⊙ A / (R + ε)` on `A: [B, heads, N, N]`. Train mode first moves `R`
/// toward the batch-mean row sums.
pub fn rowsum_norm_forward(a: &Tensor, p: &mut RunningRowSumParams, mode: Mode) -> Result<Tensor> {
    if a.rank() != 4 || a.dim(1) != p.gamma.dim(0) || a.dim(2) != p.gamma.dim(1) || a.dim(3) != a.dim(2) {
        return Err(shape_err("rowsum_norm", a.shape(), p.gamma.shape()));
    }
    check_non_negative(a)?;
    let (b, heads, n) = (a.dim(0), a.dim(1), a.dim(2));
    let flat = a.reshape(&[b * heads, n, n])?;
    if mode == Mode::Train {
        let sums = ops::batch_mean_row_sums(&flat, heads)?;
        p.running = ema(&p.running, sums.data(), p.momentum);
    }
    ops::row_scale(&flat, &p.factor())?.into_reshape(a.shape())
}

// ---------------------------------------------------------------------------
// Registry-backed layer
// ---------------------------------------------------------------------------

/// A normalization layer whose tensors live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub enum Norm {
    Layer { gamma: ParamId, beta: ParamId },
    Batch { gamma_c: ParamId, gamma_hw: ParamId, beta_c: ParamId, beta_hw: ParamId, mean: ParamId, var: ParamId },
    Identity,
}

impl Norm {
    /// Register a norm over `channels` at `spatial = (h, w)` positions.
    /// LayerNorm ignores `spatial`.
    pub fn build(store: &mut ParamStore, prefix: &str, kind: NormKind, channels: usize, spatial: (usize, usize)) -> Self {
        match kind {
            NormKind::LayerNorm => Norm::Layer {
                gamma: store.add(format!("{prefix}.gamma"), ParamKind::NoDecay, Tensor::ones(&[channels])),
                beta: store.add(format!("{prefix}.beta"), ParamKind::NoDecay, Tensor::zeros(&[channels])),
            },
            NormKind::PolyBatchNorm => {
                let p = PolyBatchNormParams::new(channels, spatial.0, spatial.1);
                Norm::Batch {
                    gamma_c: store.add(format!("{prefix}.gamma_c"), ParamKind::NoDecay, p.gamma_c),
                    gamma_hw: store.add(format!("{prefix}.gamma_hw"), ParamKind::NoDecay, p.gamma_hw),
                    beta_c: store.add(format!("{prefix}.beta_c"), ParamKind::NoDecay, p.beta_c),
                    beta_hw: store.add(format!("{prefix}.beta_hw"), ParamKind::NoDecay, p.beta_hw),
                    mean: store.add(format!("{prefix}.running_mean"), ParamKind::Buffer, p.running_mean),
                    var: store.add(format!("{prefix}.running_var"), ParamKind::Buffer, p.running_var),
                }
            }
            NormKind::Identity => Norm::Identity,
        }
    }

    pub fn kind(&self) -> NormKind {
        match self {
            Norm::Layer { .. } => NormKind::LayerNorm,
            Norm::Batch { .. } => NormKind::PolyBatchNorm,
            Norm::Identity => NormKind::Identity,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        match self {
            Norm::Identity => Ok(x),
            Norm::Layer { gamma, beta } => {
                let (g, b) = (s.p(*gamma), s.p(*beta));
                s.tape.layer_norm(x, g, b, NORM_EPS)
            }
            Norm::Batch { gamma_c, gamma_hw, beta_c, beta_hw, mean, var } => {
                let xv = s.value(x);
                check_positions(xv, s.store().get(*gamma_hw).len())?;
                let affine = [s.p(*gamma_c), s.p(*gamma_hw), s.p(*beta_c), s.p(*beta_hw)];
                if s.training() {
                    let xv = s.value(x);
                    check_batch_stats(xv)?;
                    let (bm, bv) = ops::position_stats(xv)?;
                    let m = s.momentum_override.unwrap_or(MOMENTUM);
                    let new_mean = ema(s.store().get(*mean), &bm, m);
                    let new_var = ema(s.store().get(*var), &bv, m);
                    s.push_update(*mean, new_mean);
                    s.push_update(*var, new_var);
                    s.tape.position_norm(x, affine, &bm, &bv, NORM_EPS, true)
                } else {
                    let rm = s.store().get(*mean).data().to_vec();
                    let rv = s.store().get(*var).data().to_vec();
                    s.tape.position_norm(x, affine, &rm, &rv, NORM_EPS, false)
                }
            }
        }
    }

    pub fn layer_params(&self, store: &ParamStore) -> Option<LayerNormParams> {
        match self {
            Norm::Layer { gamma, beta } => Some(LayerNormParams {
                gamma: store.get(*gamma).clone(),
                beta: store.get(*beta).clone(),
                eps: NORM_EPS,
            }),
            _ => None,
        }
    }

    pub fn batch_params(&self, store: &ParamStore) -> Option<PolyBatchNormParams> {
        match self {
            Norm::Batch { gamma_c, gamma_hw, beta_c, beta_hw, mean, var } => Some(PolyBatchNormParams {
                gamma_c: store.get(*gamma_c).clone(),
                gamma_hw: store.get(*gamma_hw).clone(),
                beta_c: store.get(*beta_c).clone(),
                beta_hw: store.get(*beta_hw).clone(),
                running_mean: store.get(*mean).clone(),
                running_var: store.get(*var).clone(),
                momentum: MOMENTUM,
                eps: NORM_EPS,
            }),
            _ => None,
        }
    }

    /// Every registered tensor of this layer.
    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Norm::Layer { gamma, beta } => vec![*gamma, *beta],
            Norm::Batch { gamma_c, gamma_hw, beta_c, beta_hw, mean, var } => {
                vec![*gamma_c, *gamma_hw, *beta_c, *beta_hw, *mean, *var]
            }
            Norm::Identity => vec![],
        }
    }
}
