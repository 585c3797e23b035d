//! The polynomial blocks: PolyMLP, PolyHead, PolyConv and PolyAttn.
//!
//! Each block's only nonlinearity is a Hadamard product of two learned
//! projections (or, in PolyAttn, an integer power of a score).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};
use crate::norm::{Norm, NormKind, MOMENTUM, ROW_EPS};
use crate::ops::{self, logit, Conv2dSpec};
use crate::params::{Mode, ParamId, ParamKind, ParamStore, Session};
use crate::tensor::Tensor;

/// Width of one attention head.
pub const HEAD_DIM: usize = 32;
/// Default attention polynomial degree.
pub const DEFAULT_DEGREE: u32 = 4;

/// How the two branches of a block are combined. `Addition` is the ablation
/// that removes the multiplicative interaction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Hadamard,
    Addition,
}

impl Fusion {
    pub fn apply(self, tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        match self {
            Fusion::Hadamard => tape.mul(a, b),
            Fusion::Addition => tape.add(a, b),
        }
    }
}

/// Kaiming-normal tensor: `N(0, gain²/fan_in)`.
pub fn kaiming<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor {
    Tensor::randn(shape, gain / (fan_in as f64).sqrt(), rng)
}

pub const GAIN_POLY: f64 = std::f64::consts::SQRT_2;
pub const GAIN_PLAIN: f64 = 1.0;

/// Pointwise projection over the channel axis, with bias.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn build<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            w: store.add(format!("{prefix}.weight"), ParamKind::Weight, kaiming(&[d_out, d_in], d_in, gain, rng)),
            b: store.add(format!("{prefix}.bias"), ParamKind::NoDecay, Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.w), s.p(self.b));
        s.tape.channel_linear(x, w, Some(b))
    }

    pub fn dims(&self, store: &ParamStore) -> (usize, usize) {
        let w = store.get(self.w);
        (w.dim(1), w.dim(0))
    }
}

/// 2-D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: Conv2dSpec,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        spec: Conv2dSpec,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let cg = c_in / spec.groups;
        let fan_in = cg * kernel * kernel;
        Self {
            w: store.add(format!("{prefix}.weight"), ParamKind::Weight, kaiming(&[c_out, cg, kernel, kernel], fan_in, gain, rng)),
            b: store.add(format!("{prefix}.bias"), ParamKind::NoDecay, Tensor::zeros(&[c_out])),
            spec,
        }
    }

    /// Depthwise, padding-preserving.
    pub fn depthwise<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, c: usize, kernel: usize, dilation: usize, gain: f64, rng: &mut R) -> Self {
        Self::build(store, prefix, c, c, kernel, Conv2dSpec::same(kernel, dilation, c), gain, rng)
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.w), s.p(self.b));
        s.tape.conv2d(x, w, Some(b), self.spec)
    }

    pub fn kernel(&self, store: &ParamStore) -> usize {
        store.get(self.w).dim(2)
    }
}

/// `y = W_o · N((W_a x + b_a) ⊙ (W_b x + b_b)) + b_o` at every position.
#[derive(Clone, Debug)]
pub struct PolyMlp {
    pub wa: Linear,
    pub wb: Linear,
    pub norm: Norm,
    pub wo: Linear,
    pub fusion: Fusion,
}

impl PolyMlp {
    #[allow(clippy::too_many_arguments)]
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        norm: NormKind,
        spatial: (usize, usize),
        fusion: Fusion,
        rng: &mut R,
    ) -> Self {
        Self {
            wa: Linear::build(store, &format!("{prefix}.wa"), d_in, hidden, GAIN_POLY, rng),
            wb: Linear::build(store, &format!("{prefix}.wb"), d_in, hidden, GAIN_POLY, rng),
            norm: Norm::build(store, &format!("{prefix}.norm"), norm, hidden, spatial),
            wo: Linear::build(store, &format!("{prefix}.wo"), hidden, d_out, GAIN_POLY, rng),
            fusion,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let a = self.wa.forward(s, x)?;
        let b = self.wb.forward(s, x)?;
        let m = self.fusion.apply(s.tape, a, b)?;
        let n = self.norm.forward(s, m)?;
        self.wo.forward(s, n)
    }
}

/// `y = W_o · N(a + a ⊙ b) + b_o` with `a = W_a x + b_a`, `b = W_b x + b_b`.
#[derive(Clone, Debug)]
pub struct PolyHead {
    pub wa: Linear,
    pub wb: Linear,
    pub norm: Norm,
    pub wo: Linear,
    pub fusion: Fusion,
}

impl PolyHead {
    #[allow(clippy::too_many_arguments)]
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        classes: usize,
        norm: NormKind,
        fusion: Fusion,
        rng: &mut R,
    ) -> Self {
        Self {
            wa: Linear::build(store, &format!("{prefix}.wa"), d_in, hidden, GAIN_PLAIN, rng),
            wb: Linear::build(store, &format!("{prefix}.wb"), d_in, hidden, GAIN_PLAIN, rng),
            norm: Norm::build(store, &format!("{prefix}.norm"), norm, hidden, (1, 1)),
            wo: Linear::build(store, &format!("{prefix}.wo"), hidden, classes, GAIN_PLAIN, rng),
            fusion,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let a = self.wa.forward(s, x)?;
        let b = self.wb.forward(s, x)?;
        let m = self.fusion.apply(s.tape, a, b)?;
        let h = s.tape.add(a, m)?;
        let n = self.norm.forward(s, h)?;
        self.wo.forward(s, n)
    }
}

/// Coarse-branch kernel size and dilation for a 0-based stage index.
pub fn coarse_kernel(stage: usize) -> (usize, usize) {
    if stage == 0 {
        (3, 2)
    } else {
        (5, 2)
    }
}

/// `h = W_in x; m = K_c(h) ⊙ flip(K_f(h)); y = N(W_out(K(m)))`.
#[derive(Clone, Debug)]
pub struct PolyConv {
    pub w_in: Linear,
    pub k_coarse: Conv,
    pub k_fine: Conv,
    pub k_merge: Conv,
    pub w_out: Linear,
    pub norm: Norm,
    pub fusion: Fusion,
}

impl PolyConv {
    #[allow(clippy::too_many_arguments)]
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        c: usize,
        hidden: usize,
        stage: usize,
        norm: NormKind,
        spatial: (usize, usize),
        fusion: Fusion,
        rng: &mut R,
    ) -> Self {
        let (kc, dil) = coarse_kernel(stage);
        Self {
            w_in: Linear::build(store, &format!("{prefix}.w_in"), c, hidden, GAIN_POLY, rng),
            k_coarse: Conv::depthwise(store, &format!("{prefix}.k_coarse"), hidden, kc, dil, GAIN_POLY, rng),
            k_fine: Conv::depthwise(store, &format!("{prefix}.k_fine"), hidden, 3, 1, GAIN_POLY, rng),
            k_merge: Conv::depthwise(store, &format!("{prefix}.k_merge"), hidden, 3, 1, GAIN_POLY, rng),
            w_out: Linear::build(store, &format!("{prefix}.w_out"), hidden, c, GAIN_POLY, rng),
            norm: Norm::build(store, &format!("{prefix}.norm"), norm, c, spatial),
            fusion,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let h = self.w_in.forward(s, x)?;
        let coarse = self.k_coarse.forward(s, h)?;
        let fine = self.k_fine.forward(s, h)?;
        let flipped = s.tape.channel_flip(fine)?;
        let m = self.fusion.apply(s.tape, coarse, flipped)?;
        let k = self.k_merge.forward(s, m)?;
        let y = self.w_out.forward(s, k)?;
        self.norm.forward(s, y)
    }
}

/// Attention weight normalization.
#[derive(Clone, Debug)]
pub enum AttnNorm {
    /// Per-sample ℓ1 row normalization.
    L1,
    /// Running row-sum estimate with a learned per-(head, query) multiplier.
    RowSum { gamma: ParamId, running: ParamId },
}

/// Polynomial-kernel attention with a shared query/key projection.
#[derive(Clone, Debug)]
pub struct PolyAttn {
    pub w_qk: Linear,
    pub w_v: Linear,
    pub dw_q: Conv,
    pub dw_k: Conv,
    pub dw_v: Conv,
    /// Per-head logits of the score scale `s = σ(λ)`.
    pub lambda_scale: ParamId,
    pub attn_norm: AttnNorm,
    /// Extra spatial norm before `W_out` (BatchNorm variant only).
    pub pre_out: Option<Norm>,
    pub w_out: Linear,
    pub heads: usize,
    pub degree: u32,
}

/// `⌈C/64⌉` heads.
pub fn attn_heads(c: usize) -> usize {
    c.div_ceil(64)
}

impl PolyAttn {
    #[allow(clippy::too_many_arguments)]
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        c: usize,
        degree: u32,
        norm: NormKind,
        spatial: (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        if degree == 0 {
            return Err(invalid("attention degree must be >= 1"));
        }
        let heads = attn_heads(c);
        let d = heads * HEAD_DIM;
        let n = spatial.0 * spatial.1;
        let w_qk = Linear::build(store, &format!("{prefix}.w_qk"), c, d, GAIN_PLAIN, rng);
        let w_v = Linear::build(store, &format!("{prefix}.w_v"), c, d, GAIN_PLAIN, rng);
        let dw_q = Conv::depthwise(store, &format!("{prefix}.dw_q"), d, 3, 1, GAIN_PLAIN, rng);
        let dw_k = Conv::depthwise(store, &format!("{prefix}.dw_k"), d, 3, 1, GAIN_PLAIN, rng);
        let dw_v = Conv::depthwise(store, &format!("{prefix}.dw_v"), d, 3, 1, GAIN_PLAIN, rng);
        let init = logit(1.0 / (HEAD_DIM as f64).sqrt());
        let lambda_scale = store.add(format!("{prefix}.lambda_scale"), ParamKind::NoDecay, Tensor::full(&[heads], init));
        let (attn_norm, pre_out) = match norm {
            NormKind::PolyBatchNorm => (
                AttnNorm::RowSum {
                    gamma: store.add(format!("{prefix}.row_gamma"), ParamKind::NoDecay, Tensor::ones(&[heads, n])),
                    running: store.add(format!("{prefix}.row_running"), ParamKind::Buffer, Tensor::full(&[heads, n], n as f64)),
                },
                Some(Norm::build(store, &format!("{prefix}.pre_out_norm"), norm, d, spatial)),
            ),
            _ => (AttnNorm::L1, None),
        };
        let w_out = Linear::build(store, &format!("{prefix}.w_out"), d, c, GAIN_PLAIN, rng);
        Ok(Self { w_qk, w_v, dw_q, dw_k, dw_v, lambda_scale, attn_norm, pre_out, w_out, heads, degree })
    }

    pub fn inner_dim(&self) -> usize {
        self.heads * HEAD_DIM
    }

    /// Pre-normalization weights `(s·QKᵀ + 1)^p` as `[B·heads, N, N]`, plus `V`
    /// as `[B·heads, HEAD_DIM, N]`.
    pub fn kernel_weights(&self, s: &mut Session<'_>, x: Var) -> Result<(Var, Var)> {
        let shape = s.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(invalid(format!("attention expects [B, C, H, W], got {shape:?}")));
        }
        let (b, n) = (shape[0], shape[2] * shape[3]);
        let g = [b * self.heads, HEAD_DIM, n];
        let qk = self.w_qk.forward(s, x)?;
        let q = self.dw_q.forward(s, qk)?;
        let k = self.dw_k.forward(s, qk)?;
        let v0 = self.w_v.forward(s, x)?;
        let v = self.dw_v.forward(s, v0)?;
        let q = s.tape.reshape(q, &g)?;
        let k = s.tape.reshape(k, &g)?;
        let v = s.tape.reshape(v, &g)?;
        let scores = s.tape.bmm(q, k, true, false)?;
        let lam = s.p(self.lambda_scale);
        let scale = s.tape.sigmoid(lam);
        let a = s.tape.poly_kernel(scores, scale, self.degree)?;
        Ok((a, v))
    }

    /// Normalized attention weights `[B·heads, N, N]` and `V`.
    pub fn attention(&self, s: &mut Session<'_>, x: Var) -> Result<(Var, Var)> {
        let (a, v) = self.kernel_weights(s, x)?;
        let a_hat = match &self.attn_norm {
            AttnNorm::L1 => s.tape.l1_row_normalize(a, ROW_EPS)?,
            AttnNorm::RowSum { gamma, running } => {
                let av = s.value(a);
                if let Some(bad) = av.data().iter().find(|&&v| v < 0.0) {
                    return Err(invalid(format!("row-sum normalization needs non-negative weights, got {bad}")));
                }
                let batch = av.dim(0) / self.heads;
                let m = s.momentum_override.unwrap_or(MOMENTUM);
                let r = if s.mode == Mode::Train {
                    let sums = ops::batch_mean_row_sums(av, self.heads)?;
                    let old = s.store().get(*running);
                    let new = Tensor::from_fn(old.shape(), |i| (1.0 - m) * old.data()[i] + m * sums.data()[i]);
                    s.push_update(*running, new.clone());
                    new
                } else {
                    s.store().get(*running).clone()
                };
                let inv = r.map(|v| 1.0 / (v + ROW_EPS));
                let gv = s.p(*gamma);
                let w = if s.mode == Mode::Train { m / batch as f64 } else { 0.0 };
                s.tape.row_scale_with_stats(a, gv, inv, w)?
            }
        };
        Ok((a_hat, v))
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let shape = s.value(x).shape().to_vec();
        let (a_hat, v) = self.attention(s, x)?;
        let o = s.tape.bmm(v, a_hat, false, true)?;
        let o = s.tape.reshape(o, &[shape[0], self.inner_dim(), shape[2], shape[3]])?;
        let o = match &self.pre_out {
            Some(n) => n.forward(s, o)?,
            None => o,
        };
        self.w_out.forward(s, o)
    }
}

/// Run `f` once in inference mode without gradient tracking and return the
/// value it produces.
pub fn infer<F>(store: &ParamStore, input: &Tensor, f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Session<'_>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, store, Mode::Infer);
    let x = s.tape.constant(input.clone());
    let y = f(&mut s, x)?;
    Ok(s.value(y).clone())
}
