//! Value snapshot of a model and the constant folds applied to it.

use polynext_core::model::{Mixer, Sublayer};
use polynext_core::norm::{fold_norm_to_affine, Norm, PolyBatchNormParams, PositionAffine, NORM_EPS, ROW_EPS};
use polynext_core::ops::{self, sigmoid, Conv2dSpec, FactorizedAffine};
use polynext_core::poly::{AttnNorm, Conv, Linear, PolyAttn, PolyConv, PolyHead, PolyMlp, HEAD_DIM};
use polynext_core::{Fusion, ParamStore, PolyNeXtModel, Tensor};

use crate::error::{CircuitError, Result};

#[derive(Clone, Debug)]
pub struct FLinear {
    /// `[out, in]`
    pub w: Tensor,
    pub b: Tensor,
}

impl FLinear {
    fn snapshot(l: &Linear, st: &ParamStore) -> Self {
        Self { w: st.get(l.w).clone(), b: st.get(l.b).clone() }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::channel_linear(x, &self.w, Some(&self.b))?)
    }

    fn scale(&mut self, g: f64) {
        self.w = ops::scale(&self.w, g);
        self.b = ops::scale(&self.b, g);
    }
}

#[derive(Clone, Debug)]
pub struct FConv {
    /// `[out, in/groups, k, k]`
    pub w: Tensor,
    pub b: Tensor,
    pub spec: Conv2dSpec,
}

impl FConv {
    fn snapshot(c: &Conv, st: &ParamStore) -> Self {
        Self { w: st.get(c.w).clone(), b: st.get(c.b).clone(), spec: c.spec }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::conv2d(x, &self.w, Some(&self.b), &self.spec)?)
    }
}

#[derive(Clone, Debug)]
pub enum FNorm {
    Identity,
    Layer { gamma: Tensor, beta: Tensor },
    /// Inference-mode batch norm reading its running statistics.
    Batch(PolyBatchNormParams),
    Affine(PositionAffine),
}

impl FNorm {
    fn snapshot(n: &Norm, st: &ParamStore) -> Self {
        match n {
            Norm::Identity => FNorm::Identity,
            Norm::Layer { .. } => {
                let p = n.layer_params(st).expect("layer norm");
                FNorm::Layer { gamma: p.gamma, beta: p.beta }
            }
            Norm::Batch { .. } => FNorm::Batch(n.batch_params(st).expect("batch norm")),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            FNorm::Identity => x.clone(),
            FNorm::Layer { gamma, beta } => ops::layer_norm(x, gamma, beta, NORM_EPS)?.0,
            FNorm::Batch(p) => {
                let aff = FactorizedAffine { gamma_c: &p.gamma_c, gamma_hw: &p.gamma_hw, beta_c: &p.beta_c, beta_hw: &p.beta_hw };
                ops::position_norm(x, p.running_mean.data(), p.running_var.data(), p.eps, aff)?.0
            }
            FNorm::Affine(a) => a.apply(x)?,
        })
    }

    /// Multiply the output by `g` through the affine parameters. Returns
    /// false for the identity, which has none.
    fn scale(&mut self, g: f64) -> bool {
        match self {
            FNorm::Identity => return false,
            FNorm::Layer { gamma, beta } => {
                *gamma = ops::scale(gamma, g);
                *beta = ops::scale(beta, g);
            }
            FNorm::Batch(p) => {
                p.gamma_c = ops::scale(&p.gamma_c, g);
                p.beta_c = ops::scale(&p.beta_c, g);
                p.beta_hw = ops::scale(&p.beta_hw, g);
            }
            FNorm::Affine(a) => *a = a.scaled(g),
        }
        true
    }

    fn fold(&mut self) {
        if let FNorm::Batch(p) = self {
            *self = FNorm::Affine(fold_norm_to_affine(p));
        }
    }

    fn polynomial(&self) -> bool {
        matches!(self, FNorm::Identity | FNorm::Affine(_))
    }
}

#[derive(Clone, Debug)]
pub enum FRowNorm {
    /// Per-sample ℓ1 row normalization.
    L1,
    RowSum { gamma: Tensor, running: Tensor },
    /// Fixed per-(head, query) multiplier `[heads, N]`.
    Const(Tensor),
}

impl FRowNorm {
    fn factor(gamma: &Tensor, running: &Tensor) -> Result<Tensor> {
        Ok(ops::hadamard(gamma, &running.map(|r| 1.0 / (r + ROW_EPS)))?)
    }

    pub fn forward(&self, a: &Tensor) -> Result<Tensor> {
        Ok(match self {
            FRowNorm::L1 => ops::l1_row_normalize(a, ROW_EPS)?.0,
            FRowNorm::RowSum { gamma, running } => ops::row_scale(a, &Self::factor(gamma, running)?)?,
            FRowNorm::Const(f) => ops::row_scale(a, f)?,
        })
    }
}

fn fuse(f: Fusion, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(match f {
        Fusion::Hadamard => ops::hadamard(a, b)?,
        Fusion::Addition => ops::add(a, b)?,
    })
}

#[derive(Clone, Debug)]
pub struct FMlp {
    pub wa: FLinear,
    pub wb: FLinear,
    pub norm: FNorm,
    pub wo: FLinear,
    pub fusion: Fusion,
}

impl FMlp {
    pub fn snapshot(m: &PolyMlp, st: &ParamStore) -> Self {
        Self {
            wa: FLinear::snapshot(&m.wa, st),
            wb: FLinear::snapshot(&m.wb, st),
            norm: FNorm::snapshot(&m.norm, st),
            wo: FLinear::snapshot(&m.wo, st),
            fusion: m.fusion,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let m = fuse(self.fusion, &self.wa.forward(x)?, &self.wb.forward(x)?)?;
        self.wo.forward(&self.norm.forward(&m)?)
    }
}

/// `W_o · N(a + a ⊙ b)`.
#[derive(Clone, Debug)]
pub struct FHead {
    pub wa: FLinear,
    pub wb: FLinear,
    pub norm: FNorm,
    pub wo: FLinear,
    pub fusion: Fusion,
}

impl FHead {
    pub fn snapshot(m: &PolyHead, st: &ParamStore) -> Self {
        Self {
            wa: FLinear::snapshot(&m.wa, st),
            wb: FLinear::snapshot(&m.wb, st),
            norm: FNorm::snapshot(&m.norm, st),
            wo: FLinear::snapshot(&m.wo, st),
            fusion: m.fusion,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.wa.forward(x)?;
        let m = fuse(self.fusion, &a, &self.wb.forward(x)?)?;
        self.wo.forward(&self.norm.forward(&ops::add(&a, &m)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct FPolyConv {
    pub w_in: FLinear,
    pub k_coarse: FConv,
    pub k_fine: FConv,
    pub k_merge: FConv,
    pub w_out: FLinear,
    pub norm: FNorm,
    pub fusion: Fusion,
}

impl FPolyConv {
    pub fn snapshot(m: &PolyConv, st: &ParamStore) -> Self {
        Self {
            w_in: FLinear::snapshot(&m.w_in, st),
            k_coarse: FConv::snapshot(&m.k_coarse, st),
            k_fine: FConv::snapshot(&m.k_fine, st),
            k_merge: FConv::snapshot(&m.k_merge, st),
            w_out: FLinear::snapshot(&m.w_out, st),
            norm: FNorm::snapshot(&m.norm, st),
            fusion: m.fusion,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.w_in.forward(x)?;
        let fine = ops::channel_flip(&self.k_fine.forward(&h)?)?;
        let m = fuse(self.fusion, &self.k_coarse.forward(&h)?, &fine)?;
        let y = self.w_out.forward(&self.k_merge.forward(&m)?)?;
        self.norm.forward(&y)
    }
}

#[derive(Clone, Debug)]
pub struct FAttn {
    pub w_qk: FLinear,
    pub w_v: FLinear,
    pub dw_q: FConv,
    pub dw_k: FConv,
    pub dw_v: FConv,
    /// Per-head score scale `σ(λ)`.
    pub scale: Vec<f64>,
    pub row_norm: FRowNorm,
    pub pre_out: Option<FNorm>,
    pub w_out: FLinear,
    pub heads: usize,
    pub degree: u32,
}

impl FAttn {
    pub fn snapshot(m: &PolyAttn, st: &ParamStore) -> Self {
        let row_norm = match &m.attn_norm {
            AttnNorm::L1 => FRowNorm::L1,
            AttnNorm::RowSum { gamma, running } => FRowNorm::RowSum { gamma: st.get(*gamma).clone(), running: st.get(*running).clone() },
        };
        Self {
            w_qk: FLinear::snapshot(&m.w_qk, st),
            w_v: FLinear::snapshot(&m.w_v, st),
            dw_q: FConv::snapshot(&m.dw_q, st),
            dw_k: FConv::snapshot(&m.dw_k, st),
            dw_v: FConv::snapshot(&m.dw_v, st),
            scale: st.get(m.lambda_scale).data().iter().map(|&l| sigmoid(l)).collect(),
            row_norm,
            pre_out: m.pre_out.as_ref().map(|n| FNorm::snapshot(n, st)),
            w_out: FLinear::snapshot(&m.w_out, st),
            heads: m.heads,
            degree: m.degree,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w) = (x.dim(0), x.dim(2), x.dim(3));
        let g = [b * self.heads, HEAD_DIM, h * w];
        let qk = self.w_qk.forward(x)?;
        let q = self.dw_q.forward(&qk)?.into_reshape(&g)?;
        let k = self.dw_k.forward(&qk)?.into_reshape(&g)?;
        let v = self.dw_v.forward(&self.w_v.forward(x)?)?.into_reshape(&g)?;
        let scores = ops::bmm(&q, &k, true, false)?;
        let a = ops::poly_kernel(&scores, &self.scale, self.degree)?;
        let a = self.row_norm.forward(&a)?;
        let o = ops::bmm(&v, &a, false, true)?.into_reshape(&[b, self.heads * HEAD_DIM, h, w])?;
        let o = match &self.pre_out {
            Some(n) => n.forward(&o)?,
            None => o,
        };
        self.w_out.forward(&o)
    }
}

#[derive(Clone, Debug)]
pub enum FSublayer {
    Conv(FPolyConv),
    Attn(FAttn),
    Mlp(FMlp),
}

impl FSublayer {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            FSublayer::Conv(m) => m.forward(x),
            FSublayer::Attn(m) => m.forward(x),
            FSublayer::Mlp(m) => m.forward(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FCell {
    pub s0: Tensor,
    pub s1: Tensor,
    pub pre_norm: FNorm,
    /// `σ(λ_j)` per sublayer; `None` once absorbed into the weights.
    pub gates: Option<Vec<f64>>,
    pub sublayers: Vec<FSublayer>,
}

#[derive(Clone, Debug)]
pub struct FStage {
    pub down: Option<[FConv; 2]>,
    pub cells: Vec<FCell>,
}

/// Inference-only copy of a model holding plain tensors.
#[derive(Clone, Debug)]
pub struct FoldedModel {
    pub in_channels: usize,
    pub resolution: usize,
    pub stem: FConv,
    pub stages: Vec<FStage>,
    pub head_norm: FNorm,
    pub head: FHead,
}

impl FoldedModel {
    /// Copy every tensor a forward pass needs, with nothing folded yet.
    pub fn snapshot(model: &PolyNeXtModel, st: &ParamStore) -> Self {
        let stages = model
            .stages
            .iter()
            .map(|stage| FStage {
                down: stage.down.as_ref().map(|[a, b]| [FConv::snapshot(a, st), FConv::snapshot(b, st)]),
                cells: stage
                    .cells
                    .iter()
                    .map(|cell| {
                        let logits = st.get(cell.logits).data();
                        FCell {
                            s0: st.get(cell.s0).clone(),
                            s1: st.get(cell.s1).clone(),
                            pre_norm: FNorm::snapshot(&cell.pre_norm, st),
                            gates: Some((0..cell.sublayers.len()).map(|j| sigmoid(logits[j])).collect()),
                            sublayers: cell
                                .sublayers
                                .iter()
                                .map(|sub| match sub {
                                    Sublayer::Mixer(Mixer::Conv(m)) => FSublayer::Conv(FPolyConv::snapshot(m, st)),
                                    Sublayer::Mixer(Mixer::Attn(m)) => FSublayer::Attn(FAttn::snapshot(m, st)),
                                    Sublayer::Mlp(m) => FSublayer::Mlp(FMlp::snapshot(m, st)),
                                })
                                .collect(),
                        }
                    })
                    .collect(),
            })
            .collect();
        Self {
            in_channels: model.config.in_channels,
            resolution: model.config.resolution,
            stem: FConv::snapshot(&model.stem, st),
            stages,
            head_norm: FNorm::snapshot(&model.head.norm, st),
            head: FHead::snapshot(&model.head.poly, st),
        }
    }

    /// Logits for a `[B, C, H, W]` batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let stem = self.stem.forward(x)?;
        let (mut x2, mut x1) = (stem.clone(), stem);
        for stage in &self.stages {
            if let Some([d0, d1]) = &stage.down {
                x2 = d0.forward(&x2)?;
                x1 = d1.forward(&x1)?;
            }
            for cell in &stage.cells {
                let sum = ops::add(&ops::channel_scale(&x2, &cell.s0)?, &ops::channel_scale(&x1, &cell.s1)?)?;
                let mut y = cell.pre_norm.forward(&sum)?;
                for (j, sub) in cell.sublayers.iter().enumerate() {
                    let mut f = sub.forward(&y)?;
                    if let Some(g) = &cell.gates {
                        f = ops::scale(&f, g[j]);
                    }
                    y = ops::add(&y, &f)?;
                }
                x2 = std::mem::replace(&mut x1, y);
            }
        }
        let pooled = ops::global_avg_pool(&x1)?;
        self.head.forward(&self.head_norm.forward(&pooled)?)
    }

    /// Absorb every gate `σ(λ)` into the last linear map of its sublayer.
    pub fn fold_gates(mut self) -> Self {
        for cell in self.stages.iter_mut().flat_map(|s| s.cells.iter_mut()) {
            let Some(gates) = cell.gates.take() else { continue };
            for (sub, g) in cell.sublayers.iter_mut().zip(gates) {
                match sub {
                    FSublayer::Mlp(m) => m.wo.scale(g),
                    FSublayer::Attn(m) => m.w_out.scale(g),
                    FSublayer::Conv(m) => {
                        if !m.norm.scale(g) {
                            m.w_out.scale(g);
                        }
                    }
                }
            }
        }
        self
    }

    /// Replace batch norms by fixed affines and running row sums by fixed
    /// multipliers.
    pub fn fold_statistics(mut self) -> Self {
        self.visit_norms_mut(FNorm::fold);
        for cell in self.stages.iter_mut().flat_map(|s| s.cells.iter_mut()) {
            for sub in &mut cell.sublayers {
                if let FSublayer::Attn(m) = sub {
                    if let FRowNorm::RowSum { gamma, running } = &m.row_norm {
                        m.row_norm = FRowNorm::Const(FRowNorm::factor(gamma, running).expect("matching shapes"));
                    }
                }
            }
        }
        self
    }

    fn visit_norms_mut(&mut self, mut f: impl FnMut(&mut FNorm)) {
        for cell in self.stages.iter_mut().flat_map(|s| s.cells.iter_mut()) {
            f(&mut cell.pre_norm);
            for sub in &mut cell.sublayers {
                match sub {
                    FSublayer::Conv(m) => f(&mut m.norm),
                    FSublayer::Mlp(m) => f(&mut m.norm),
                    FSublayer::Attn(m) => {
                        if let Some(n) = &mut m.pre_out {
                            f(n);
                        }
                    }
                }
            }
        }
        f(&mut self.head_norm);
        f(&mut self.head.norm);
    }

    /// Descriptions of everything left that has no add/multiply lowering.
    pub fn non_polynomial(&self) -> Vec<String> {
        let mut out = Vec::new();
        let norm = |n: &FNorm, at: String, out: &mut Vec<String>| {
            if !n.polynomial() {
                out.push(at);
            }
        };
        for (si, stage) in self.stages.iter().enumerate() {
            for (ci, cell) in stage.cells.iter().enumerate() {
                let p = format!("stages.{si}.cells.{ci}");
                norm(&cell.pre_norm, format!("{p}.pre_norm"), &mut out);
                for (j, sub) in cell.sublayers.iter().enumerate() {
                    match sub {
                        FSublayer::Conv(m) => norm(&m.norm, format!("{p}.sub.{j}.norm"), &mut out),
                        FSublayer::Mlp(m) => norm(&m.norm, format!("{p}.sub.{j}.norm"), &mut out),
                        FSublayer::Attn(m) => {
                            if !matches!(m.row_norm, FRowNorm::Const(_)) {
                                out.push(format!("{p}.sub.{j}.row_norm"));
                            }
                            if let Some(n) = &m.pre_out {
                                norm(n, format!("{p}.sub.{j}.pre_out_norm"), &mut out);
                            }
                        }
                    }
                }
            }
        }
        norm(&self.head_norm, "head.norm".into(), &mut out);
        norm(&self.head.norm, "head.poly.norm".into(), &mut out);
        out
    }
}

/// Snapshot a model of any variant and absorb its gates.
pub fn fold_sigmoid_scale(model: &PolyNeXtModel, store: &ParamStore) -> FoldedModel {
    FoldedModel::snapshot(model, store).fold_gates()
}

/// Layers with a per-sample statistic: every LayerNorm and every ℓ1
/// attention normalization.
pub fn per_sample_layers(model: &PolyNeXtModel, store: &ParamStore) -> Vec<String> {
    let mut names = model.layer_norm_names(store);
    for stage in &model.stages {
        for cell in &stage.cells {
            for sub in &cell.sublayers {
                if let Sublayer::Mixer(Mixer::Attn(m)) = sub {
                    if matches!(m.attn_norm, AttnNorm::L1) {
                        names.push(format!("{} (l1 row normalization)", store.name(m.lambda_scale).trim_end_matches(".lambda_scale")));
                    }
                }
            }
        }
    }
    names
}

/// Fold a BatchNorm model into a purely polynomial one: gates absorbed,
/// norms fixed affines, attention row sums fixed multipliers.
pub fn fold_inference(model: &PolyNeXtModel, store: &ParamStore) -> Result<FoldedModel> {
    let bad = per_sample_layers(model, store);
    if !bad.is_empty() {
        return Err(CircuitError::NotFoldable(bad));
    }
    Ok(FoldedModel::snapshot(model, store).fold_statistics().fold_gates())
}
