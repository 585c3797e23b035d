//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every op evaluates eagerly and appends a node holding its value and what it
//! needs for the backward rule. Node ids are assigned in execution order, so
//! the tape is topologically sorted by construction and `backward` is a single
//! reverse sweep. Gradient contributions are accumulated in that fixed order.

use std::fmt;

use crate::error::{invalid, shape_err, Error, Result};
use crate::ops::{self, Conv2dSpec, FactorizedAffine, NormCache};
use crate::tensor::Tensor;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// User-defined differentiable op. Also serves as a test double for checking
/// that the gradient checker rejects wrong rules.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// Gradient with respect to each input, given the upstream gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    MulConst(Var, Tensor),
    SampleScale(Var, Vec<f64>),
    Sum(Var),
    Matmul(Var, Var),
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    ChannelLinear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec },
    LayerNorm { x: Var, gamma: Var, beta: Var, cache: NormCache },
    PositionNorm { x: Var, affine: [Var; 4], cache: NormCache, batch_stats: bool },
    ChannelFlip(Var),
    ChannelScale(Var, Var),
    GlobalAvgPool(Var),
    Reshape(Var),
    Sigmoid(Var),
    Index(Var, usize),
    PolyKernel { scores: Var, s: Var, p: u32 },
    L1RowNorm { a: Var, sums: Vec<f64>, eps: f64 },
    RowScale { a: Var, gamma: Var, inv: Tensor, stat_weight: f64 },
    CrossEntropy { logits: Var, grad: Tensor },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::MulConst(..) => "mul_const",
            Op::SampleScale(..) => "sample_scale",
            Op::Sum(..) => "sum",
            Op::Matmul(..) => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::ChannelLinear { .. } => "channel_linear",
            Op::Conv2d { .. } => "conv2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::PositionNorm { .. } => "position_norm",
            Op::ChannelFlip(..) => "channel_flip",
            Op::ChannelScale(..) => "channel_scale",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::Reshape(..) => "reshape",
            Op::Sigmoid(..) => "sigmoid",
            Op::Index(..) => "index",
            Op::PolyKernel { .. } => "poly_kernel",
            Op::L1RowNorm { .. } => "l1_row_normalize",
            Op::RowScale { .. } => "row_scale",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Execution record for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

/// Gradients from one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient for `v`, or `None` if `v` does not influence the loss or
    /// was created without gradient tracking.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zeros of the given shape when absent.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op_name(&self, v: Var) -> &str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::sub(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::hadamard(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = ops::scale(self.value(a), s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    /// Tensor times a one-element tensor.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(shape_err("scale_by", self.value(a).shape(), sv.shape()));
        }
        let v = ops::scale(self.value(a), sv.item());
        Ok(self.push(v, Op::ScaleBy(a, s), &[a, s]))
    }

    /// Elementwise product with a constant mask.
    pub fn mul_const(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        let v = ops::hadamard(self.value(a), &mask)?;
        Ok(self.push(v, Op::MulConst(a, mask), &[a]))
    }

    /// Multiply sample `i` along axis 0 by `factors[i]`.
    pub fn sample_scale(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let x = self.value(a);
        if factors.len() != x.dim(0) {
            return Err(shape_err("sample_scale", x.shape(), &[factors.len()]));
        }
        let per = x.len() / x.dim(0);
        let mut data = x.data().to_vec();
        for (chunk, f) in data.chunks_mut(per).zip(&factors) {
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let v = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(v, Op::SampleScale(a, factors), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Matmul(a, b), &[a, b]))
    }

    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let v = ops::bmm(self.value(a), self.value(b), ta, tb)?;
        Ok(self.push(v, Op::Bmm { a, b, ta, tb }, &[a, b]))
    }

    pub fn channel_linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let v = ops::channel_linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(v, Op::ChannelLinear { x, w, b }, &ins))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let v = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), &spec)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(v, Op::Conv2d { x, w, b, spec }, &ins))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (v, cache) = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, cache }, &[x, gamma, beta]))
    }

    /// Per-position normalization with factorized affine
    /// `[γ_c, γ_hw, β_c, β_hw]`. With `batch_stats`, `mean`/`var` must be the
    /// statistics of `x` itself so that their dependence on `x` is
    /// differentiated; otherwise they are treated as constants.
    pub fn position_norm(&mut self, x: Var, affine: [Var; 4], mean: &[f64], var: &[f64], eps: f64, batch_stats: bool) -> Result<Var> {
        let aff = FactorizedAffine {
            gamma_c: self.value(affine[0]),
            gamma_hw: self.value(affine[1]),
            beta_c: self.value(affine[2]),
            beta_hw: self.value(affine[3]),
        };
        let (v, cache) = ops::position_norm(self.value(x), mean, var, eps, aff)?;
        let ins = [x, affine[0], affine[1], affine[2], affine[3]];
        Ok(self.push(v, Op::PositionNorm { x, affine, cache, batch_stats }, &ins))
    }

    pub fn channel_flip(&mut self, x: Var) -> Result<Var> {
        let v = ops::channel_flip(self.value(x))?;
        Ok(self.push(v, Op::ChannelFlip(x), &[x]))
    }

    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let v = ops::channel_scale(self.value(x), self.value(s))?;
        Ok(self.push(v, Op::ChannelScale(x, s), &[x, s]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(v, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(ops::sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    /// Element `i` of the flattened tensor, as shape `[1]`.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let t = self.value(x);
        if i >= t.len() {
            return Err(invalid(format!("index {i} out of range for shape {:?}", t.shape())));
        }
        let v = Tensor::scalar(t.data()[i]);
        Ok(self.push(v, Op::Index(x, i), &[x]))
    }

    /// `(s_h · score + 1)^p` on `[G, N, N]` scores with `s` of length heads.
    pub fn poly_kernel(&mut self, scores: Var, s: Var, p: u32) -> Result<Var> {
        let v = ops::poly_kernel(self.value(scores), self.value(s).data(), p)?;
        Ok(self.push(v, Op::PolyKernel { scores, s, p }, &[scores, s]))
    }

    pub fn l1_row_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (v, sums) = ops::l1_row_normalize(self.value(a), eps)?;
        Ok(self.push(v, Op::L1RowNorm { a, sums, eps }, &[a]))
    }

    /// `a[g, i, :] · gamma[h, i] · inv[h, i]` with `h = g mod heads`; `inv`
    /// is a constant.
    pub fn row_scale(&mut self, a: Var, gamma: Var, inv: Tensor) -> Result<Var> {
        self.row_scale_with_stats(a, gamma, inv, 0.0)
    }

    /// [`Tape::row_scale`] where `inv = 1/(R + ε)` was computed from
    /// `R = R₀ + w·Σ_b rowsum(A_b)`, so `A` also reaches the output through
    /// `R`. `stat_weight = w`; zero treats `inv` as a constant.
    pub fn row_scale_with_stats(&mut self, a: Var, gamma: Var, inv: Tensor, stat_weight: f64) -> Result<Var> {
        let g = self.value(gamma);
        if g.shape() != inv.shape() {
            return Err(shape_err("row_scale", g.shape(), inv.shape()));
        }
        let factor = ops::hadamard(g, &inv)?;
        let v = ops::row_scale(self.value(a), &factor)?;
        Ok(self.push(v, Op::RowScale { a, gamma, inv, stat_weight }, &[a, gamma]))
    }

    /// Mean label-smoothed cross-entropy of `[N, K]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
        let (loss, grad) = ops::smoothed_cross_entropy(self.value(logits), labels, smoothing)?;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, grad }, &[logits]))
    }

    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp>) -> Result<Var> {
        let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let v = op.forward(&vals)?;
        Ok(self.push(v, Op::Custom { inputs: inputs.to_vec(), op }, inputs))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (v, dv) in self.local_grads(node, &g)? {
                if !self.needs(v) {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign_slice(dv.data()),
                    slot @ None => *slot = Some(dv),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, ops::scale(g, -1.0))],
            Op::Mul(a, b) => vec![
                (*a, ops::hadamard(g, val(*b))?),
                (*b, ops::hadamard(g, val(*a))?),
            ],
            Op::Scale(a, s) => vec![(*a, ops::scale(g, *s))],
            Op::ScaleBy(a, s) => {
                let sv = val(*s).item();
                let ds: f64 = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                vec![(*a, ops::scale(g, sv)), (*s, Tensor::full(val(*s).shape(), ds))]
            }
            Op::MulConst(a, m) => vec![(*a, ops::hadamard(g, m)?)],
            Op::SampleScale(a, f) => {
                let per = g.len() / f.len();
                let mut d = g.data().to_vec();
                for (chunk, k) in d.chunks_mut(per).zip(f) {
                    chunk.iter_mut().for_each(|v| *v *= k);
                }
                vec![(*a, Tensor::from_parts(g.shape().to_vec(), d))]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::Matmul(a, b) => {
                let (da, db) = ops::matmul_backward(val(*a), val(*b), g)?;
                vec![(*a, da), (*b, db)]
            }
            Op::Bmm { a, b, ta, tb } => {
                let (da, db) = ops::bmm_backward(val(*a), val(*b), *ta, *tb, g)?;
                vec![(*a, da), (*b, db)]
            }
            Op::ChannelLinear { x, w, b } => {
                let (dx, dw, db) = ops::channel_linear_backward(val(*x), val(*w), g, self.needs(*x))?;
                let mut out = vec![(*w, dw)];
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(b) = b {
                    out.push((*b, db.into_reshape(val(*b).shape())?));
                }
                out
            }
            Op::Conv2d { x, w, b, spec } => {
                let (dx, dw, db) = ops::conv2d_backward(val(*x), val(*w), g, spec, self.needs(*x))?;
                let mut out = vec![(*w, dw)];
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(b) = b {
                    out.push((*b, db.into_reshape(val(*b).shape())?));
                }
                out
            }
            Op::LayerNorm { x, gamma, beta, cache } => {
                let (dx, dg, db) = ops::layer_norm_backward(cache, val(*gamma), g);
                vec![(*x, dx), (*gamma, dg.into_reshape(val(*gamma).shape())?), (*beta, db.into_reshape(val(*beta).shape())?)]
            }
            Op::PositionNorm { x, affine, cache, batch_stats } => {
                let aff = FactorizedAffine {
                    gamma_c: val(affine[0]),
                    gamma_hw: val(affine[1]),
                    beta_c: val(affine[2]),
                    beta_hw: val(affine[3]),
                };
                let [dx, dgc, dghw, dbc, dbhw] = ops::position_norm_backward(cache, aff, g, *batch_stats);
                vec![(*x, dx), (affine[0], dgc), (affine[1], dghw), (affine[2], dbc), (affine[3], dbhw)]
            }
            Op::ChannelFlip(x) => vec![(*x, ops::channel_flip(g)?)],
            Op::ChannelScale(x, s) => {
                let xv = val(*x);
                let (bsz, c) = (xv.dim(0), xv.dim(1));
                let sp = xv.len() / (bsz * c);
                let mut ds = vec![0.0; c];
                for (i, (gr, xr)) in g.data().chunks(sp).zip(xv.data().chunks(sp)).enumerate() {
                    ds[i % c] += gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                }
                vec![
                    (*x, ops::channel_scale(g, val(*s))?),
                    (*s, Tensor::from_parts(val(*s).shape().to_vec(), ds)),
                ]
            }
            Op::GlobalAvgPool(x) => {
                let xv = val(*x);
                let sp = xv.len() / g.len();
                let inv = 1.0 / sp as f64;
                let d = g.data().iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, sp)).collect();
                vec![(*x, Tensor::from_parts(xv.shape().to_vec(), d))]
            }
            Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape())?)],
            Op::Sigmoid(x) => {
                let d = g.zip_map(&node.value, "sigmoid", |gv, s| gv * s * (1.0 - s))?;
                vec![(*x, d)]
            }
            Op::Index(x, i) => {
                let mut d = Tensor::zeros(val(*x).shape());
                d.data_mut()[*i] = g.item();
                vec![(*x, d)]
            }
            Op::PolyKernel { scores, s, p } => {
                let (dsc, ds) = ops::poly_kernel_backward(val(*scores), val(*s).data(), *p, g);
                vec![(*scores, dsc), (*s, Tensor::from_parts(val(*s).shape().to_vec(), ds))]
            }
            Op::L1RowNorm { a, sums, eps } => vec![(*a, ops::l1_row_normalize_backward(val(*a), sums, *eps, g))],
            Op::RowScale { a, gamma, inv, stat_weight } => {
                let factor = ops::hadamard(val(*gamma), inv)?;
                let (mut da, df) = ops::row_scale_backward(val(*a), &factor, g);
                if *stat_weight != 0.0 {
                    let shift = Tensor::from_fn(df.shape(), |i| -stat_weight * df.data()[i] * factor.data()[i] * inv.data()[i]);
                    ops::add_row_constants(&mut da, &shift);
                }
                vec![(*a, da), (*gamma, ops::hadamard(&df, inv)?)]
            }
            Op::CrossEntropy { logits, grad } => vec![(*logits, ops::scale(grad, g.item()))],
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let ds = op.backward(&vals, &node.value, g);
                if ds.len() != inputs.len() {
                    return Err(invalid(format!("{}: backward returned {} gradients for {} inputs", op.name(), ds.len(), inputs.len())));
                }
                inputs.iter().copied().zip(ds).collect()
            }
        })
    }
}
