//! Lowering of tensor operations to circuit nodes.

use polynext_core::norm::PositionAffine;
use polynext_core::ops::{conv_out_size, Conv2dSpec};
use polynext_core::poly::HEAD_DIM;
use polynext_core::{Fusion, Tensor};

use crate::error::{CircuitError, Result};
use crate::folded::{FAttn, FConv, FHead, FLinear, FMlp, FNorm, FPolyConv, FRowNorm, FSublayer, FoldedModel};
use crate::graph::{ArithmeticCircuit, Node, NodeId};

/// Node ids of one `[C, H, W]` feature map, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Wires {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub ids: Vec<NodeId>,
}

impl Wires {
    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    fn at(&self, c: usize, p: usize) -> NodeId {
        self.ids[c * self.positions() + p]
    }

    fn same_shape(&self, other: &Wires, op: &str) -> Result<()> {
        if (self.c, self.h, self.w) != (other.c, other.h, other.w) {
            return Err(CircuitError::Unsupported(format!(
                "{op} of {}x{}x{} and {}x{}x{}",
                self.c, self.h, self.w, other.c, other.h, other.w
            )));
        }
        Ok(())
    }
}

/// Builds a circuit one tensor operation at a time. Dot products are
/// reduced left to right. In counting mode no nodes are stored and only the
/// total is tracked.
pub struct CircuitBuilder {
    circuit: ArithmeticCircuit,
    count_only: bool,
    count: u64,
    limit: u64,
}

impl CircuitBuilder {
    pub fn new() -> Self {
        Self { circuit: ArithmeticCircuit::new(), count_only: false, count: 0, limit: u64::MAX }
    }

    /// Refuse to grow past `limit` nodes.
    pub fn with_limit(mut self, limit: u64) -> Self {
        self.limit = limit;
        self
    }

    fn counting() -> Self {
        Self { count_only: true, ..Self::new() }
    }

    pub fn node_count(&self) -> u64 {
        self.count
    }

    fn push(&mut self, node: Node) -> Result<NodeId> {
        let id = self.count;
        self.count += 1;
        if self.count_only {
            return Ok(0);
        }
        if self.count > self.limit {
            return Err(CircuitError::TooLarge { estimate: self.count, limit: self.limit });
        }
        let got = self.circuit.push(node)?;
        debug_assert_eq!(got as u64, id);
        Ok(got)
    }

    pub fn constant(&mut self, v: f64) -> Result<NodeId> {
        self.push(Node::Const(v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Node::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Node::Mul(a, b))
    }

    /// One CONST node per tensor entry.
    pub fn constants(&mut self, t: &Tensor) -> Result<Vec<NodeId>> {
        t.data().iter().map(|&v| self.constant(v)).collect()
    }

    /// INPUT nodes `0..c·h·w` laid out as a `[c, h, w]` map.
    pub fn inputs(&mut self, c: usize, h: usize, w: usize) -> Result<Wires> {
        let ids = (0..c * h * w).map(|i| self.push(Node::Input(i as u32))).collect::<Result<_>>()?;
        Ok(Wires { c, h, w, ids })
    }

    /// `Σ_i w_i·x_i + b`, reduced left to right.
    fn dot(&mut self, terms: impl IntoIterator<Item = (NodeId, NodeId)>, bias: Option<NodeId>) -> Result<NodeId> {
        let mut acc: Option<NodeId> = None;
        for (w, x) in terms {
            let m = self.mul(w, x)?;
            acc = Some(match acc {
                None => m,
                Some(a) => self.add(a, m)?,
            });
        }
        match (acc, bias) {
            (Some(a), Some(b)) => self.add(a, b),
            (Some(a), None) => Ok(a),
            (None, Some(b)) => Ok(b),
            (None, None) => self.constant(0.0),
        }
    }

    pub fn linear(&mut self, x: &Wires, l: &FLinear) -> Result<Wires> {
        let (o, c) = (l.w.dim(0), l.w.dim(1));
        if c != x.c {
            return Err(CircuitError::Unsupported(format!("linear {o}x{c} on {} channels", x.c)));
        }
        let w = self.constants(&l.w)?;
        let b = self.constants(&l.b)?;
        let s = x.positions();
        let mut ids = Vec::with_capacity(o * s);
        for oc in 0..o {
            for p in 0..s {
                let terms: Vec<_> = (0..c).map(|ic| (w[oc * c + ic], x.at(ic, p))).collect();
                ids.push(self.dot(terms, Some(b[oc]))?);
            }
        }
        Ok(Wires { c: o, ids, ..*x })
    }

    pub fn conv(&mut self, x: &Wires, conv: &FConv) -> Result<Wires> {
        let spec: Conv2dSpec = conv.spec;
        let (o, cg, kh, kw) = (conv.w.dim(0), conv.w.dim(1), conv.w.dim(2), conv.w.dim(3));
        let g = spec.groups;
        if g == 0 || x.c % g != 0 || x.c / g != cg || o % g != 0 {
            return Err(CircuitError::Unsupported(format!("conv {:?} on {} channels", conv.w.shape(), x.c)));
        }
        let (Some(oh), Some(ow)) = (conv_out_size(x.h, kh, &spec), conv_out_size(x.w, kw, &spec)) else {
            return Err(CircuitError::Unsupported(format!("conv {:?} on {}x{}", conv.w.shape(), x.h, x.w)));
        };
        let w = self.constants(&conv.w)?;
        let b = self.constants(&conv.b)?;
        let opg = o / g;
        let mut ids = Vec::with_capacity(o * oh * ow);
        for oc in 0..o {
            let c0 = (oc / opg) * cg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut terms = Vec::new();
                    for ic in 0..cg {
                        for ky in 0..kh {
                            let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                                if ix < 0 || ix >= x.w as isize {
                                    continue;
                                }
                                let wi = ((oc * cg + ic) * kh + ky) * kw + kx;
                                terms.push((w[wi], x.at(c0 + ic, iy as usize * x.w + ix as usize)));
                            }
                        }
                    }
                    ids.push(self.dot(terms, Some(b[oc]))?);
                }
            }
        }
        Ok(Wires { c: o, h: oh, w: ow, ids })
    }

    pub fn hadamard(&mut self, a: &Wires, b: &Wires) -> Result<Wires> {
        a.same_shape(b, "hadamard")?;
        let ids = a.ids.iter().zip(&b.ids).map(|(&x, &y)| self.mul(x, y)).collect::<Result<_>>()?;
        Ok(Wires { ids, ..*a })
    }

    pub fn add_maps(&mut self, a: &Wires, b: &Wires) -> Result<Wires> {
        a.same_shape(b, "add")?;
        let ids = a.ids.iter().zip(&b.ids).map(|(&x, &y)| self.add(x, y)).collect::<Result<_>>()?;
        Ok(Wires { ids, ..*a })
    }

    pub fn fuse(&mut self, f: Fusion, a: &Wires, b: &Wires) -> Result<Wires> {
        match f {
            Fusion::Hadamard => self.hadamard(a, b),
            Fusion::Addition => self.add_maps(a, b),
        }
    }

    /// Reverse the channel order; no nodes are emitted.
    pub fn flip(&self, x: &Wires) -> Wires {
        let s = x.positions();
        let ids = (0..x.c).rev().flat_map(|c| x.ids[c * s..(c + 1) * s].iter().copied()).collect();
        Wires { ids, ..*x }
    }

    pub fn channel_scale(&mut self, x: &Wires, s: &Tensor) -> Result<Wires> {
        if s.len() != x.c {
            return Err(CircuitError::Unsupported(format!("channel scale of {} on {} channels", s.len(), x.c)));
        }
        let k = self.constants(s)?;
        let n = x.positions();
        let ids = x.ids.iter().enumerate().map(|(i, &v)| self.mul(k[i / n], v)).collect::<Result<_>>()?;
        Ok(Wires { ids, ..*x })
    }

    pub fn scale(&mut self, x: &Wires, s: f64) -> Result<Wires> {
        let k = self.constant(s)?;
        let ids = x.ids.iter().map(|&v| self.mul(k, v)).collect::<Result<_>>()?;
        Ok(Wires { ids, ..*x })
    }

    /// `a ⊙ x + b` with per-(channel, position) constants.
    pub fn affine(&mut self, x: &Wires, aff: &PositionAffine) -> Result<Wires> {
        if aff.channels() != x.c || aff.positions() != x.positions() {
            return Err(CircuitError::Unsupported(format!(
                "affine {:?} on {}x{}x{}",
                aff.a.shape(),
                x.c,
                x.h,
                x.w
            )));
        }
        let a = self.constants(&aff.a)?;
        let b = self.constants(&aff.b)?;
        let mut ids = Vec::with_capacity(x.ids.len());
        for (i, &v) in x.ids.iter().enumerate() {
            let m = self.mul(a[i], v)?;
            ids.push(self.add(m, b[i])?);
        }
        Ok(Wires { ids, ..*x })
    }

    pub fn norm(&mut self, x: &Wires, n: &FNorm) -> Result<Wires> {
        match n {
            FNorm::Identity => Ok(x.clone()),
            FNorm::Affine(a) => self.affine(x, a),
            FNorm::Layer { .. } => Err(CircuitError::Unsupported("layer norm".into())),
            FNorm::Batch(_) => Err(CircuitError::Unsupported("batch norm with unfolded statistics".into())),
        }
    }

    /// Per-channel sum over positions, then one multiply by `1/HW`.
    pub fn avg_pool(&mut self, x: &Wires) -> Result<Wires> {
        let s = x.positions();
        let inv = self.constant(1.0 / s as f64)?;
        let mut ids = Vec::with_capacity(x.c);
        for c in 0..x.c {
            let mut acc = x.at(c, 0);
            for p in 1..s {
                acc = self.add(acc, x.at(c, p))?;
            }
            ids.push(self.mul(acc, inv)?);
        }
        Ok(Wires { c: x.c, h: 1, w: 1, ids })
    }

    /// `t^p` as `p-1` chained multiplications.
    pub fn power(&mut self, t: NodeId, p: u32) -> Result<NodeId> {
        if p == 0 {
            return self.constant(1.0);
        }
        let mut acc = t;
        for _ in 1..p {
            acc = self.mul(acc, t)?;
        }
        Ok(acc)
    }

    pub fn mlp(&mut self, x: &Wires, m: &FMlp) -> Result<Wires> {
        let a = self.linear(x, &m.wa)?;
        let b = self.linear(x, &m.wb)?;
        let f = self.fuse(m.fusion, &a, &b)?;
        let n = self.norm(&f, &m.norm)?;
        self.linear(&n, &m.wo)
    }

    pub fn head(&mut self, x: &Wires, m: &FHead) -> Result<Wires> {
        let a = self.linear(x, &m.wa)?;
        let b = self.linear(x, &m.wb)?;
        let f = self.fuse(m.fusion, &a, &b)?;
        let h = self.add_maps(&a, &f)?;
        let n = self.norm(&h, &m.norm)?;
        self.linear(&n, &m.wo)
    }

    pub fn poly_conv(&mut self, x: &Wires, m: &FPolyConv) -> Result<Wires> {
        let h = self.linear(x, &m.w_in)?;
        let coarse = self.conv(&h, &m.k_coarse)?;
        let fine = self.conv(&h, &m.k_fine)?;
        let fine = self.flip(&fine);
        let f = self.fuse(m.fusion, &coarse, &fine)?;
        let k = self.conv(&f, &m.k_merge)?;
        let y = self.linear(&k, &m.w_out)?;
        self.norm(&y, &m.norm)
    }

    pub fn attention(&mut self, x: &Wires, m: &FAttn) -> Result<Wires> {
        let FRowNorm::Const(factor) = &m.row_norm else {
            return Err(CircuitError::Unsupported("attention row normalization with a per-sample or unfolded statistic".into()));
        };
        let qk = self.linear(x, &m.w_qk)?;
        let q = self.conv(&qk, &m.dw_q)?;
        let k = self.conv(&qk, &m.dw_k)?;
        let v0 = self.linear(x, &m.w_v)?;
        let v = self.conv(&v0, &m.dw_v)?;
        let n = x.positions();
        let one = self.constant(1.0)?;
        let mut out = vec![0; m.heads * HEAD_DIM * n];
        for h in 0..m.heads {
            let s = self.constant(m.scale[h])?;
            let dims = h * HEAD_DIM..(h + 1) * HEAD_DIM;
            let mut a = Vec::with_capacity(n * n);
            for i in 0..n {
                let f = self.constant(factor.data()[h * n + i])?;
                for j in 0..n {
                    let score = self.dot(dims.clone().map(|d| (q.at(d, i), k.at(d, j))), None)?;
                    let scaled = self.mul(s, score)?;
                    let t = self.add(scaled, one)?;
                    let t = self.power(t, m.degree)?;
                    a.push(self.mul(f, t)?);
                }
            }
            for d in dims {
                for i in 0..n {
                    out[d * n + i] = self.dot((0..n).map(|j| (v.at(d, j), a[i * n + j])), None)?;
                }
            }
        }
        let o = Wires { c: m.heads * HEAD_DIM, ids: out, ..*x };
        let o = match &m.pre_out {
            Some(nrm) => self.norm(&o, nrm)?,
            None => o,
        };
        self.linear(&o, &m.w_out)
    }

    pub fn model(&mut self, fm: &FoldedModel, x: &Wires) -> Result<Wires> {
        let stem = self.conv(x, &fm.stem)?;
        let (mut x2, mut x1) = (stem.clone(), stem);
        for stage in &fm.stages {
            if let Some([d0, d1]) = &stage.down {
                x2 = self.conv(&x2, d0)?;
                x1 = self.conv(&x1, d1)?;
            }
            for cell in &stage.cells {
                let a = self.channel_scale(&x2, &cell.s0)?;
                let b = self.channel_scale(&x1, &cell.s1)?;
                let sum = self.add_maps(&a, &b)?;
                let mut y = self.norm(&sum, &cell.pre_norm)?;
                for (j, sub) in cell.sublayers.iter().enumerate() {
                    let mut f = match sub {
                        FSublayer::Conv(m) => self.poly_conv(&y, m)?,
                        FSublayer::Attn(m) => self.attention(&y, m)?,
                        FSublayer::Mlp(m) => self.mlp(&y, m)?,
                    };
                    if let Some(g) = &cell.gates {
                        f = self.scale(&f, g[j])?;
                    }
                    y = self.add_maps(&y, &f)?;
                }
                x2 = std::mem::replace(&mut x1, y);
            }
        }
        let pooled = self.avg_pool(&x1)?;
        let h = self.norm(&pooled, &fm.head_norm)?;
        self.head(&h, &fm.head)
    }

    pub fn finish(mut self, outputs: &Wires) -> Result<ArithmeticCircuit> {
        self.circuit.set_outputs(outputs.ids.clone())?;
        Ok(self.circuit)
    }
}

impl Default for CircuitBuilder {
    fn default() -> Self {
        Self::new()
    }
}

/// Default refusal threshold for [`export_circuit`].
pub const DEFAULT_MAX_NODES: u64 = 20_000_000;

/// Exact node count of exporting `folded` for one `[C, H, W]` input.
pub fn count_nodes(folded: &FoldedModel, input_shape: [usize; 3]) -> Result<u64> {
    let mut b = CircuitBuilder::counting();
    let x = b.inputs(input_shape[0], input_shape[1], input_shape[2])?;
    b.model(folded, &x)?;
    Ok(b.node_count())
}

/// Unroll one inference pass over a single `[C, H, W]` input. INPUT `i` is
/// entry `i` of the row-major input and the outputs are the logits.
pub fn export_circuit(folded: &FoldedModel, input_shape: [usize; 3], max_nodes: u64) -> Result<ArithmeticCircuit> {
    let bad = folded.non_polynomial();
    if !bad.is_empty() {
        return Err(CircuitError::NotFoldable(bad));
    }
    let estimate = count_nodes(folded, input_shape)?;
    if estimate > max_nodes {
        return Err(CircuitError::TooLarge { estimate, limit: max_nodes });
    }
    let mut b = CircuitBuilder::new().with_limit(max_nodes);
    let x = b.inputs(input_shape[0], input_shape[1], input_shape[2])?;
    let y = b.model(folded, &x)?;
    b.finish(&y)
}
