//! Tensor-level numeric kernels, forward and backward.
//!
//! Everything here is a pure function of its inputs. The autodiff tape and the
//! folded inference path in the circuit crate both build on these.
//!
//! Reductions that span the batch axis are computed over fixed-size batch
//! chunks and combined in chunk order, so results do not depend on the number
//! of rayon worker threads.

use rayon::prelude::*;

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Batch samples per partial-sum chunk in parallel reductions.
const REDUCE_CHUNK: usize = 8;

/// Strided matrix view used by [`gemm`].
#[derive(Clone, Copy)]
struct MatView {
    rs: isize,
    cs: isize,
}

impl MatView {
    fn row_major(cols: usize) -> Self {
        Self { rs: cols as isize, cs: 1 }
    }

    fn t(self) -> Self {
        Self { rs: self.cs, cs: self.rs }
    }
}

/// `c = a·b + beta·c` for an `m×k` by `k×n` product.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], av: MatView, b: &[f64], bv: MatView, beta: f64, c: &mut [f64], cv: MatView) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, v: MatView| {
        if rows == 0 || cols == 0 {
            0
        } else {
            ((rows - 1) as isize * v.rs + (cols - 1) as isize * v.cs) as usize + 1
        }
    };
    assert!(a.len() >= span(m, k, av), "gemm: lhs buffer too small");
    assert!(b.len() >= span(k, n, bv), "gemm: rhs buffer too small");
    assert!(c.len() >= span(m, n, cv), "gemm: output buffer too small");
    // SAFETY: the asserts above bound every index reachable through the given
    // strides, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            av.rs,
            av.cs,
            b.as_ptr(),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr(),
            cv.rs,
            cv.cs,
        );
    }
}

/// Sum per-sample contributions over the batch into a buffer of `len`,
/// combining fixed chunks in order.
fn batch_reduce<F>(batch: usize, len: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let chunks: Vec<Vec<f64>> = (0..batch.div_ceil(REDUCE_CHUNK))
        .into_par_iter()
        .map(|ci| {
            let mut acc = vec![0.0; len];
            for b in ci * REDUCE_CHUNK..((ci + 1) * REDUCE_CHUNK).min(batch) {
                f(b, &mut acc);
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; len];
    for c in chunks {
        for (o, v) in out.iter_mut().zip(c) {
            *o += v;
        }
    }
    out
}

// ----------------------------------------------------------------------------
// Elementwise
// ----------------------------------------------------------------------------

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "sub", |x, y| x - y)
}

/// Elementwise (Hadamard) product of equal-shaped tensors.
pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "hadamard", |x, y| x * y)
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    a.map(|x| s * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

// ----------------------------------------------------------------------------
// Matrix products
// ----------------------------------------------------------------------------

/// Matrix product `[..., m, k] · [k, n]` or `[..., m, k] · [..., k, n]`.
///
/// Leading axes of `a` are batch axes; `b` is either a single matrix shared by
/// every batch entry or carries the same leading axes.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, m, k, n, shared) = matmul_dims(a, b)?;
    let mut out_shape = a.shape()[..a.rank() - 1].to_vec();
    out_shape.push(n);
    let mut out = vec![0.0; batch * m * n];
    out.par_chunks_mut(m * n).enumerate().for_each(|(i, c)| {
        let a_i = &a.data()[i * m * k..(i + 1) * m * k];
        let b_i = if shared { b.data() } else { &b.data()[i * k * n..(i + 1) * k * n] };
        gemm(m, k, n, a_i, MatView::row_major(k), b_i, MatView::row_major(n), 0.0, c, MatView::row_major(n));
    });
    Ok(Tensor::from_parts(out_shape, out))
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize, bool)> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(shape_err("matmul", a.shape(), b.shape()));
    }
    let (m, k) = (a.dim(a.rank() - 2), a.dim(a.rank() - 1));
    let (k2, n) = (b.dim(b.rank() - 2), b.dim(b.rank() - 1));
    if k != k2 {
        return Err(shape_err("matmul", a.shape(), b.shape()));
    }
    let lead_a = &a.shape()[..a.rank() - 2];
    let lead_b = &b.shape()[..b.rank() - 2];
    let shared = lead_b.is_empty();
    if !shared && lead_a != lead_b {
        return Err(shape_err("matmul", a.shape(), b.shape()));
    }
    Ok((lead_a.iter().product(), m, k, n, shared))
}

/// Gradients of [`matmul`] with respect to both operands.
pub fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let (batch, m, k, n, shared) = matmul_dims(a, b)?;
    let mut ga = vec![0.0; a.len()];
    ga.par_chunks_mut(m * k).enumerate().for_each(|(i, ga_i)| {
        let g_i = &g.data()[i * m * n..(i + 1) * m * n];
        let b_i = if shared { b.data() } else { &b.data()[i * k * n..(i + 1) * k * n] };
        gemm(m, n, k, g_i, MatView::row_major(n), b_i, MatView::row_major(n).t(), 0.0, ga_i, MatView::row_major(k));
    });
    let gb = if shared {
        batch_reduce(batch, k * n, |i, acc| {
            let a_i = &a.data()[i * m * k..(i + 1) * m * k];
            let g_i = &g.data()[i * m * n..(i + 1) * m * n];
            gemm(k, m, n, a_i, MatView::row_major(k).t(), g_i, MatView::row_major(n), 1.0, acc, MatView::row_major(n));
        })
    } else {
        let mut gb = vec![0.0; b.len()];
        gb.par_chunks_mut(k * n).enumerate().for_each(|(i, gb_i)| {
            let a_i = &a.data()[i * m * k..(i + 1) * m * k];
            let g_i = &g.data()[i * m * n..(i + 1) * m * n];
            gemm(k, m, n, a_i, MatView::row_major(k).t(), g_i, MatView::row_major(n), 0.0, gb_i, MatView::row_major(n));
        });
        gb
    };
    Ok((
        Tensor::from_parts(a.shape().to_vec(), ga),
        Tensor::from_parts(b.shape().to_vec(), gb),
    ))
}

fn bmm_dims(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<(usize, usize, usize, usize)> {
    if a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) {
        return Err(shape_err("bmm", a.shape(), b.shape()));
    }
    let (m, k) = if ta { (a.dim(2), a.dim(1)) } else { (a.dim(1), a.dim(2)) };
    let (k2, n) = if tb { (b.dim(2), b.dim(1)) } else { (b.dim(1), b.dim(2)) };
    if k != k2 {
        return Err(shape_err("bmm", a.shape(), b.shape()));
    }
    Ok((a.dim(0), m, k, n))
}

fn view(t: &Tensor, transposed: bool) -> MatView {
    let v = MatView::row_major(t.dim(2));
    if transposed {
        v.t()
    } else {
        v
    }
}

/// Batched product `op(a[g]) · op(b[g])` where `op` optionally transposes.
pub fn bmm(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    let (g, m, k, n) = bmm_dims(a, b, ta, tb)?;
    let (sa, sb) = (a.dim(1) * a.dim(2), b.dim(1) * b.dim(2));
    let (va, vb) = (view(a, ta), view(b, tb));
    let mut out = vec![0.0; g * m * n];
    out.par_chunks_mut(m * n).enumerate().for_each(|(i, c)| {
        gemm(m, k, n, &a.data()[i * sa..(i + 1) * sa], va, &b.data()[i * sb..(i + 1) * sb], vb, 0.0, c, MatView::row_major(n));
    });
    Ok(Tensor::from_parts(vec![g, m, n], out))
}

/// Gradients of [`bmm`] with respect to both operands.
pub fn bmm_backward(a: &Tensor, b: &Tensor, ta: bool, tb: bool, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, m, k, n) = bmm_dims(a, b, ta, tb)?;
    let (sa, sb) = (a.dim(1) * a.dim(2), b.dim(1) * b.dim(2));
    let (va, vb) = (view(a, ta), view(b, tb));
    let vg = MatView::row_major(n);
    let mut ga = vec![0.0; a.len()];
    ga.par_chunks_mut(sa).enumerate().for_each(|(i, ga_i)| {
        let g_i = &grad.data()[i * m * n..(i + 1) * m * n];
        let b_i = &b.data()[i * sb..(i + 1) * sb];
        // d op(a) = grad · op(b)^T, written through the transposed view when needed.
        gemm(m, n, k, g_i, vg, b_i, vb.t(), 0.0, ga_i, view(a, ta));
    });
    let mut gb = vec![0.0; b.len()];
    gb.par_chunks_mut(sb).enumerate().for_each(|(i, gb_i)| {
        let g_i = &grad.data()[i * m * n..(i + 1) * m * n];
        let a_i = &a.data()[i * sa..(i + 1) * sa];
        gemm(k, m, n, a_i, va.t(), g_i, vg, 0.0, gb_i, view(b, tb));
    });
    Ok((
        Tensor::from_parts(a.shape().to_vec(), ga),
        Tensor::from_parts(b.shape().to_vec(), gb),
    ))
}

// ----------------------------------------------------------------------------
// Channel-axis operations. Axis 1 is the channel axis; trailing axes are
// flattened into "positions". A rank-2 tensor `[N, d]` has one position.
// ----------------------------------------------------------------------------

fn channel_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(Error::InvalidShape(x.shape().to_vec(), "expected [batch, channels, ...]".into()));
    }
    Ok((x.dim(0), x.dim(1), x.shape()[2..].iter().product()))
}

/// Pointwise projection over the channel axis: `y[b,:,s] = W · x[b,:,s] + bias`.
///
/// Covers both linear layers on `[N, d]` rows and 1×1 convolutions.
pub fn channel_linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (bsz, c, s) = channel_dims(x)?;
    if w.rank() != 2 || w.dim(1) != c {
        return Err(shape_err("channel_linear", x.shape(), w.shape()));
    }
    let o = w.dim(0);
    if let Some(b) = bias {
        if b.len() != o {
            return Err(shape_err("channel_linear bias", w.shape(), b.shape()));
        }
    }
    let mut shape = x.shape().to_vec();
    shape[1] = o;
    let mut out = vec![0.0; bsz * o * s];
    if s == 1 {
        gemm(bsz, c, o, x.data(), MatView::row_major(c), w.data(), MatView::row_major(c).t(), 0.0, &mut out, MatView::row_major(o));
        if let Some(b) = bias {
            for row in out.chunks_mut(o) {
                for (v, bb) in row.iter_mut().zip(b.data()) {
                    *v += bb;
                }
            }
        }
    } else {
        out.par_chunks_mut(o * s).enumerate().for_each(|(i, y)| {
            if let Some(b) = bias {
                for (row, bb) in y.chunks_mut(s).zip(b.data()) {
                    row.fill(*bb);
                }
            }
            let beta = if bias.is_some() { 1.0 } else { 0.0 };
            gemm(o, c, s, w.data(), MatView::row_major(c), &x.data()[i * c * s..(i + 1) * c * s], MatView::row_major(s), beta, y, MatView::row_major(s));
        });
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Gradients of [`channel_linear`]: `(dx, dw, dbias)`. `dx` is skipped when
/// `need_dx` is false.
pub fn channel_linear_backward(x: &Tensor, w: &Tensor, g: &Tensor, need_dx: bool) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let (bsz, c, s) = channel_dims(x)?;
    let o = w.dim(0);
    let mut db = vec![0.0; o];
    if s == 1 {
        for row in g.data().chunks(o) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        let mut dw = vec![0.0; o * c];
        gemm(o, bsz, c, g.data(), MatView::row_major(o).t(), x.data(), MatView::row_major(c), 0.0, &mut dw, MatView::row_major(c));
        let dx = need_dx.then(|| {
            let mut dx = vec![0.0; bsz * c];
            gemm(bsz, o, c, g.data(), MatView::row_major(o), w.data(), MatView::row_major(c), 0.0, &mut dx, MatView::row_major(c));
            Tensor::from_parts(x.shape().to_vec(), dx)
        });
        return Ok((dx, Tensor::from_parts(w.shape().to_vec(), dw), Tensor::from_parts(vec![o], db)));
    }
    let dw = batch_reduce(bsz, o * c, |i, acc| {
        let g_i = &g.data()[i * o * s..(i + 1) * o * s];
        let x_i = &x.data()[i * c * s..(i + 1) * c * s];
        gemm(o, s, c, g_i, MatView::row_major(s), x_i, MatView::row_major(s).t(), 1.0, acc, MatView::row_major(c));
    });
    for i in 0..bsz {
        for (oc, d) in db.iter_mut().enumerate() {
            *d += g.data()[(i * o + oc) * s..(i * o + oc + 1) * s].iter().sum::<f64>();
        }
    }
    let dx = need_dx.then(|| {
        let mut dx = vec![0.0; bsz * c * s];
        dx.par_chunks_mut(c * s).enumerate().for_each(|(i, dx_i)| {
            let g_i = &g.data()[i * o * s..(i + 1) * o * s];
            gemm(c, o, s, w.data(), MatView::row_major(c).t(), g_i, MatView::row_major(s), 0.0, dx_i, MatView::row_major(s));
        });
        Tensor::from_parts(x.shape().to_vec(), dx)
    });
    Ok((dx, Tensor::from_parts(w.shape().to_vec(), dw), Tensor::from_parts(vec![o], db)))
}

/// Reverse the channel order: output channel `c` is input channel `C-1-c`.
pub fn channel_flip(x: &Tensor) -> Result<Tensor> {
    let (bsz, c, s) = channel_dims(x)?;
    let mut out = vec![0.0; x.len()];
    for b in 0..bsz {
        for ch in 0..c {
            let src = (b * c + (c - 1 - ch)) * s;
            let dst = (b * c + ch) * s;
            out[dst..dst + s].copy_from_slice(&x.data()[src..src + s]);
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Multiply every channel by its own scalar.
pub fn channel_scale(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let (bsz, c, sp) = channel_dims(x)?;
    if s.len() != c {
        return Err(shape_err("channel_scale", x.shape(), s.shape()));
    }
    let mut out = x.data().to_vec();
    for b in 0..bsz {
        for ch in 0..c {
            let k = s.data()[ch];
            out[(b * c + ch) * sp..(b * c + ch + 1) * sp].iter_mut().for_each(|v| *v *= k);
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Mean over all positions: `[B, C, ...] -> [B, C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (bsz, c, s) = channel_dims(x)?;
    let data = x.data().chunks(s).map(|p| p.iter().sum::<f64>() / s as f64).collect();
    Ok(Tensor::from_parts(vec![bsz, c], data))
}

// ----------------------------------------------------------------------------
// Convolution
// ----------------------------------------------------------------------------

/// Square-kernel convolution hyperparameters (cross-correlation convention).
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        Self { stride, padding, dilation, groups }
    }

    /// Stride 1, padding chosen so the output keeps the input size.
    pub fn same(kernel: usize, dilation: usize, groups: usize) -> Self {
        Self::new(1, dilation * (kernel - 1) / 2, dilation, groups)
    }
}

/// Output extent `⌊(n + 2p − d(k−1) − 1)/s⌋ + 1`, or `None` if it is below 1.
pub fn conv_out_size(n: usize, k: usize, spec: &Conv2dSpec) -> Option<usize> {
    let span = spec.dilation * (k - 1) + 1;
    let padded = n + 2 * spec.padding;
    (padded >= span && spec.stride > 0).then(|| (padded - span) / spec.stride + 1)
}

#[derive(Clone, Copy)]
struct ConvGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    s: usize,
    p: usize,
    d: usize,
    g: usize,
}

impl ConvGeom {
    fn new(x: &Tensor, w: &Tensor, spec: &Conv2dSpec) -> Result<Self> {
        if x.rank() != 4 || w.rank() != 4 {
            return Err(shape_err("conv2d", x.shape(), w.shape()));
        }
        let (b, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (o, cg, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        let g = spec.groups;
        if g == 0 || c % g != 0 || o % g != 0 || cg != c / g {
            return Err(shape_err("conv2d", x.shape(), w.shape()));
        }
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(invalid("conv2d: stride and dilation must be >= 1"));
        }
        let oh = conv_out_size(h, kh, spec);
        let ow = conv_out_size(wd, kw, spec);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(invalid(format!(
                "conv2d: input {h}x{wd} too small for kernel {kh}x{kw} with {spec:?}"
            )));
        };
        Ok(Self { b, c, h, w: wd, o, kh, kw, oh, ow, s: spec.stride, p: spec.padding, d: spec.dilation, g })
    }

    fn depthwise(&self) -> bool {
        self.g == self.c && self.o == self.c
    }

    /// Valid output range `[lo, hi)` along one axis for kernel tap `k`.
    fn valid(&self, k: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        // input index = o*s + k*d - p must lie in [0, n_in)
        let off = (k * self.d) as isize - self.p as isize;
        let s = self.s as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_num = n_in as isize - off;
        let hi = if hi_num <= 0 { 0 } else { ((hi_num - 1) / s + 1).min(n_out as isize) };
        let lo = lo.clamp(0, n_out as isize);
        (lo as usize, hi.max(lo) as usize)
    }
}

/// 2-D cross-correlation of `x: [B, C, H, W]` with `w: [O, C/g, kh, kw]`.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: &Conv2dSpec) -> Result<Tensor> {
    let geo = ConvGeom::new(x, w, spec)?;
    if let Some(b) = bias {
        if b.len() != geo.o {
            return Err(shape_err("conv2d bias", w.shape(), b.shape()));
        }
    }
    let plane_out = geo.oh * geo.ow;
    let mut out = vec![0.0; geo.b * geo.o * plane_out];
    if geo.depthwise() {
        out.par_chunks_mut(plane_out).enumerate().for_each(|(bc, y)| {
            let ch = bc % geo.c;
            let xp = &x.data()[bc * geo.h * geo.w..(bc + 1) * geo.h * geo.w];
            let wk = &w.data()[ch * geo.kh * geo.kw..(ch + 1) * geo.kh * geo.kw];
            if let Some(b) = bias {
                y.fill(b.data()[ch]);
            }
            depthwise_plane(&geo, xp, wk, y);
        });
    } else {
        let cg = geo.c / geo.g;
        let og = geo.o / geo.g;
        let kk = geo.kh * geo.kw;
        out.par_chunks_mut(geo.o * plane_out).enumerate().for_each(|(bi, y)| {
            let xb = &x.data()[bi * geo.c * geo.h * geo.w..(bi + 1) * geo.c * geo.h * geo.w];
            let mut cols = Vec::new();
            for gi in 0..geo.g {
                let xg = &xb[gi * cg * geo.h * geo.w..(gi + 1) * cg * geo.h * geo.w];
                let yg = &mut y[gi * og * plane_out..(gi + 1) * og * plane_out];
                let wg = &w.data()[gi * og * cg * kk..(gi + 1) * og * cg * kk];
                let src: &[f64] = if is_pointwise(&geo) {
                    xg
                } else {
                    im2col(&geo, xg, cg, &mut cols);
                    &cols
                };
                gemm(og, cg * kk, plane_out, wg, MatView::row_major(cg * kk), src, MatView::row_major(plane_out), 0.0, yg, MatView::row_major(plane_out));
            }
            if let Some(b) = bias {
                for (row, bb) in y.chunks_mut(plane_out).zip(b.data()) {
                    row.iter_mut().for_each(|v| *v += bb);
                }
            }
        });
    }
    Ok(Tensor::from_parts(vec![geo.b, geo.o, geo.oh, geo.ow], out))
}

fn is_pointwise(geo: &ConvGeom) -> bool {
    geo.kh == 1 && geo.kw == 1 && geo.s == 1 && geo.p == 0
}

fn depthwise_plane(geo: &ConvGeom, xp: &[f64], wk: &[f64], y: &mut [f64]) {
    for ky in 0..geo.kh {
        let (oy0, oy1) = geo.valid(ky, geo.h, geo.oh);
        for kx in 0..geo.kw {
            let (ox0, ox1) = geo.valid(kx, geo.w, geo.ow);
            if ox0 == ox1 {
                continue;
            }
            let wv = wk[ky * geo.kw + kx];
            for oy in oy0..oy1 {
                let iy = oy * geo.s + ky * geo.d - geo.p;
                let xrow = &xp[iy * geo.w..(iy + 1) * geo.w];
                let yrow = &mut y[oy * geo.ow..(oy + 1) * geo.ow];
                if geo.s == 1 {
                    let ix0 = ox0 + kx * geo.d - geo.p;
                    for (yv, xv) in yrow[ox0..ox1].iter_mut().zip(&xrow[ix0..ix0 + (ox1 - ox0)]) {
                        *yv += wv * xv;
                    }
                } else {
                    for ox in ox0..ox1 {
                        yrow[ox] += wv * xrow[ox * geo.s + kx * geo.d - geo.p];
                    }
                }
            }
        }
    }
}

/// Unfold one group of one sample into `[cg·kh·kw, oh·ow]`.
fn im2col(geo: &ConvGeom, xg: &[f64], cg: usize, cols: &mut Vec<f64>) {
    let plane_out = geo.oh * geo.ow;
    cols.clear();
    cols.resize(cg * geo.kh * geo.kw * plane_out, 0.0);
    for ci in 0..cg {
        let xp = &xg[ci * geo.h * geo.w..(ci + 1) * geo.h * geo.w];
        for ky in 0..geo.kh {
            let (oy0, oy1) = geo.valid(ky, geo.h, geo.oh);
            for kx in 0..geo.kw {
                let (ox0, ox1) = geo.valid(kx, geo.w, geo.ow);
                let row = ((ci * geo.kh + ky) * geo.kw + kx) * plane_out;
                for oy in oy0..oy1 {
                    let iy = oy * geo.s + ky * geo.d - geo.p;
                    for ox in ox0..ox1 {
                        cols[row + oy * geo.ow + ox] = xp[iy * geo.w + ox * geo.s + kx * geo.d - geo.p];
                    }
                }
            }
        }
    }
}

/// Fold `[cg·kh·kw, oh·ow]` columns back onto a group's input planes (adding).
fn col2im(geo: &ConvGeom, cols: &[f64], cg: usize, dxg: &mut [f64]) {
    let plane_out = geo.oh * geo.ow;
    for ci in 0..cg {
        let dxp = &mut dxg[ci * geo.h * geo.w..(ci + 1) * geo.h * geo.w];
        for ky in 0..geo.kh {
            let (oy0, oy1) = geo.valid(ky, geo.h, geo.oh);
            for kx in 0..geo.kw {
                let (ox0, ox1) = geo.valid(kx, geo.w, geo.ow);
                let row = ((ci * geo.kh + ky) * geo.kw + kx) * plane_out;
                for oy in oy0..oy1 {
                    let iy = oy * geo.s + ky * geo.d - geo.p;
                    for ox in ox0..ox1 {
                        dxp[iy * geo.w + ox * geo.s + kx * geo.d - geo.p] += cols[row + oy * geo.ow + ox];
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv2d`]: `(dx, dw, dbias)`; `dx` only when `need_dx`.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    spec: &Conv2dSpec,
    need_dx: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let geo = ConvGeom::new(x, w, spec)?;
    let plane_out = geo.oh * geo.ow;
    let plane_in = geo.h * geo.w;
    let mut db = vec![0.0; geo.o];
    for (i, row) in g.data().chunks(plane_out).enumerate() {
        db[i % geo.o] += row.iter().sum::<f64>();
    }
    if geo.depthwise() {
        let kk = geo.kh * geo.kw;
        // Per-plane weight gradients, summed in plane order.
        let partial: Vec<Vec<f64>> = (0..geo.b * geo.c)
            .into_par_iter()
            .map(|bc| {
                let xp = &x.data()[bc * plane_in..(bc + 1) * plane_in];
                let gp = &g.data()[bc * plane_out..(bc + 1) * plane_out];
                depthwise_plane_dw(&geo, xp, gp)
            })
            .collect();
        let mut dw = vec![0.0; geo.c * kk];
        for (bc, p) in partial.into_iter().enumerate() {
            let ch = bc % geo.c;
            for (d, v) in dw[ch * kk..(ch + 1) * kk].iter_mut().zip(p) {
                *d += v;
            }
        }
        let dx = need_dx.then(|| {
            let mut dx = vec![0.0; x.len()];
            dx.par_chunks_mut(plane_in).enumerate().for_each(|(bc, dxp)| {
                let ch = bc % geo.c;
                let gp = &g.data()[bc * plane_out..(bc + 1) * plane_out];
                depthwise_plane_dx(&geo, gp, &w.data()[ch * kk..(ch + 1) * kk], dxp);
            });
            Tensor::from_parts(x.shape().to_vec(), dx)
        });
        return Ok((dx, Tensor::from_parts(w.shape().to_vec(), dw), Tensor::from_parts(vec![geo.o], db)));
    }
    let cg = geo.c / geo.g;
    let og = geo.o / geo.g;
    let ck = cg * geo.kh * geo.kw;
    let pointwise = is_pointwise(&geo);
    let dw = batch_reduce(geo.b, w.len(), |bi, acc| {
        let xb = &x.data()[bi * geo.c * plane_in..(bi + 1) * geo.c * plane_in];
        let gb = &g.data()[bi * geo.o * plane_out..(bi + 1) * geo.o * plane_out];
        let mut cols = Vec::new();
        for gi in 0..geo.g {
            let xg = &xb[gi * cg * plane_in..(gi + 1) * cg * plane_in];
            let src: &[f64] = if pointwise {
                xg
            } else {
                im2col(&geo, xg, cg, &mut cols);
                &cols
            };
            let gg = &gb[gi * og * plane_out..(gi + 1) * og * plane_out];
            gemm(og, plane_out, ck, gg, MatView::row_major(plane_out), src, MatView::row_major(plane_out).t(), 1.0, &mut acc[gi * og * ck..(gi + 1) * og * ck], MatView::row_major(ck));
        }
    });
    let dx = need_dx.then(|| {
        let mut dx = vec![0.0; x.len()];
        dx.par_chunks_mut(geo.c * plane_in).enumerate().for_each(|(bi, dxb)| {
            let gb = &g.data()[bi * geo.o * plane_out..(bi + 1) * geo.o * plane_out];
            let mut cols = vec![0.0; if pointwise { 0 } else { ck * plane_out }];
            for gi in 0..geo.g {
                let wg = &w.data()[gi * og * ck..(gi + 1) * og * ck];
                let gg = &gb[gi * og * plane_out..(gi + 1) * og * plane_out];
                let dxg = &mut dxb[gi * cg * plane_in..(gi + 1) * cg * plane_in];
                if pointwise {
                    gemm(ck, og, plane_out, wg, MatView::row_major(ck).t(), gg, MatView::row_major(plane_out), 0.0, dxg, MatView::row_major(plane_out));
                } else {
                    gemm(ck, og, plane_out, wg, MatView::row_major(ck).t(), gg, MatView::row_major(plane_out), 0.0, &mut cols, MatView::row_major(plane_out));
                    col2im(&geo, &cols, cg, dxg);
                }
            }
        });
        Tensor::from_parts(x.shape().to_vec(), dx)
    });
    Ok((dx, Tensor::from_parts(w.shape().to_vec(), dw), Tensor::from_parts(vec![geo.o], db)))
}

fn depthwise_plane_dw(geo: &ConvGeom, xp: &[f64], gp: &[f64]) -> Vec<f64> {
    let mut dw = vec![0.0; geo.kh * geo.kw];
    for ky in 0..geo.kh {
        let (oy0, oy1) = geo.valid(ky, geo.h, geo.oh);
        for kx in 0..geo.kw {
            let (ox0, ox1) = geo.valid(kx, geo.w, geo.ow);
            let mut acc = 0.0;
            for oy in oy0..oy1 {
                let iy = oy * geo.s + ky * geo.d - geo.p;
                for ox in ox0..ox1 {
                    acc += gp[oy * geo.ow + ox] * xp[iy * geo.w + ox * geo.s + kx * geo.d - geo.p];
                }
            }
            dw[ky * geo.kw + kx] = acc;
        }
    }
    dw
}

fn depthwise_plane_dx(geo: &ConvGeom, gp: &[f64], wk: &[f64], dxp: &mut [f64]) {
    for ky in 0..geo.kh {
        let (oy0, oy1) = geo.valid(ky, geo.h, geo.oh);
        for kx in 0..geo.kw {
            let (ox0, ox1) = geo.valid(kx, geo.w, geo.ow);
            let wv = wk[ky * geo.kw + kx];
            for oy in oy0..oy1 {
                let iy = oy * geo.s + ky * geo.d - geo.p;
                for ox in ox0..ox1 {
                    dxp[iy * geo.w + ox * geo.s + kx * geo.d - geo.p] += wv * gp[oy * geo.ow + ox];
                }
            }
        }
    }
}

// ----------------------------------------------------------------------------
// Normalization kernels
// ----------------------------------------------------------------------------

/// Saved statistics of a normalization forward pass.
#[derive(Clone, Debug)]
pub struct NormCache {
    /// Normalized input before the affine.
    pub xhat: Tensor,
    /// `1/sqrt(var + eps)` per statistic group.
    pub rstd: Vec<f64>,
}

/// LayerNorm over the channel axis at every position, population variance.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, NormCache)> {
    let (bsz, c, s) = channel_dims(x)?;
    if gamma.len() != c || beta.len() != c {
        return Err(shape_err("layer_norm", x.shape(), gamma.shape()));
    }
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    let mut rstd = vec![0.0; bsz * s];
    for b in 0..bsz {
        let xb = &x.data()[b * c * s..(b + 1) * c * s];
        let mut mean = vec![0.0; s];
        for row in xb.chunks(s) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= c as f64);
        let mut var = vec![0.0; s];
        for row in xb.chunks(s) {
            for ((v, m), xv) in var.iter_mut().zip(&mean).zip(row) {
                *v += (xv - m) * (xv - m);
            }
        }
        let rs: Vec<f64> = var.iter().map(|v| 1.0 / (v / c as f64 + eps).sqrt()).collect();
        for ch in 0..c {
            let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
            let base = (b * c + ch) * s;
            for p in 0..s {
                let h = (xb[ch * s + p] - mean[p]) * rs[p];
                xhat[base + p] = h;
                y[base + p] = gm * h + bt;
            }
        }
        rstd[b * s..(b + 1) * s].copy_from_slice(&rs);
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::from_parts(shape.clone(), y),
        NormCache { xhat: Tensor::from_parts(shape, xhat), rstd },
    ))
}

/// Gradients of [`layer_norm`]: `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(cache: &NormCache, gamma: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let xhat = &cache.xhat;
    let (bsz, c, s) = (xhat.dim(0), xhat.dim(1), xhat.len() / (xhat.dim(0) * xhat.dim(1)));
    let mut dx = vec![0.0; xhat.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..bsz {
        let mut mean_d = vec![0.0; s];
        let mut mean_dx = vec![0.0; s];
        for ch in 0..c {
            let base = (b * c + ch) * s;
            let gm = gamma.data()[ch];
            for p in 0..s {
                let gv = g.data()[base + p];
                let h = xhat.data()[base + p];
                dgamma[ch] += gv * h;
                dbeta[ch] += gv;
                let d = gv * gm;
                mean_d[p] += d;
                mean_dx[p] += d * h;
            }
        }
        for p in 0..s {
            mean_d[p] /= c as f64;
            mean_dx[p] /= c as f64;
        }
        for ch in 0..c {
            let base = (b * c + ch) * s;
            let gm = gamma.data()[ch];
            for p in 0..s {
                let d = g.data()[base + p] * gm;
                dx[base + p] = cache.rstd[b * s + p] * (d - mean_d[p] - xhat.data()[base + p] * mean_dx[p]);
            }
        }
    }
    (
        Tensor::from_parts(xhat.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}

/// Per-position statistics over the batch and channel axes.
pub fn position_stats(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (bsz, c, s) = channel_dims(x)?;
    let n = (bsz * c) as f64;
    let mut mean = vec![0.0; s];
    for row in x.data().chunks(s) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; s];
    for row in x.data().chunks(s) {
        for ((v, m), xv) in var.iter_mut().zip(&mean).zip(row) {
            *v += (xv - m) * (xv - m);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    Ok((mean, var))
}

/// Affine parameters of the position-wise batch norm.
#[derive(Clone, Copy)]
pub struct FactorizedAffine<'a> {
    pub gamma_c: &'a Tensor,
    pub gamma_hw: &'a Tensor,
    pub beta_c: &'a Tensor,
    pub beta_hw: &'a Tensor,
}

/// `(γ_c γ_hw)·(x − μ_hw)·rstd_hw + (β_c + β_hw)` given per-position `mean`
/// and `var`.
pub fn position_norm(x: &Tensor, mean: &[f64], var: &[f64], eps: f64, aff: FactorizedAffine<'_>) -> Result<(Tensor, NormCache)> {
    let (bsz, c, s) = channel_dims(x)?;
    if aff.gamma_c.len() != c || aff.beta_c.len() != c {
        return Err(shape_err("poly_bn channel affine", x.shape(), aff.gamma_c.shape()));
    }
    if aff.gamma_hw.len() != s || aff.beta_hw.len() != s || mean.len() != s || var.len() != s {
        return Err(shape_err("poly_bn position affine", x.shape(), aff.gamma_hw.shape()));
    }
    let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for b in 0..bsz {
        for ch in 0..c {
            let base = (b * c + ch) * s;
            let (gc, bc) = (aff.gamma_c.data()[ch], aff.beta_c.data()[ch]);
            for p in 0..s {
                let h = (x.data()[base + p] - mean[p]) * rstd[p];
                xhat[base + p] = h;
                y[base + p] = gc * aff.gamma_hw.data()[p] * h + bc + aff.beta_hw.data()[p];
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok((Tensor::from_parts(shape.clone(), y), NormCache { xhat: Tensor::from_parts(shape, xhat), rstd }))
}

/// Gradients of [`position_norm`]. With `batch_stats` the mean and variance
/// are functions of `x`; otherwise they are constants.
/// Returns `(dx, dγ_c, dγ_hw, dβ_c, dβ_hw)`.
pub fn position_norm_backward(cache: &NormCache, aff: FactorizedAffine<'_>, g: &Tensor, batch_stats: bool) -> [Tensor; 5] {
    let xhat = &cache.xhat;
    let (bsz, c) = (xhat.dim(0), xhat.dim(1));
    let s = xhat.len() / (bsz * c);
    let mut dgc = vec![0.0; c];
    let mut dghw = vec![0.0; s];
    let mut dbc = vec![0.0; c];
    let mut dbhw = vec![0.0; s];
    let mut mean_d = vec![0.0; s];
    let mut mean_dx = vec![0.0; s];
    for b in 0..bsz {
        for ch in 0..c {
            let base = (b * c + ch) * s;
            let gc = aff.gamma_c.data()[ch];
            for p in 0..s {
                let gv = g.data()[base + p];
                let h = xhat.data()[base + p];
                let ghw = aff.gamma_hw.data()[p];
                dgc[ch] += gv * h * ghw;
                dghw[p] += gv * h * gc;
                dbc[ch] += gv;
                dbhw[p] += gv;
                let d = gv * gc * ghw;
                mean_d[p] += d;
                mean_dx[p] += d * h;
            }
        }
    }
    let n = (bsz * c) as f64;
    mean_d.iter_mut().for_each(|v| *v /= n);
    mean_dx.iter_mut().for_each(|v| *v /= n);
    let mut dx = vec![0.0; xhat.len()];
    for b in 0..bsz {
        for ch in 0..c {
            let base = (b * c + ch) * s;
            let gc = aff.gamma_c.data()[ch];
            for p in 0..s {
                let d = g.data()[base + p] * gc * aff.gamma_hw.data()[p];
                dx[base + p] = if batch_stats {
                    cache.rstd[p] * (d - mean_d[p] - xhat.data()[base + p] * mean_dx[p])
                } else {
                    cache.rstd[p] * d
                };
            }
        }
    }
    [
        Tensor::from_parts(xhat.shape().to_vec(), dx),
        Tensor::from_parts(aff.gamma_c.shape().to_vec(), dgc),
        Tensor::from_parts(aff.gamma_hw.shape().to_vec(), dghw),
        Tensor::from_parts(aff.beta_c.shape().to_vec(), dbc),
        Tensor::from_parts(aff.beta_hw.shape().to_vec(), dbhw),
    ]
}

// ----------------------------------------------------------------------------
// Attention kernels on `[G, N, N]` score tensors, `G = batch · heads`.
// ----------------------------------------------------------------------------

/// `base^e` by repeated multiplication (`e-1` multiplies; `e = 0` gives 1).
pub fn int_pow(base: f64, e: u32) -> f64 {
    if e == 0 {
        return 1.0;
    }
    let mut acc = base;
    for _ in 1..e {
        acc *= base;
    }
    acc
}

/// Elementwise `(s_h · score + 1)^p` where `h = g mod heads`.
pub fn poly_kernel(scores: &Tensor, s: &[f64], p: u32) -> Result<Tensor> {
    let heads = s.len();
    if p == 0 {
        return Err(invalid("poly_kernel: degree must be >= 1"));
    }
    if scores.rank() != 3 || heads == 0 || scores.dim(0) % heads != 0 {
        return Err(shape_err("poly_kernel", scores.shape(), &[heads]));
    }
    let nn = scores.dim(1) * scores.dim(2);
    let mut out = scores.data().to_vec();
    for (g, blk) in out.chunks_mut(nn).enumerate() {
        let sh = s[g % heads];
        blk.iter_mut().for_each(|v| *v = int_pow(sh * *v + 1.0, p));
    }
    Ok(Tensor::from_parts(scores.shape().to_vec(), out))
}

/// Gradients of [`poly_kernel`] with respect to the scores and the scales.
pub fn poly_kernel_backward(scores: &Tensor, s: &[f64], p: u32, g: &Tensor) -> (Tensor, Vec<f64>) {
    let heads = s.len();
    let nn = scores.dim(1) * scores.dim(2);
    let mut dscores = vec![0.0; scores.len()];
    let mut ds = vec![0.0; heads];
    for (gi, (blk, dblk)) in scores.data().chunks(nn).zip(dscores.chunks_mut(nn)).enumerate() {
        let h = gi % heads;
        let sh = s[h];
        let gblk = &g.data()[gi * nn..(gi + 1) * nn];
        for ((x, d), gv) in blk.iter().zip(dblk.iter_mut()).zip(gblk) {
            let dpow = p as f64 * int_pow(sh * x + 1.0, p - 1);
            *d = gv * dpow * sh;
            ds[h] += gv * dpow * x;
        }
    }
    (Tensor::from_parts(scores.shape().to_vec(), dscores), ds)
}

/// Divide each row by its sum plus `eps`. Returns the output and row sums.
pub fn l1_row_normalize(a: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    let n = *a.shape().last().unwrap();
    let mut out = a.data().to_vec();
    let mut sums = Vec::with_capacity(a.len() / n);
    for row in out.chunks_mut(n) {
        let r: f64 = row.iter().sum();
        let inv = 1.0 / (r + eps);
        row.iter_mut().for_each(|v| *v *= inv);
        sums.push(r);
    }
    Ok((Tensor::from_parts(a.shape().to_vec(), out), sums))
}

pub fn l1_row_normalize_backward(a: &Tensor, sums: &[f64], eps: f64, g: &Tensor) -> Tensor {
    let n = *a.shape().last().unwrap();
    let mut da = vec![0.0; a.len()];
    for (i, ((arow, grow), drow)) in a.data().chunks(n).zip(g.data().chunks(n)).zip(da.chunks_mut(n)).enumerate() {
        let r = sums[i] + eps;
        let dot: f64 = arow.iter().zip(grow).map(|(x, y)| x * y).sum();
        let corr = dot / (r * r);
        for (d, gv) in drow.iter_mut().zip(grow) {
            *d = gv / r - corr;
        }
    }
    Tensor::from_parts(a.shape().to_vec(), da)
}

/// Row sums of `[G, N, N]` averaged over the batch: `[heads, N]`.
pub fn batch_mean_row_sums(a: &Tensor, heads: usize) -> Result<Tensor> {
    if a.rank() != 3 || a.dim(0) % heads != 0 {
        return Err(shape_err("row sums", a.shape(), &[heads]));
    }
    let n = a.dim(1);
    let m = a.dim(2);
    let batch = a.dim(0) / heads;
    let mut out = vec![0.0; heads * n];
    for (gi, blk) in a.data().chunks(n * m).enumerate() {
        let h = gi % heads;
        for (i, row) in blk.chunks(m).enumerate() {
            out[h * n + i] += row.iter().sum::<f64>();
        }
    }
    out.iter_mut().for_each(|v| *v /= batch as f64);
    Ok(Tensor::from_parts(vec![heads, n], out))
}

/// Multiply row `i` of every head-`h` block by `factor[h, i]`.
pub fn row_scale(a: &Tensor, factor: &Tensor) -> Result<Tensor> {
    if a.rank() != 3 || factor.rank() != 2 || factor.dim(1) != a.dim(1) || a.dim(0) % factor.dim(0) != 0 {
        return Err(shape_err("row_scale", a.shape(), factor.shape()));
    }
    let (heads, n, m) = (factor.dim(0), a.dim(1), a.dim(2));
    let mut out = a.data().to_vec();
    for (gi, blk) in out.chunks_mut(n * m).enumerate() {
        let h = gi % heads;
        for (i, row) in blk.chunks_mut(m).enumerate() {
            let f = factor.data()[h * n + i];
            row.iter_mut().for_each(|v| *v *= f);
        }
    }
    Ok(Tensor::from_parts(a.shape().to_vec(), out))
}

/// Add `c[h, i]` to every entry of row `i` in every head-`h` block.
pub fn add_row_constants(a: &mut Tensor, c: &Tensor) {
    let (heads, n, m) = (c.dim(0), a.dim(1), a.dim(2));
    for (gi, blk) in a.data_mut().chunks_mut(n * m).enumerate() {
        let h = gi % heads;
        for (i, row) in blk.chunks_mut(m).enumerate() {
            let v = c.data()[h * n + i];
            row.iter_mut().for_each(|x| *x += v);
        }
    }
}

/// Gradients of [`row_scale`] with respect to the matrix and the factors.
pub fn row_scale_backward(a: &Tensor, factor: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (heads, n, m) = (factor.dim(0), a.dim(1), a.dim(2));
    let da = row_scale(g, factor).expect("shapes checked in forward");
    let mut df = vec![0.0; factor.len()];
    for (gi, (ablk, gblk)) in a.data().chunks(n * m).zip(g.data().chunks(n * m)).enumerate() {
        let h = gi % heads;
        for (i, (arow, grow)) in ablk.chunks(m).zip(gblk.chunks(m)).enumerate() {
            df[h * n + i] += arow.iter().zip(grow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
    (da, Tensor::from_parts(factor.shape().to_vec(), df))
}

// ----------------------------------------------------------------------------
// Loss
// ----------------------------------------------------------------------------

/// Mean cross-entropy of `logits: [N, K]` against label-smoothed targets.
/// Returns the loss and `dloss/dlogits`.
pub fn smoothed_cross_entropy(logits: &Tensor, labels: &[usize], smoothing: f64) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 || logits.dim(0) != labels.len() {
        return Err(shape_err("cross_entropy", logits.shape(), &[labels.len()]));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(invalid(format!("label smoothing {smoothing} outside [0, 1)")));
    }
    let (n, k) = (logits.dim(0), logits.dim(1));
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(invalid(format!("label {bad} out of range for {k} classes")));
    }
    let off = smoothing / k as f64;
    let on = 1.0 - smoothing + off;
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * k];
    for (i, (row, grow)) in logits.data().chunks(k).zip(grad.chunks_mut(k)).enumerate() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        for (j, (&z, gv)) in row.iter().zip(grow.iter_mut()).enumerate() {
            let t = if j == labels[i] { on } else { off };
            loss -= t * (z - lse);
            *gv = ((z - lse).exp() - t) / n as f64;
        }
    }
    Ok((loss / n as f64, Tensor::from_parts(vec![n, k], grad)))
}
