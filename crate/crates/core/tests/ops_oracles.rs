use polynext_core::ops::{self, Conv2dSpec};
use polynext_core::{grad_check, CustomOp, Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;

/// Six-nested-loop cross-correlation.
fn conv_oracle(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: &Conv2dSpec) -> Tensor {
    let (b, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (o, cg, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    let og = o / spec.groups;
    let oh = (h + 2 * spec.padding - spec.dilation * (kh - 1) - 1) / spec.stride + 1;
    let ow = (wd + 2 * spec.padding - spec.dilation * (kw - 1) - 1) / spec.stride + 1;
    let mut out = vec![0.0; b * o * oh * ow];
    for bi in 0..b {
        for oc in 0..o {
            let g = oc / og;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |t| t.data()[oc]);
                    for ci in 0..cg {
                        let ic = g * cg + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((bi * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * cg + ci) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((bi * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, o, oh, ow], out).unwrap()
}

#[test]
fn conv2d_dilated_depthwise_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::randn(&[2, 4, 8, 8], 1.0, &mut rng);
    let w = Tensor::randn(&[4, 1, 5, 5], 1.0, &mut rng);
    let spec = Conv2dSpec::new(1, 4, 2, 4);
    let got = ops::conv2d(&x, &w, None, &spec).unwrap();
    let want = conv_oracle(&x, &w, None, &spec);
    assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
}

#[test]
fn conv2d_matches_oracle_on_50_random_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut seen = [false; 8];
    for i in 0..50 {
        let stride = 1 + (i % 2);
        let dilation = 1 + ((i / 2) % 2);
        let depthwise = (i / 4) % 2 == 1;
        seen[(stride - 1) * 4 + (dilation - 1) * 2 + depthwise as usize] = true;
        let c = rng.random_range(1..5);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let (groups, o) = if depthwise { (c, c) } else { (1, rng.random_range(1..5)) };
        let padding = rng.random_range(0..=dilation * (k - 1) / 2 + 1);
        let span = dilation * (k - 1) + 1;
        let h = rng.random_range(span.saturating_sub(2 * padding).max(1)..span + 6);
        let wd = rng.random_range(span.saturating_sub(2 * padding).max(1)..span + 6);
        let b = rng.random_range(1..3);
        let x = Tensor::randn(&[b, c, h, wd], 1.0, &mut rng);
        let w = Tensor::randn(&[o, c / groups, k, k], 1.0, &mut rng);
        let bias = Tensor::randn(&[o], 1.0, &mut rng);
        let spec = Conv2dSpec::new(stride, padding, dilation, groups);
        let got = ops::conv2d(&x, &w, Some(&bias), &spec).unwrap();
        let want = conv_oracle(&x, &w, Some(&bias), &spec);
        let d = got.max_abs_diff(&want).unwrap();
        assert!(d < 1e-12, "config {i}: {spec:?} x{:?} w{:?} diff {d}", x.shape(), w.shape());
    }
    assert!(seen.iter().all(|&s| s));
}

#[test]
fn grouped_conv_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = Tensor::randn(&[2, 6, 7, 5], 1.0, &mut rng);
    let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng);
    let spec = Conv2dSpec::new(2, 1, 1, 2);
    let got = ops::conv2d(&x, &w, None, &spec).unwrap();
    assert!(got.max_abs_diff(&conv_oracle(&x, &w, None, &spec)).unwrap() < 1e-12);
}

#[test]
fn conv_with_kernel_wider_than_input_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for (hw, k, dil) in [(1, 3, 1), (2, 5, 2), (3, 5, 2), (1, 5, 2)] {
        let x = Tensor::randn(&[2, 3, hw, hw], 1.0, &mut rng);
        let spec = Conv2dSpec::same(k, dil, 3);
        let w = Tensor::randn(&[3, 1, k, k], 1.0, &mut rng);
        let got = ops::conv2d(&x, &w, None, &spec).unwrap();
        assert!(got.max_abs_diff(&conv_oracle(&x, &w, None, &spec)).unwrap() < 1e-12);
        let wf = Tensor::randn(&[2, 3, k, k], 1.0, &mut rng);
        let full = Conv2dSpec::same(k, dil, 1);
        let got = ops::conv2d(&x, &wf, None, &full).unwrap();
        assert!(got.max_abs_diff(&conv_oracle(&x, &wf, None, &full)).unwrap() < 1e-12);
    }
}

// ---------------------------------------------------------------------------
// Gradient checks
// ---------------------------------------------------------------------------

/// `Σ r ⊙ y` with fixed pseudo-random weights, so every output entry matters.
fn weighted_sum(t: &mut Tape, y: Var) -> Result<Var> {
    let shape = t.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(999);
    let r = Tensor::rand_uniform(&shape, 0.5, 1.5, &mut rng);
    let m = t.mul_const(y, r)?;
    Ok(t.sum(m))
}

/// Check the gradient with respect to each input in turn, holding the others
/// as constants.
fn check_each<F>(label: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    for i in 0..inputs.len() {
        let report = grad_check(
            |t, xi| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, v)| if j == i { xi } else { t.constant(v.clone()) })
                    .collect();
                let y = f(t, &vars)?;
                weighted_sum(t, y)
            },
            &inputs[i],
            1e-5,
            TOL,
        )
        .unwrap();
        assert!(report.passed(), "{label} input {i}: rel err {} at {}", report.max_rel_err, report.worst_index);
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn grad_elementwise_ops() {
    for (s, shape) in [vec![5], vec![2, 3], vec![2, 2, 3]].into_iter().enumerate() {
        let mut r = rng(20 + s as u64);
        let a = Tensor::randn(&shape, 1.0, &mut r);
        let b = Tensor::randn(&shape, 1.0, &mut r);
        check_each("add", &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
        check_each("sub", &[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
        check_each("mul", &[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
        check_each("scale", &[a.clone()], |t, v| Ok(t.scale(v[0], -1.7)));
        check_each("scale_by", &[a.clone(), Tensor::scalar(0.3)], |t, v| t.scale_by(v[0], v[1]));
        let mask = Tensor::randn(&shape, 1.0, &mut r);
        check_each("mul_const", &[a.clone()], |t, v| t.mul_const(v[0], mask.clone()));
        let factors: Vec<f64> = (0..shape[0]).map(|i| 0.5 + i as f64).collect();
        check_each("sample_scale", &[a.clone()], |t, v| t.sample_scale(v[0], factors.clone()));
        check_each("sigmoid", &[a.clone()], |t, v| Ok(t.sigmoid(v[0])));
        check_each("index", &[a.clone()], |t, v| t.index(v[0], 1));
        check_each("sum", &[a.clone()], |t, v| Ok(t.sum(v[0])));
        check_each("reshape", &[a.clone()], |t, v| {
            let n = t.value(v[0]).len();
            t.reshape(v[0], &[n])
        });
    }
}

#[test]
fn grad_matmul_and_bmm() {
    for (s, (m, k, n)) in [(2, 3, 4), (3, 1, 2), (4, 4, 1)].into_iter().enumerate() {
        let mut r = rng(30 + s as u64);
        let a = Tensor::randn(&[m, k], 1.0, &mut r);
        let b = Tensor::randn(&[k, n], 1.0, &mut r);
        check_each("matmul", &[a, b.clone()], |t, v| t.matmul(v[0], v[1]));
        let a3 = Tensor::randn(&[2, m, k], 1.0, &mut r);
        check_each("matmul shared rhs", &[a3.clone(), b], |t, v| t.matmul(v[0], v[1]));
        let b3 = Tensor::randn(&[2, k, n], 1.0, &mut r);
        check_each("matmul batched", &[a3, b3], |t, v| t.matmul(v[0], v[1]));
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = Tensor::randn(&if ta { [2, k, m] } else { [2, m, k] }, 1.0, &mut r);
            let b = Tensor::randn(&if tb { [2, n, k] } else { [2, k, n] }, 1.0, &mut r);
            check_each("bmm", &[a, b], |t, v| t.bmm(v[0], v[1], ta, tb));
        }
    }
}

#[test]
fn grad_channel_linear() {
    for (s, shape) in [vec![3, 4], vec![2, 3, 2, 2], vec![1, 2, 3, 1]].into_iter().enumerate() {
        let mut r = rng(40 + s as u64);
        let x = Tensor::randn(&shape, 1.0, &mut r);
        let w = Tensor::randn(&[3, shape[1]], 1.0, &mut r);
        let b = Tensor::randn(&[3], 1.0, &mut r);
        check_each("channel_linear", &[x.clone(), w.clone(), b], |t, v| t.channel_linear(v[0], v[1], Some(v[2])));
        check_each("channel_linear no bias", &[x, w], |t, v| t.channel_linear(v[0], v[1], None));
    }
}

#[test]
fn grad_conv2d() {
    let cases = [
        ([1, 2, 4, 4], [3, 2, 3, 3], Conv2dSpec::new(1, 1, 1, 1)),
        ([2, 2, 5, 5], [2, 1, 3, 3], Conv2dSpec::new(2, 1, 1, 2)),
        ([1, 2, 5, 4], [2, 1, 3, 3], Conv2dSpec::new(1, 2, 2, 2)),
        ([1, 3, 4, 4], [3, 1, 5, 5], Conv2dSpec::new(1, 4, 2, 3)),
        ([2, 2, 3, 3], [4, 2, 1, 1], Conv2dSpec::new(1, 0, 1, 1)),
        ([1, 4, 4, 4], [2, 2, 3, 3], Conv2dSpec::new(2, 1, 2, 2)),
    ];
    for (s, (xs, ws, spec)) in cases.into_iter().enumerate() {
        let mut r = rng(50 + s as u64);
        let x = Tensor::randn(&xs, 1.0, &mut r);
        let w = Tensor::randn(&ws, 1.0, &mut r);
        let b = Tensor::randn(&[ws[0]], 1.0, &mut r);
        check_each("conv2d", &[x, w, b], |t, v| t.conv2d(v[0], v[1], Some(v[2]), spec));
    }
}

#[test]
fn grad_norms() {
    for (s, shape) in [vec![3, 5], vec![2, 3, 2, 2], vec![2, 4, 1, 3]].into_iter().enumerate() {
        let mut r = rng(60 + s as u64);
        let c = shape[1];
        let sp: usize = shape[2..].iter().product();
        let x = Tensor::randn(&shape, 1.0, &mut r);
        let g = Tensor::randn(&[c], 1.0, &mut r);
        let b = Tensor::randn(&[c], 1.0, &mut r);
        check_each("layer_norm", &[x.clone(), g.clone(), b.clone()], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5));
        let ghw = Tensor::randn(&[sp], 1.0, &mut r);
        let bhw = Tensor::randn(&[sp], 1.0, &mut r);
        let ins = [x.clone(), g.clone(), ghw.clone(), b.clone(), bhw.clone()];
        check_each("position_norm batch", &ins, |t, v| {
            let (mean, var) = ops::position_stats(t.value(v[0]))?;
            t.position_norm(v[0], [v[1], v[2], v[3], v[4]], &mean, &var, 1e-5, true)
        });
        let mean: Vec<f64> = (0..sp).map(|i| 0.1 * i as f64).collect();
        let var: Vec<f64> = (0..sp).map(|i| 0.5 + 0.2 * i as f64).collect();
        check_each("position_norm running", &ins, |t, v| t.position_norm(v[0], [v[1], v[2], v[3], v[4]], &mean, &var, 1e-5, false));
    }
}

#[test]
fn grad_channel_ops() {
    for (s, shape) in [vec![2, 3], vec![2, 3, 2, 2], vec![1, 4, 3, 1]].into_iter().enumerate() {
        let mut r = rng(70 + s as u64);
        let x = Tensor::randn(&shape, 1.0, &mut r);
        let sc = Tensor::randn(&[shape[1]], 1.0, &mut r);
        check_each("channel_flip", &[x.clone()], |t, v| t.channel_flip(v[0]));
        check_each("channel_scale", &[x.clone(), sc], |t, v| t.channel_scale(v[0], v[1]));
        check_each("global_avg_pool", &[x], |t, v| t.global_avg_pool(v[0]));
    }
}

#[test]
fn grad_attention_ops() {
    for (s, (g, n, heads)) in [(2, 3, 1), (4, 2, 2), (6, 3, 3)].into_iter().enumerate() {
        let mut r = rng(80 + s as u64);
        let scores = Tensor::randn(&[g, n, n], 1.0, &mut r);
        let sv = Tensor::rand_uniform(&[heads], 0.1, 0.9, &mut r);
        for p in [1, 2, 3, 4, 5] {
            check_each("poly_kernel", &[scores.clone(), sv.clone()], |t, v| t.poly_kernel(v[0], v[1], p));
        }
        let pos = Tensor::rand_uniform(&[g, n, n], 0.1, 2.0, &mut r);
        check_each("l1_row_normalize", &[pos.clone()], |t, v| t.l1_row_normalize(v[0], 1e-6));
        let gamma = Tensor::randn(&[heads, n], 1.0, &mut r);
        let inv = Tensor::rand_uniform(&[heads, n], 0.1, 1.0, &mut r);
        check_each("row_scale", &[pos, gamma], |t, v| t.row_scale(v[0], v[1], inv.clone()));
    }
}

#[test]
fn grad_cross_entropy() {
    for (s, (n, k)) in [(2, 3), (4, 10), (1, 5)].into_iter().enumerate() {
        let mut r = rng(90 + s as u64);
        let logits = Tensor::randn(&[n, k], 2.0, &mut r);
        let labels: Vec<usize> = (0..n).map(|i| (i * 7) % k).collect();
        for eps in [0.0, 0.1] {
            let report = grad_check(|t, x| t.cross_entropy(x, &labels, eps), &logits, 1e-5, TOL).unwrap();
            assert!(report.passed(), "cross_entropy rel err {}", report.max_rel_err);
        }
    }
}

/// Squares its input but reports a gradient of `3x` instead of `2x`.
struct WrongSquare;

impl CustomOp for WrongSquare {
    fn name(&self) -> &str {
        "wrong_square"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(inputs[0].map(|v| v * v))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        vec![inputs[0].zip_map(grad, "wrong_square", |x, g| 3.0 * x * g).unwrap()]
    }
}

#[test]
fn wrong_gradient_rule_is_caught() {
    let x = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
    let report = grad_check(
        |t, x| {
            let y = t.custom(&[x], Box::new(WrongSquare))?;
            Ok(t.sum(y))
        },
        &x,
        1e-5,
        TOL,
    )
    .unwrap();
    assert!(!report.passed());
    assert!(report.max_rel_err > 0.3);
}

#[test]
fn forward_and_backward_are_bit_reproducible() {
    let run = || {
        let mut r = rng(5);
        let mut t = Tape::new();
        let x = t.param(Tensor::randn(&[3, 4, 6, 6], 1.0, &mut r));
        let w = t.param(Tensor::randn(&[4, 1, 3, 3], 1.0, &mut r));
        let w2 = t.param(Tensor::randn(&[5, 4], 1.0, &mut r));
        let y = t.conv2d(x, w, None, Conv2dSpec::same(3, 2, 4)).unwrap();
        let z = t.mul(y, x).unwrap();
        let z = t.channel_linear(z, w2, None).unwrap();
        let l = t.sum(z);
        let g = t.backward(l).unwrap();
        (t.value(l).clone(), g.get(x).unwrap().clone(), g.get(w).unwrap().clone(), g.get(w2).unwrap().clone())
    };
    let a = run();
    let b = run();
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
    assert_eq!(a.2.data(), b.2.data());
    assert_eq!(a.3.data(), b.3.data());
}

proptest! {
    #[test]
    fn channel_flip_is_an_involution(b in 1usize..3, c in 1usize..6, s in 1usize..5, seed in 0u64..1000) {
        let x = Tensor::randn(&[b, c, s], 1.0, &mut rng(seed));
        let y = ops::channel_flip(&ops::channel_flip(&x).unwrap()).unwrap();
        prop_assert_eq!(y, x.clone());
        if c == 1 {
            prop_assert_eq!(ops::channel_flip(&x).unwrap(), x);
        }
    }

    #[test]
    fn conv_is_linear_in_input(seed in 0u64..1000, depthwise in any::<bool>()) {
        let mut r = rng(seed);
        let c = 3;
        let x1 = Tensor::randn(&[1, c, 5, 5], 1.0, &mut r);
        let x2 = Tensor::randn(&[1, c, 5, 5], 1.0, &mut r);
        let (w, spec) = if depthwise {
            (Tensor::randn(&[c, 1, 3, 3], 1.0, &mut r), Conv2dSpec::same(3, 2, c))
        } else {
            (Tensor::randn(&[2, c, 3, 3], 1.0, &mut r), Conv2dSpec::new(2, 1, 1, 1))
        };
        let lhs = ops::conv2d(&ops::add(&x1, &x2).unwrap(), &w, None, &spec).unwrap();
        let rhs = ops::add(&ops::conv2d(&x1, &w, None, &spec).unwrap(), &ops::conv2d(&x2, &w, None, &spec).unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }
}
