use std::collections::HashSet;

use polynext_core::model::{param_count, MixerKind, ModelConfig, PolyNeXtModel, Sublayer};
use polynext_core::norm::NormKind;
use polynext_core::params::apply_updates;
use polynext_core::poly::infer;
use polynext_core::{grad_check, Mode, ParamKind, ParamStore, Session, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn toy(channels: &[usize], cells: &[usize], mixers: &[MixerKind], norm: NormKind, resolution: usize) -> ModelConfig {
    ModelConfig {
        channels: channels.to_vec(),
        cells: cells.to_vec(),
        stacks: vec![1; channels.len()],
        mixers: mixers.to_vec(),
        norm,
        num_classes: 3,
        resolution,
        ..ModelConfig::preset("cpolynext-t").unwrap()
    }
}

fn perturb(store: &mut ParamStore, seed: u64, std: f64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().filter(|id| store.kind(*id) != ParamKind::Buffer).collect();
    for id in ids {
        let v = store.get(id);
        let n = Tensor::randn(v.shape(), std, &mut r);
        let nv = v.zip_map(&n, "perturb", |a, b| a + b).unwrap();
        store.set(id, nv).unwrap();
    }
}

#[test]
fn same_seed_gives_identical_parameters() {
    let cfg = toy(&[4, 8], &[1, 1], &[MixerKind::PolyConv, MixerKind::PolyAttn], NormKind::PolyBatchNorm, 16);
    let (_, a) = PolyNeXtModel::build(&cfg, 7).unwrap();
    let (_, b) = PolyNeXtModel::build(&cfg, 7).unwrap();
    let (_, c) = PolyNeXtModel::build(&cfg, 8).unwrap();
    assert_eq!(a.entries(), b.entries());
    assert_ne!(a.entries(), c.entries());
}

#[test]
fn parameter_names_are_unique() {
    let (_, store) = PolyNeXtModel::build(&ModelConfig::preset("apolynext-t-bn").unwrap(), 0).unwrap();
    let names: HashSet<&str> = store.entries().iter().map(|e| e.name.as_str()).collect();
    assert_eq!(names.len(), store.len());
}

#[test]
fn tiny_preset_at_224_produces_stage_maps_and_logits() {
    let cfg = ModelConfig::preset("cpolynext-t").unwrap();
    assert_eq!((cfg.channels.clone(), cfg.cells.clone(), cfg.stacks.clone()), (vec![48, 96, 192, 288], vec![2, 2, 6, 2], vec![3, 3, 3, 3]));
    let (m, store) = PolyNeXtModel::build(&cfg, 0).unwrap();
    let x = Tensor::randn(&[2, 3, 224, 224], 1.0, &mut rng(1));
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, &store, Mode::Infer);
    let xv = s.tape.constant(x);
    let out = m.forward_full(&mut s, xv).unwrap();
    let sides: Vec<usize> = out.stage_outputs.iter().map(|v| s.value(*v).dim(2)).collect();
    assert_eq!(sides, vec![56, 28, 14, 7]);
    assert_eq!(s.value(out.logits).shape(), &[2, 1000]);
    assert!(s.value(out.logits).is_finite());
}

#[test]
fn low_resolution_preset() {
    let cfg = ModelConfig::preset("cpolynext-lr").unwrap();
    assert_eq!((cfg.channels.clone(), cfg.cells.clone(), cfg.stacks.clone()), (vec![72, 144, 288], vec![2, 3, 3], vec![3, 3, 3]));
    let (m, store) = PolyNeXtModel::build(&cfg, 0).unwrap();
    let y = infer(&store, &Tensor::randn(&[1, 3, 32, 32], 1.0, &mut rng(2)), |s, x| m.stem.forward(s, x)).unwrap();
    assert_eq!(&y.shape()[2..], &[8, 8]);
}

#[test]
fn stage_sides_halve_for_every_input_size() {
    for r in [16, 32, 64, 96, 128, 224] {
        let mut cfg = ModelConfig::preset("cpolynext-t").unwrap();
        cfg.resolution = r;
        let sides = cfg.stage_resolutions().unwrap();
        for (s, side) in sides.iter().enumerate() {
            assert_eq!(*side, (r as f64 / 2f64.powi(s as i32 + 2)).ceil() as usize);
        }
    }
    let mut cfg = ModelConfig::preset("cpolynext-t").unwrap();
    cfg.resolution = 4;
    assert!(cfg.validate().is_ok());
    cfg.resolution = 6;
    assert!(cfg.validate().is_err());
}

#[test]
fn downsample_paths_are_independent() {
    let cfg = toy(&[4, 6], &[1, 1], &[MixerKind::PolyConv; 2], NormKind::LayerNorm, 16);
    let (m, mut store) = PolyNeXtModel::build(&cfg, 3).unwrap();
    let [d0, d1] = m.stages[1].down.clone().unwrap();
    let x = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut rng(4));
    let before = (infer(&store, &x, |s, x| d0.forward(s, x)).unwrap(), infer(&store, &x, |s, x| d1.forward(s, x)).unwrap());
    let w = store.get(d0.w).map(|v| v * 3.0 + 0.1);
    store.set(d0.w, w).unwrap();
    let after = (infer(&store, &x, |s, x| d0.forward(s, x)).unwrap(), infer(&store, &x, |s, x| d1.forward(s, x)).unwrap());
    assert_ne!(before.0, after.0);
    assert_eq!(before.1, after.1);
    assert_eq!(&after.0.shape()[2..], &[2, 2]);
    store.set(d1.w, Tensor::zeros(store.get(d1.w).shape())).unwrap();
    store.set(d1.b, Tensor::full(&[6], 0.25)).unwrap();
    let z = infer(&store, &x, |s, x| d1.forward(s, x)).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.25));
}

#[test]
fn zero_weights_give_constant_logits() {
    let cfg = toy(&[4], &[1], &[MixerKind::PolyConv], NormKind::LayerNorm, 16);
    let (m, mut store) = PolyNeXtModel::build(&cfg, 5).unwrap();
    perturb(&mut store, 6, 0.2);
    let ids: Vec<_> = store.ids().filter(|id| store.kind(*id) == ParamKind::Weight).collect();
    for id in ids {
        store.set(id, Tensor::zeros(store.get(id).shape())).unwrap();
    }
    let logits = m.logits(&store, &Tensor::randn(&[3, 3, 16, 16], 1.0, &mut rng(7))).unwrap();
    let first = &logits.data()[..3];
    for row in logits.data().chunks(3) {
        assert_eq!(row, first);
    }
}

#[test]
fn single_cell_parameter_count_by_hand() {
    let (c, k, cin) = (5, 4, 3);
    let mut cfg = toy(&[c], &[1], &[MixerKind::PolyConv], NormKind::LayerNorm, 16);
    cfg.num_classes = k;
    let (_, store) = PolyNeXtModel::build(&cfg, 0).unwrap();
    let lin = |i: usize, o: usize| i * o + o;
    let ln = 2 * c;
    let stem = cin * c * 49 + c;
    let skips = 2 * c + ln + 2;
    let conv = lin(c, c) + 3 * (9 * c + c) + lin(c, c) + ln;
    let mlp = 2 * lin(c, c) + ln + lin(c, c);
    let head = ln + 2 * lin(c, c) + ln + lin(c, k);
    assert_eq!(param_count(&store), stem + skips + conv + mlp + head);
}

#[test]
fn closed_gates_leave_the_normalized_skip_sum() {
    let cfg = toy(&[4], &[1], &[MixerKind::PolyConv], NormKind::LayerNorm, 16);
    let (m, mut store) = PolyNeXtModel::build(&cfg, 8).unwrap();
    perturb(&mut store, 9, 0.3);
    let cell = &m.stages[0].cells[0];
    store.set(cell.logits, Tensor::full(&[2], -800.0)).unwrap();
    let mut r = rng(10);
    let x2 = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut r);
    let x1 = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut r);
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, &store, Mode::Infer);
    let (a, b) = (s.tape.constant(x2), s.tape.constant(x1));
    let y = m.cell_forward(&mut s, cell, a, b).unwrap();
    let (s0, s1) = (s.p(cell.s0), s.p(cell.s1));
    let u = s.tape.channel_scale(a, s0).unwrap();
    let v = s.tape.channel_scale(b, s1).unwrap();
    let sum = s.tape.add(u, v).unwrap();
    let want = cell.pre_norm.forward(&mut s, sum).unwrap();
    assert!(s.value(y).max_abs_diff(s.value(want)).unwrap() < 1e-12);
    assert_eq!(s.value(y).shape(), &[2, 4, 4, 4]);
    assert_eq!(cell.sublayers.len(), 2);
    assert!(matches!(cell.sublayers[1], Sublayer::Mlp(_)));
}

#[test]
fn toy_model_end_to_end_gradients() {
    let cases = [
        (toy(&[4], &[2], &[MixerKind::PolyConv], NormKind::LayerNorm, 16), Mode::Infer),
        (toy(&[4], &[2], &[MixerKind::PolyConv], NormKind::PolyBatchNorm, 16), Mode::Train),
        (toy(&[4, 4], &[1, 1], &[MixerKind::PolyConv, MixerKind::PolyAttn], NormKind::LayerNorm, 16), Mode::Infer),
    ];
    for (ci, (cfg, mode)) in cases.into_iter().enumerate() {
        let (m, mut store) = PolyNeXtModel::build(&cfg, 11).unwrap();
        perturb(&mut store, 12, 0.1);
        let x = Tensor::randn(&[2, 3, 16, 16], 1.0, &mut rng(13));
        let labels = [0, 2];
        let loss = |t: &mut Tape, st: &ParamStore, bind: Option<polynext_core::ParamId>, v: polynext_core::Var| {
            let mut s = Session::new(t, st, mode);
            let xv = match bind {
                Some(id) => {
                    s.bind(id, v);
                    s.tape.constant(x.clone())
                }
                None => v,
            };
            let y = m.forward(&mut s, xv)?;
            s.tape.cross_entropy(y, &labels, 0.1)
        };
        let report = grad_check(|t, v| loss(t, &store, None, v), &x, 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "case {ci} input: {}", report.max_rel_err);
        for id in store.ids().filter(|id| store.kind(*id).trainable()) {
            let report = grad_check(|t, v| loss(t, &store, Some(id), v), store.get(id), 1e-5, 1e-4).unwrap();
            assert!(report.passed(), "case {ci} {}: {} at {}", store.name(id), report.max_rel_err, report.worst_index);
        }
    }
}

#[test]
fn every_trainable_parameter_receives_a_gradient() {
    let cfg = toy(&[4, 8], &[2, 1], &[MixerKind::PolyConv, MixerKind::PolyAttn], NormKind::PolyBatchNorm, 16);
    let (m, store) = PolyNeXtModel::build(&cfg, 14).unwrap();
    let mut r = rng(15);
    let x = Tensor::randn(&[2, 3, 16, 16], 1.0, &mut r);
    let mut tape = Tape::new();
    let mut s = Session::train(&mut tape, &store, &mut r);
    let xv = s.tape.constant(x);
    let y = m.forward(&mut s, xv).unwrap();
    let l = s.tape.cross_entropy(y, &[1, 2], 0.0).unwrap();
    let g = s.tape.backward(l).unwrap();
    let got: HashSet<usize> = s.param_grads(&g).iter().map(|(id, _)| id.index()).collect();
    let want: HashSet<usize> = store.ids().filter(|id| store.kind(*id).trainable()).map(|id| id.index()).collect();
    assert_eq!(got, want);
}

#[test]
fn train_matches_infer_with_frozen_statistics() {
    for norm in [NormKind::LayerNorm, NormKind::PolyBatchNorm] {
        let cfg = toy(&[4, 8], &[1, 1], &[MixerKind::PolyConv, MixerKind::PolyAttn], norm, 16);
        let (m, mut store) = PolyNeXtModel::build(&cfg, 16).unwrap();
        let x = Tensor::randn(&[3, 3, 16, 16], 1.0, &mut rng(17));
        let mut r = rng(18);
        let (train, updates) = {
            let mut tape = Tape::new();
            let mut s = Session::new(&mut tape, &store, Mode::Train).with_rng(&mut r);
            s.momentum_override = Some(1.0);
            let xv = s.tape.constant(x.clone());
            let y = m.forward(&mut s, xv).unwrap();
            (s.value(y).clone(), s.take_updates())
        };
        apply_updates(&mut store, updates).unwrap();
        let frozen = m.logits(&store, &x).unwrap();
        let d = train.max_abs_diff(&frozen).unwrap();
        match norm {
            NormKind::LayerNorm => assert_eq!(d, 0.0),
            _ => assert!(d < 1e-8, "{d}"),
        }
    }
}

#[test]
fn bn_model_rejects_other_resolutions() {
    let cfg = toy(&[4], &[1], &[MixerKind::PolyConv], NormKind::PolyBatchNorm, 16);
    let (m, store) = PolyNeXtModel::build(&cfg, 0).unwrap();
    assert!(m.logits(&store, &Tensor::zeros(&[1, 3, 32, 32])).is_err());
    let cfg = toy(&[4], &[1], &[MixerKind::PolyConv], NormKind::LayerNorm, 16);
    let (m, store) = PolyNeXtModel::build(&cfg, 0).unwrap();
    assert_eq!(m.logits(&store, &Tensor::zeros(&[1, 3, 32, 32])).unwrap().shape(), &[1, 3]);
}

#[test]
fn zero_head_wb_keeps_prediction_under_doubling() {
    let cfg = toy(&[4], &[1], &[MixerKind::PolyConv], NormKind::LayerNorm, 16);
    let (m, mut store) = PolyNeXtModel::build(&cfg, 19).unwrap();
    let wb = m.head.poly.wb.w;
    store.set(wb, Tensor::zeros(store.get(wb).shape())).unwrap();
    let x = Tensor::randn(&[4, 3, 16, 16], 1.0, &mut rng(20));
    let a = m.logits(&store, &x).unwrap();
    store.set(wb, store.get(wb).map(|v| 2.0 * v)).unwrap();
    let b = m.logits(&store, &x).unwrap();
    assert_eq!(a, b);
}
