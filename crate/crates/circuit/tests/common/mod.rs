#![allow(dead_code)]

use polynext_core::model::{MixerKind, ModelConfig};
use polynext_core::params::apply_updates;
use polynext_core::{Mode, NormKind, ParamKind, ParamStore, PolyNeXtModel, Session, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn toy(channels: &[usize], cells: &[usize], mixers: &[MixerKind], norm: NormKind, resolution: usize) -> ModelConfig {
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

/// Add Gaussian noise to every trainable tensor so that affines and gates
/// are away from their initial values.
pub fn perturb(store: &mut ParamStore, seed: u64, std: f64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().filter(|id| store.kind(*id) != ParamKind::Buffer).collect();
    for id in ids {
        let v = store.get(id);
        let n = Tensor::randn(v.shape(), std, &mut r);
        store.set(id, v.zip_map(&n, "perturb", |a, b| a + b).unwrap()).unwrap();
    }
}

/// Overwrite every running statistic with the batch statistics of `x`.
pub fn calibrate(model: &PolyNeXtModel, store: &mut ParamStore, x: &Tensor) {
    let updates = {
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, store, Mode::Train);
        s.momentum_override = Some(1.0);
        let xv = s.tape.constant(x.clone());
        model.forward(&mut s, xv).unwrap();
        s.take_updates()
    };
    apply_updates(store, updates).unwrap();
}

/// A BatchNorm model with perturbed parameters and calibrated statistics.
pub fn bn_toy(mixers: &[MixerKind], seed: u64) -> (PolyNeXtModel, ParamStore) {
    let cfg = toy(&[4, 8][..mixers.len()], &vec![1; mixers.len()], mixers, NormKind::PolyBatchNorm, 16);
    let (m, mut store) = PolyNeXtModel::build(&cfg, seed).unwrap();
    perturb(&mut store, seed + 1, 0.1);
    calibrate(&m, &mut store, &Tensor::randn(&[8, 3, 16, 16], 1.0, &mut rng(seed + 2)));
    (m, store)
}

pub fn max_rel(a: &Tensor, b: &Tensor) -> f64 {
    a.max_rel_diff(b, 1e-12).unwrap()
}
