//! Invariant suites behind `polynext verify`.

use polynext_circuit::{export_circuit, fold_inference, verify_polynomial};
use polynext_core::model::{param_count, MixerKind};
use polynext_core::params::apply_updates;
use polynext_core::{Mode, ModelConfig, NormKind, ParamStore, PolyNeXtModel, Session, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::synthetic_dataset;
use crate::error::{Result, TrainError};
use crate::recipe::TrainRecipe;
use crate::trainer::{train, TrainOptions, FINAL_CHECKPOINT, METRICS_FILE};

pub const SUITES: [&str; 3] = ["architecture", "circuit", "determinism"];

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Check {
    Check { name: name.into(), passed, detail: detail.into() }
}

/// Overwrite every running statistic with the batch statistics of `x`.
pub fn calibrate_statistics(model: &PolyNeXtModel, store: &mut ParamStore, x: &Tensor) -> Result<()> {
    let updates = {
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, store, Mode::Train);
        s.momentum_override = Some(1.0);
        let xv = s.tape.constant(x.clone());
        model.forward(&mut s, xv)?;
        s.take_updates()
    };
    apply_updates(store, updates)?;
    Ok(())
}

/// Small BatchNorm configuration for quick checks.
pub fn toy_config(norm: NormKind, mixers: &[MixerKind], resolution: usize, classes: usize) -> ModelConfig {
    let n = mixers.len();
    ModelConfig {
        channels: [4, 8, 8, 8][..n].to_vec(),
        cells: vec![1; n],
        stacks: vec![1; n],
        mixers: mixers.to_vec(),
        norm,
        num_classes: classes,
        resolution,
        ..ModelConfig::preset("cpolynext-t").expect("preset")
    }
}

pub fn run_suite(name: &str) -> Result<Vec<Check>> {
    match name {
        "architecture" => architecture(),
        "circuit" => circuit(),
        "determinism" => determinism(),
        "all" => {
            let mut out = Vec::new();
            for s in SUITES {
                out.extend(run_suite(s)?);
            }
            Ok(out)
        }
        other => Err(TrainError::Recipe(format!("unknown suite {other:?}; expected one of {SUITES:?} or all"))),
    }
}

fn architecture() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (preset, target) in [("cpolynext-t", 6.4e6), ("cpolynext-s", 26e6), ("apolynext-t", 6.5e6), ("apolynext-s", 26e6)] {
        let cfg = ModelConfig::preset(preset)?;
        let (_, store) = PolyNeXtModel::build(&cfg, 0)?;
        let n = param_count(&store) as f64;
        let rel = (n - target) / target;
        out.push(check(format!("{preset} params"), rel.abs() <= 0.02, format!("{n:.0} vs {target:.0} ({:+.2}%)", rel * 100.0)));
    }
    let res = ModelConfig::preset("cpolynext-t")?.stage_resolutions()?;
    out.push(check("stage maps at 224", res == [56, 28, 14, 7], format!("{res:?}")));
    Ok(out)
}

fn circuit() -> Result<Vec<Check>> {
    let cfg = toy_config(NormKind::PolyBatchNorm, &[MixerKind::PolyConv], 16, 3);
    let (model, mut store) = PolyNeXtModel::build(&cfg, 7)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    calibrate_statistics(&model, &mut store, &Tensor::randn(&[8, 3, 16, 16], 1.0, &mut rng))?;
    let folded = fold_inference(&model, &store)?;
    let c = export_circuit(&folded, [3, 16, 16], 5_000_000)?;
    let cert = verify_polynomial(&c);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let x = Tensor::randn(&[1, 3, 16, 16], 1.0, &mut rng);
        let want = model.logits(&store, &x)?;
        let got = Tensor::new(vec![1, 3], c.eval(x.data())?)?;
        worst = worst.max(got.max_rel_diff(&want, 1e-12).unwrap_or(f64::INFINITY));
    }
    Ok(vec![
        check("certificate", cert.ok, format!("{} nodes, degree {}, depth {}", cert.node_count, cert.max_degree, cert.mul_depth)),
        check("circuit equals model", worst < 1e-6, format!("max rel {worst:.2e}")),
    ])
}

fn determinism() -> Result<Vec<Check>> {
    let cfg = toy_config(NormKind::PolyBatchNorm, &[MixerKind::PolyConv], 16, 4);
    let recipe = TrainRecipe { epochs: 2, batch_size: 16, ..TrainRecipe::low_res() };
    let ds = synthetic_dataset(3, 4, 16, 64);
    let val = synthetic_dataset(4, 4, 16, 32);
    let mut runs = Vec::new();
    for _ in 0..2 {
        let dir = std::env::temp_dir().join(format!("polynext-verify-{}-{}", std::process::id(), runs.len()));
        let opts = TrainOptions { deterministic: true, out_dir: Some(dir.clone()), verbose: false, init: None };
        train(&cfg, &recipe, &ds, &val, &opts)?;
        let csv = std::fs::read(dir.join(METRICS_FILE))?;
        let ck = std::fs::read(dir.join(FINAL_CHECKPOINT))?;
        std::fs::remove_dir_all(&dir)?;
        runs.push((csv, ck));
    }
    let back = Checkpoint::from_bytes(&runs[0].1)?;
    Ok(vec![
        check("metrics identical", runs[0].0 == runs[1].0, format!("{} bytes", runs[0].0.len())),
        check("checkpoints identical", runs[0].1 == runs[1].1, format!("{} bytes", runs[0].1.len())),
        check("checkpoint re-encodes", back.to_bytes() == runs[0].1, ""),
    ])
}
