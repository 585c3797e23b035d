use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use polynext_circuit::{export_circuit, fold_inference, verify_polynomial, write_circuit, DEFAULT_MAX_NODES};
use polynext_core::ModelConfig;
use polynext_train::suites::run_suite;
use polynext_train::trainer::evaluate_checkpoint;
use polynext_train::{train, Checkpoint, DataSource, TrainOptions, TrainRecipe};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "polynext", about = "Train, evaluate and export activation-free polynomial backbones")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write metrics.csv plus checkpoints to --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// CIFAR-10 binary directory or `synthetic`.
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        deterministic: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Top-1 accuracy of a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: String,
    },
    /// Fold a BatchNorm checkpoint and write its arithmetic circuit.
    ExportCircuit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_NODES)]
        max_nodes: u64,
    },
    /// Run an invariant suite: architecture, circuit, determinism or all.
    Verify {
        #[arg(long)]
        suite: String,
    },
}

/// Run configuration: `model` is a preset name or a full model config.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    model: serde_json::Value,
    recipe: TrainRecipe,
}

fn model_config(v: serde_json::Value) -> Result<ModelConfig> {
    Ok(match v {
        serde_json::Value::String(name) => ModelConfig::preset(&name)?,
        other => ModelConfig::from_json(&other.to_string())?,
    })
}

fn source(data: &str, seed: u64, cfg: &ModelConfig) -> DataSource {
    DataSource::parse(data, seed, cfg.num_classes, cfg.resolution)
}

/// Sample counts: the recipe's limits, or 5000/1000 for synthetic data.
fn limits(data: &str, recipe: &TrainRecipe) -> (usize, usize) {
    let (t, v) = if data == "synthetic" { (5000, 1000) } else { (usize::MAX, usize::MAX) };
    (recipe.train_samples.unwrap_or(t), recipe.val_samples.unwrap_or(v))
}

fn run_train(config: &Path, data: &str, out: &Path, deterministic: bool, seed: Option<u64>, epochs: Option<usize>) -> Result<()> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let rc: RunConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
    let cfg = model_config(rc.model)?;
    let mut recipe = rc.recipe;
    if let Some(s) = seed {
        recipe.seed = s;
    }
    if let Some(e) = epochs {
        recipe.epochs = e;
        recipe.ema_start_epoch = recipe.ema_start_epoch.map(|s| s.min(e));
    }
    recipe.validate()?;
    let (nt, nv) = limits(data, &recipe);
    let (train_set, val_set) = source(data, recipe.seed, &cfg).load(nt, nv)?;
    eprintln!("training on {} samples, validating on {}", train_set.len(), val_set.len());
    let opts = TrainOptions { deterministic, out_dir: Some(out.to_path_buf()), verbose: true, init: None };
    let outcome = train(&cfg, &recipe, &train_set, &val_set, &opts)?;
    if let Some(last) = outcome.history.last() {
        println!("final train_loss {:.6} val_top1 {:.4}", last.train_loss, last.val_top1);
    }
    Ok(())
}

fn run_eval(checkpoint: &Path, data: &str) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let (nt, nv) = limits(data, &ck.recipe);
    let (_, val) = source(data, ck.recipe.seed, &ck.config).load(nt, nv)?;
    let acc = evaluate_checkpoint(checkpoint, &val, ck.recipe.batch_size)?;
    println!("top1 {acc:.4} on {} samples", val.len());
    Ok(())
}

fn run_export(checkpoint: &Path, out: &Path, max_nodes: u64) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let (model, store) = ck.eval_weights()?;
    let folded = fold_inference(&model, &store)?;
    let r = ck.config.resolution;
    let c = export_circuit(&folded, [ck.config.in_channels, r, r], max_nodes)?;
    let cert = verify_polynomial(&c);
    if !cert.ok {
        bail!("exported circuit failed verification at nodes {:?}", cert.offending);
    }
    write_circuit(&c, out)?;
    println!("{} nodes, degree {}, multiplicative depth {}", cert.node_count, cert.max_degree, cert.mul_depth);
    Ok(())
}

fn run_verify(suite: &str) -> Result<bool> {
    let checks = run_suite(suite)?;
    let mut ok = true;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        ok &= c.passed;
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Train { config, data, out, deterministic, seed, epochs } => run_train(&config, &data, &out, deterministic, seed, epochs).map(|_| true),
        Cmd::Eval { checkpoint, data } => run_eval(&checkpoint, &data).map(|_| true),
        Cmd::ExportCircuit { checkpoint, out, max_nodes } => run_export(&checkpoint, &out, max_nodes).map(|_| true),
        Cmd::Verify { suite } => run_verify(&suite),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
