//! Training loop, evaluation and metrics.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use polynext_core::params::apply_updates;
use polynext_core::stabilization::dropout_rate_at;
use polynext_core::{ModelConfig, ParamStore, PolyNeXtModel, Session, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::{epoch_order, Augment, Dataset};
use crate::error::{Result, TrainError};
use crate::optim::{clip_grad_norm, AdamW, Ema};
use crate::recipe::{cosine_lr, TrainRecipe};

pub const METRICS_HEADER: &str = "epoch,lr,dropout,train_loss,val_top1,wall_seconds";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.pnxc";

/// Anything that maps a `[B, C, H, W]` batch to `[B, K]` logits.
pub trait Classifier {
    fn logits(&self, x: &Tensor) -> Result<Tensor>;
}

pub struct ModelClassifier<'a> {
    pub model: &'a PolyNeXtModel,
    pub store: &'a ParamStore,
}

impl Classifier for ModelClassifier<'_> {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.model.logits(self.store, x)?)
    }
}

/// Index of the first maximum in each row of `[B, K]` logits.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.dim(1);
    logits
        .data()
        .chunks(k)
        .map(|row| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
        .collect()
}

/// Top-1 accuracy in `[0, 1]`; an empty dataset scores 0.
pub fn evaluate(clf: &dyn Classifier, ds: &Dataset, batch_size: usize) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = ds.batch(chunk, None);
        let pred = argmax_rows(&clf.logits(&x)?);
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub dropout: f64,
    pub train_loss: f64,
    pub val_top1: f64,
    pub wall_seconds: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},{:e},{},{},{},{:.3}", self.epoch, self.lr, self.dropout, self.train_loss, self.val_top1, self.wall_seconds)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Single thread and zero wall-clock column.
    pub deterministic: bool,
    /// Metrics and checkpoints are written here when set.
    pub out_dir: Option<PathBuf>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
    /// Starting weights instead of a fresh build from `recipe.seed`.
    pub init: Option<ParamStore>,
}

pub struct TrainOutcome {
    pub model: PolyNeXtModel,
    pub store: ParamStore,
    pub ema: Option<ParamStore>,
    pub history: Vec<EpochMetrics>,
    /// Loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub rng: ChaCha8Rng,
}

impl TrainOutcome {
    /// Weights used for evaluation: EMA when it was active, else live.
    pub fn eval_store(&self) -> &ParamStore {
        self.ema.as_ref().unwrap_or(&self.store)
    }
}

fn check_compatible(cfg: &ModelConfig, ds: &Dataset, what: &str) -> Result<()> {
    if ds.resolution != cfg.resolution || ds.channels != cfg.in_channels {
        return Err(TrainError::Recipe(format!(
            "{what} images are {}×{r}×{r}, model expects {}×{s}×{s}",
            ds.channels,
            cfg.in_channels,
            r = ds.resolution,
            s = cfg.resolution
        )));
    }
    if ds.classes > cfg.num_classes {
        return Err(TrainError::Recipe(format!("{what} has {} classes, model has {}", ds.classes, cfg.num_classes)));
    }
    Ok(())
}

/// Run `f` single-threaded when deterministic.
fn in_pool<T: Send>(deterministic: bool, f: impl FnOnce() -> T + Send) -> T {
    if deterministic {
        rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("thread pool").install(f)
    } else {
        f()
    }
}

pub fn train(cfg: &ModelConfig, recipe: &TrainRecipe, train_set: &Dataset, val_set: &Dataset, opts: &TrainOptions) -> Result<TrainOutcome> {
    in_pool(opts.deterministic, || train_inner(cfg, recipe, train_set, val_set, opts))
}

fn train_inner(cfg: &ModelConfig, recipe: &TrainRecipe, train_set: &Dataset, val_set: &Dataset, opts: &TrainOptions) -> Result<TrainOutcome> {
    recipe.validate()?;
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Recipe("training set is empty".into()));
    }
    check_compatible(cfg, train_set, "training set")?;
    if !val_set.is_empty() {
        check_compatible(cfg, val_set, "validation set")?;
    }
    let (model, mut store) = PolyNeXtModel::build(cfg, recipe.seed)?;
    if let Some(init) = &opts.init {
        store.copy_values_from(init)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    rng.set_stream(1);
    let mut opt = AdamW::new(&store);
    let mut ema: Option<Ema> = None;
    let aug = Augment { hflip: recipe.hflip, pad: recipe.crop_padding };
    let sched = recipe.regularization();
    let steps_per_epoch = train_set.len().div_ceil(recipe.batch_size);
    let total_steps = steps_per_epoch * recipe.epochs;
    let warmup_steps = steps_per_epoch * recipe.warmup_epochs;
    let mut csv = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut f = fs::File::create(dir.join(METRICS_FILE))?;
            writeln!(f, "{METRICS_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let start = Instant::now();
    let mut history = Vec::new();
    let mut step_losses = Vec::with_capacity(total_steps);
    let mut step = 0;
    for epoch in 0..recipe.epochs {
        let dropout = dropout_rate_at(epoch, &sched)?;
        let order = epoch_order(train_set.len(), &mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (bi, chunk) in order.chunks(recipe.batch_size).enumerate() {
            lr = cosine_lr(step, total_steps, warmup_steps, recipe)?;
            let (x, labels) = train_set.batch(chunk, Some((&aug, &mut rng)));
            let mut tape = Tape::new();
            let (loss, mut grads, updates) = {
                let mut s = Session::train(&mut tape, &store, &mut rng);
                s.dropout = dropout;
                s.drop_path = recipe.stochastic_depth;
                let xv = s.tape.constant(x);
                let y = model.forward(&mut s, xv)?;
                let l = s.tape.cross_entropy(y, &labels, recipe.label_smoothing)?;
                let loss = s.value(l).item();
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss { epoch, step: bi, loss });
                }
                let g = s.tape.backward(l)?;
                (loss, s.param_grads(&g), s.take_updates())
            };
            apply_updates(&mut store, updates)?;
            if let Some(c) = recipe.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            opt.step(&mut store, &grads, lr, recipe.weight_decay)?;
            if let Some(decay) = recipe.ema_decay {
                if epoch >= recipe.ema_start() {
                    ema.get_or_insert_with(|| Ema::new(&store, decay)).update(&store)?;
                }
            }
            step_losses.push(loss);
            loss_sum += loss;
            step += 1;
        }
        let eval_store = ema.as_ref().map_or(&store, |e| &e.store);
        let val_top1 = evaluate(&ModelClassifier { model: &model, store: eval_store }, val_set, recipe.batch_size)?;
        let m = EpochMetrics {
            epoch: epoch + 1,
            lr,
            dropout,
            train_loss: loss_sum / steps_per_epoch as f64,
            val_top1,
            wall_seconds: if opts.deterministic { 0.0 } else { start.elapsed().as_secs_f64() },
        };
        if opts.verbose {
            eprintln!("epoch {} loss {:.4} val {:.4} lr {:.3e} ({:.1}s)", m.epoch, m.train_loss, m.val_top1, m.lr, start.elapsed().as_secs_f64());
        }
        if let Some(f) = csv.as_mut() {
            writeln!(f, "{}", m.csv_row())?;
            f.flush()?;
        }
        history.push(m);
        if let (Some(dir), Some(k)) = (&opts.out_dir, recipe.checkpoint_every) {
            if k > 0 && (epoch + 1) % k == 0 && epoch + 1 < recipe.epochs {
                let ck = Checkpoint::new(cfg, recipe, (epoch + 1) as u64, &rng, &store, ema.as_ref().map(|e| &e.store));
                ck.save(dir.join(format!("epoch_{:04}.pnxc", epoch + 1)))?;
            }
        }
    }
    let ema = ema.map(|e| e.store);
    if let Some(dir) = &opts.out_dir {
        Checkpoint::new(cfg, recipe, recipe.epochs as u64, &rng, &store, ema.as_ref()).save(dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome { model, store, ema, history, step_losses, rng })
}

/// Top-1 of a checkpoint's evaluation weights.
pub fn evaluate_checkpoint(path: &Path, ds: &Dataset, batch_size: usize) -> Result<f64> {
    let ck = Checkpoint::load(path)?;
    check_compatible(&ck.config, ds, "dataset")?;
    let (model, store) = ck.eval_weights()?;
    evaluate(&ModelClassifier { model: &model, store: &store }, ds, batch_size)
}
