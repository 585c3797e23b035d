//! Desk-scale training: datasets, AdamW with a cosine schedule, label
//! smoothing, weight averaging, checkpoints and metrics.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod optim;
pub mod recipe;
pub mod suites;
pub mod trainer;

pub use checkpoint::{quantize_f32, Checkpoint};
pub use data::{load_cifar10, synthetic_dataset, Augment, DataSource, Dataset};
pub use error::{Result, TrainError};
pub use optim::{ema_update, AdamW, Ema};
pub use recipe::{cosine_lr, TrainRecipe};
pub use trainer::{evaluate, train, Classifier, ModelClassifier, TrainOptions, TrainOutcome};
