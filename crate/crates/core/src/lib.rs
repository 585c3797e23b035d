//! Activation-free polynomial vision backbones.
//!
//! The only nonlinearity anywhere in the network is the elementwise product
//! of two learned projections. This crate holds the `f64` tensor type, a
//! reverse-mode tape, the polynomial blocks (PolyMLP, PolyConv, PolyAttn,
//! PolyHead), the residual gating and normalization layers, and the model
//! assembly.

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod norm;
pub mod ops;
pub mod params;
pub mod poly;
pub mod stabilization;
pub mod tensor;

pub use autodiff::{CustomOp, Grads, Tape, Var};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradReport};
pub use model::{ModelConfig, PolyNeXtModel};
pub use norm::NormKind;
pub use ops::Conv2dSpec;
pub use params::{Mode, ParamId, ParamKind, ParamStore, Session};
pub use poly::Fusion;
pub use tensor::Tensor;
