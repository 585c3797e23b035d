//! Named parameter registry and the per-pass forward session.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Grads, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Index into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the optimizer treats an entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trained with weight decay.
    Weight,
    /// Trained, exempt from weight decay (biases, norm affines, gate logits,
    /// skip scalars).
    NoDecay,
    /// Running statistic; never trained.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Flat, ordered registry of every named tensor in a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor. Panics on a duplicate name; names are built by the
    /// model constructor and a duplicate is a construction bug.
    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        let name = name.into();
        let id = ParamId(self.entries.len());
        let prev = self.by_name.insert(name.clone(), id);
        assert!(prev.is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry { name, kind, value });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    /// Replace a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(crate::error::shape_err("set parameter", e.value.shape(), value.shape()));
        }
        e.value = value;
        Ok(())
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.kind.trainable()).map(|e| e.value.len()).sum()
    }

    /// Copy every value from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(invalid("parameter registries differ in length"));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(invalid(format!("registry mismatch at {} vs {}", a.name, b.name)));
            }
            a.value = b.value.clone();
        }
        Ok(())
    }
}

/// Train or inference behavior for norms, dropout and stochastic depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// State for one forward pass: the tape, the parameter bindings, the mode,
/// regularization rates and pending running-statistic updates.
pub struct Session<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    pub mode: Mode,
    /// Whether trainable parameters are bound as gradient-tracking leaves.
    pub track_grads: bool,
    /// Dropout probability for PolyMLP outputs and pooled head features.
    pub dropout: f64,
    /// Maximum stochastic-depth rate (reached at the last sublayer).
    pub drop_path: f64,
    /// BatchNorm / row-sum momentum override; `None` uses each layer's own.
    pub momentum_override: Option<f64>,
    rng: Option<&'a mut ChaCha8Rng>,
    updates: Vec<(ParamId, Tensor)>,
}

impl<'a> Session<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            tape,
            vars: vec![None; store.len()],
            store,
            mode,
            track_grads: false,
            dropout: 0.0,
            drop_path: 0.0,
            momentum_override: None,
            rng: None,
            updates: Vec::new(),
        }
    }

    /// Training session with gradient tracking and a random source.
    pub fn train(tape: &'a mut Tape, store: &'a ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        let mut s = Self::new(tape, store, Mode::Train);
        s.track_grads = true;
        s.rng = Some(rng);
        s
    }

    pub fn with_rng(mut self, rng: &'a mut ChaCha8Rng) -> Self {
        self.rng = Some(rng);
        self
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn rng(&mut self) -> Result<&mut ChaCha8Rng> {
        self.rng
            .as_deref_mut()
            .ok_or_else(|| invalid("train-mode randomness requested but no rng attached"))
    }

    /// Tape variable for a parameter, binding it on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let e = self.store.entry(id);
        let v = if self.track_grads && e.kind.trainable() {
            self.tape.param(e.value.clone())
        } else {
            self.tape.constant(e.value.clone())
        };
        self.vars[id.0] = Some(v);
        v
    }

    /// Bind a parameter to an existing variable (used by gradient checks).
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.vars[id.0] = Some(v);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn push_update(&mut self, id: ParamId, value: Tensor) {
        self.updates.push((id, value));
    }

    pub fn take_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.updates)
    }

    /// Variables bound so far, for collecting gradients.
    pub fn bindings(&self) -> Vec<(ParamId, Var)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }

    /// Gradient per trainable parameter that took part in the pass.
    pub fn param_grads(&self, grads: &Grads) -> Vec<(ParamId, Tensor)> {
        self.bindings()
            .into_iter()
            .filter(|(id, _)| self.store.kind(*id).trainable())
            .filter_map(|(id, v)| grads.get(v).map(|g| (id, g.clone())))
            .collect()
    }
}

/// Apply pending running-statistic updates.
pub fn apply_updates(store: &mut ParamStore, updates: Vec<(ParamId, Tensor)>) -> Result<()> {
    for (id, v) in updates {
        if store.kind(id) != ParamKind::Buffer {
            return Err(Error::InvalidArgument(format!("{} is not a buffer", store.name(id))));
        }
        store.set(id, v)?;
    }
    Ok(())
}
