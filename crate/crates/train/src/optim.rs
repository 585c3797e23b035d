//! AdamW, gradient clipping and the weight average.

use polynext_core::{ParamId, ParamKind, ParamStore, Tensor};

use crate::error::{Result, TrainError};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments per registry slot; buffers keep empty slots.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |e: &polynext_core::params::ParamEntry| if e.kind.trainable() { vec![0.0; e.value.len()] } else { Vec::new() };
        Self {
            m: store.entries().iter().map(zeros).collect(),
            v: store.entries().iter().map(zeros).collect(),
            t: 0,
        }
    }

    /// One step over every trainable parameter; a parameter without a
    /// gradient is stepped with a zero gradient. Returns the number of
    /// parameters touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64, weight_decay: f64) -> Result<usize> {
        if self.m.len() != store.len() {
            return Err(TrainError::Recipe(format!("optimizer has {} slots, store has {}", self.m.len(), store.len())));
        }
        let mut by_id: Vec<Option<&Tensor>> = vec![None; store.len()];
        for (id, g) in grads {
            if by_id[id.index()].replace(g).is_some() {
                return Err(TrainError::Recipe(format!("duplicate gradient for {}", store.name(*id))));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        let mut touched = 0;
        for id in ids {
            let kind = store.kind(id);
            if !kind.trainable() {
                continue;
            }
            let i = id.index();
            let decay = if kind == ParamKind::Weight { weight_decay } else { 0.0 };
            let p = store.get_mut(id);
            if let Some(g) = by_id[i] {
                if g.shape() != p.shape() {
                    return Err(polynext_core::Error::Shape { op: "adamw", left: p.shape().to_vec(), right: g.shape().to_vec() }.into());
                }
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let g = by_id[i].map_or(0.0, |g| g.data()[k]);
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * g;
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * g * g;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *w -= lr * (mh / (vh.sqrt() + ADAM_EPS) + decay * *w);
            }
            touched += 1;
        }
        Ok(touched)
    }
}

pub fn global_norm(grads: &[(ParamId, Tensor)]) -> f64 {
    grads.iter().map(|(_, g)| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescale so the global norm is at most `max_norm`. Returns the norm
/// before clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let n = global_norm(grads);
    if n > max_norm {
        let s = max_norm / n;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    n
}

/// `ema ← decay·ema + (1 − decay)·live` over every entry, buffers included.
pub fn ema_update(ema: &mut ParamStore, live: &ParamStore, decay: f64) -> Result<()> {
    if ema.len() != live.len() {
        return Err(TrainError::Recipe(format!("ema registry has {} entries, live has {}", ema.len(), live.len())));
    }
    let ids: Vec<ParamId> = live.ids().collect();
    for id in ids {
        let (le, name) = (live.entry(id), ema.name(id).to_string());
        if le.name != name || le.value.shape() != ema.get(id).shape() {
            return Err(TrainError::Recipe(format!("registry mismatch at {name} / {}", le.name)));
        }
        let lv = le.value.data();
        for (e, &l) in ema.get_mut(id).data_mut().iter_mut().zip(lv) {
            *e = decay * *e + (1.0 - decay) * l;
        }
    }
    Ok(())
}

/// Weight average whose decay ramps with the number of updates.
#[derive(Clone, Debug)]
pub struct Ema {
    pub store: ParamStore,
    pub decay: f64,
    pub updates: u64,
}

impl Ema {
    pub fn new(live: &ParamStore, decay: f64) -> Self {
        Self { store: live.clone(), decay, updates: 0 }
    }

    /// Decay for the next update: `min(decay, (1 + n)/(10 + n))`.
    pub fn current_decay(&self) -> f64 {
        let n = self.updates as f64;
        self.decay.min((1.0 + n) / (10.0 + n))
    }

    pub fn update(&mut self, live: &ParamStore) -> Result<()> {
        let d = self.current_decay();
        ema_update(&mut self.store, live, d)?;
        self.updates += 1;
        Ok(())
    }
}
