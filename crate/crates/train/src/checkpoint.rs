//! Binary checkpoint container.
//!
//! Little-endian throughout:
//!
//! ```text
//! "PNXC" | version u32
//! config_len u32 | config JSON
//! recipe_len u32 | recipe JSON
//! epoch u64
//! rng seed [u8; 32] | rng stream u64 | rng word_pos u128
//! live_count u32 | ema_count u32
//! per tensor: name_len u16 | name | kind u8 | rank u8 | dims u32 × rank | f32 × len
//! ```
//!
//! Live tensors come first, then EMA tensors (same names).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use polynext_core::{ModelConfig, ParamKind, ParamStore, PolyNeXtModel, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TrainError};
use crate::recipe::TrainRecipe;

pub const MAGIC: &[u8; 4] = b"PNXC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub recipe: TrainRecipe,
    pub epoch: u64,
    pub rng: RngState,
    pub tensors: Vec<NamedTensor>,
    pub ema: Vec<NamedTensor>,
}

/// Round every value through `f32`.
pub fn quantize_f32(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

fn named(store: &ParamStore) -> Vec<NamedTensor> {
    store.entries().iter().map(|e| NamedTensor { name: e.name.clone(), kind: e.kind, value: e.value.clone() }).collect()
}

fn kind_code(k: ParamKind) -> u8 {
    match k {
        ParamKind::Weight => 0,
        ParamKind::NoDecay => 1,
        ParamKind::Buffer => 2,
    }
}

fn code_kind(c: u8) -> Result<ParamKind> {
    Ok(match c {
        0 => ParamKind::Weight,
        1 => ParamKind::NoDecay,
        2 => ParamKind::Buffer,
        _ => return Err(bad(format!("unknown tensor kind {c}"))),
    })
}

fn bad(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(config: &ModelConfig, recipe: &TrainRecipe, epoch: u64, rng: &ChaCha8Rng, live: &ParamStore, ema: Option<&ParamStore>) -> Self {
        Self {
            config: config.clone(),
            recipe: recipe.clone(),
            epoch,
            rng: RngState::capture(rng),
            tensors: named(live),
            ema: ema.map(named).unwrap_or_default(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for text in [self.config.to_json(), self.recipe.to_json()] {
            out.extend_from_slice(&(text.len() as u32).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
        }
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.ema.len() as u32).to_le_bytes());
        for t in self.tensors.iter().chain(&self.ema) {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(kind_code(t.kind));
            out.push(t.value.rank() as u8);
            for &d in t.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.value.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let config_text = r.string32()?;
        let config = ModelConfig::from_json(&config_text)?;
        let recipe = TrainRecipe::from_json(&r.string32()?)?;
        let epoch = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let (nl, ne) = (r.u32()? as usize, r.u32()? as usize);
        let mut all = Vec::with_capacity(nl + ne);
        for _ in 0..nl + ne {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
            let kind = code_kind(r.take(1)?[0])?;
            let rank = r.take(1)?[0] as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw.chunks(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
            let value = Tensor::new(dims, data).map_err(|e| bad(format!("{name}: {e}")))?;
            all.push(NamedTensor { name, kind, value });
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let ema = all.split_off(nl);
        Ok(Self { config, recipe, epoch, rng: RngState { seed, stream, word_pos }, tensors: all, ema })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Rebuild the model and fill a registry from `tensors`.
    pub fn restore(&self, tensors: &[NamedTensor]) -> Result<(PolyNeXtModel, ParamStore)> {
        let (model, mut store) = PolyNeXtModel::build(&self.config, 0)?;
        if tensors.len() != store.len() {
            return Err(bad(format!("checkpoint has {} tensors, model has {}", tensors.len(), store.len())));
        }
        for t in tensors {
            let id = store.find(&t.name).ok_or_else(|| bad(format!("unknown tensor {}", t.name)))?;
            if store.kind(id) != t.kind {
                return Err(bad(format!("{} has kind {:?}, expected {:?}", t.name, t.kind, store.kind(id))));
            }
            store.set(id, t.value.clone()).map_err(|e| bad(format!("{}: {e}", t.name)))?;
        }
        Ok((model, store))
    }

    pub fn live(&self) -> Result<(PolyNeXtModel, ParamStore)> {
        self.restore(&self.tensors)
    }

    /// EMA weights when present, else the live weights.
    pub fn eval_weights(&self) -> Result<(PolyNeXtModel, ParamStore)> {
        if self.ema.is_empty() {
            self.live()
        } else {
            self.restore(&self.ema)
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string32(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("header text is not UTF-8"))
    }
}
