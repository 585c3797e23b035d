//! PolyNeXt assembly: stem, stages of two-input cells, and the head.
//!
//! Each cell combines the two preceding cell outputs with per-channel
//! scalars, normalizes, and then runs `stacks` pairs of (spatial mixer,
//! PolyMLP) sublayers, each as a gated residual `y + σ(λ_j)·f(y)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::norm::{Norm, NormKind};
use crate::ops::{conv_out_size, Conv2dSpec};
use crate::params::{Mode, ParamId, ParamKind, ParamStore, Session};
use crate::poly::{attn_heads, coarse_kernel, Conv, Fusion, PolyAttn, PolyConv, PolyHead, PolyMlp, DEFAULT_DEGREE, GAIN_PLAIN, GAIN_POLY, HEAD_DIM};
use crate::stabilization::{drop_path_rate, dropout_mask, init_sigmoid_logits, stochastic_depth_gate, SigmoidInit};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerKind {
    PolyConv,
    PolyAttn,
}

fn default_degree() -> u32 {
    DEFAULT_DEGREE
}

fn default_in_channels() -> usize {
    3
}

/// Declarative description of a PolyNeXt variant. Serialized as JSON with
/// exactly these keys; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Channels per stage.
    pub channels: Vec<usize>,
    /// Cells per stage.
    pub cells: Vec<usize>,
    /// (mixer, PolyMLP) pairs per cell, per stage.
    pub stacks: Vec<usize>,
    /// Spatial mixer per stage.
    pub mixers: Vec<MixerKind>,
    pub norm: NormKind,
    pub num_classes: usize,
    /// Square input side length.
    pub resolution: usize,
    #[serde(default)]
    pub sigmoid_init: SigmoidInit,
    /// PolyHead hidden width; defaults to the last stage's channels.
    #[serde(default)]
    pub head_hidden: Option<usize>,
    /// Attention polynomial degree.
    #[serde(default = "default_degree")]
    pub attn_degree: u32,
    #[serde(default)]
    pub fusion: Fusion,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
}

const CONV4: [MixerKind; 4] = [MixerKind::PolyConv; 4];
const ATTN4: [MixerKind; 4] = [MixerKind::PolyConv, MixerKind::PolyConv, MixerKind::PolyAttn, MixerKind::PolyAttn];

impl ModelConfig {
    fn imagenet(channels: [usize; 4], cells: [usize; 4], stacks: [usize; 4], mixers: [MixerKind; 4]) -> Self {
        Self {
            channels: channels.to_vec(),
            cells: cells.to_vec(),
            stacks: stacks.to_vec(),
            mixers: mixers.to_vec(),
            norm: NormKind::LayerNorm,
            num_classes: 1000,
            resolution: 224,
            sigmoid_init: SigmoidInit::Standard,
            head_hidden: None,
            attn_degree: DEFAULT_DEGREE,
            fusion: Fusion::Hadamard,
            in_channels: 3,
        }
    }

    /// Named variants: `cpolynext-{t,s,b,l,lr}` and `apolynext-{t,s,b,l}`,
    /// with an optional `-bn` suffix selecting the BatchNorm variant.
    pub fn preset(name: &str) -> Result<Self> {
        let lower = name.to_ascii_lowercase();
        let (base, bn) = match lower.strip_suffix("-bn") {
            Some(b) => (b, true),
            None => (lower.as_str(), false),
        };
        let (family, size) = base.split_once('-').ok_or_else(|| Error::Config(format!("unknown preset {name}")))?;
        let mixers = match family {
            "cpolynext" => CONV4,
            "apolynext" => ATTN4,
            _ => return Err(Error::Config(format!("unknown preset {name}"))),
        };
        let mut cfg = match size {
            "t" => Self::imagenet([48, 96, 192, 288], [2, 2, 6, 2], [3, 3, 3, 3], mixers),
            "s" => Self::imagenet([72, 144, 288, 432], [3, 3, 8, 3], [3, 4, 4, 4], mixers),
            "b" => Self::imagenet([84, 168, 336, 504], [3, 5, 10, 3], [4, 4, 4, 4], mixers),
            "l" => Self::imagenet([96, 192, 384, 576], [3, 6, 12, 3], [4, 4, 4, 4], mixers),
            "lr" if family == "cpolynext" => Self {
                channels: vec![72, 144, 288],
                cells: vec![2, 3, 3],
                stacks: vec![3, 3, 3],
                mixers: vec![MixerKind::PolyConv; 3],
                num_classes: 10,
                resolution: 32,
                ..Self::imagenet([0; 4], [0; 4], [0; 4], CONV4)
            },
            _ => return Err(Error::Config(format!("unknown preset {name}"))),
        };
        if bn {
            cfg.norm = NormKind::PolyBatchNorm;
        }
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn num_stages(&self) -> usize {
        self.channels.len()
    }

    pub fn max_stacks(&self) -> usize {
        self.stacks.iter().copied().max().unwrap_or(0)
    }

    pub fn head_hidden(&self) -> usize {
        self.head_hidden.unwrap_or_else(|| *self.channels.last().unwrap())
    }

    /// Per-branch PolyMLP width in a 0-based stage.
    pub fn mlp_hidden(&self, stage: usize) -> usize {
        let c = self.channels[stage];
        if stage < 2 {
            c
        } else {
            (7 * c).div_ceil(8)
        }
    }

    /// PolyConv hidden width in a 0-based stage.
    pub fn conv_hidden(&self, stage: usize) -> usize {
        let c = self.channels[stage];
        if stage < 2 {
            c
        } else {
            (3 * c).div_ceil(4)
        }
    }

    /// Spatial side length of each stage's feature map.
    pub fn stage_resolutions(&self) -> Result<Vec<usize>> {
        let mut r = conv_out_size(self.resolution, 7, &stem_spec())
            .ok_or_else(|| Error::Config(format!("resolution {} too small for the stem", self.resolution)))?;
        let mut out = vec![r];
        for _ in 1..self.num_stages() {
            r = conv_out_size(r, 3, &down_spec())
                .ok_or_else(|| Error::Config(format!("resolution {} too small for {} stages", self.resolution, self.num_stages())))?;
            out.push(r);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if !(1..=4).contains(&n) {
            return Err(Error::Config(format!("expected 1 to 4 stages, got {n}")));
        }
        for (name, len) in [("cells", self.cells.len()), ("stacks", self.stacks.len()), ("mixers", self.mixers.len())] {
            if len != n {
                return Err(Error::Config(format!("{name} has {len} entries for {n} stages")));
            }
        }
        let counts = self.channels.iter().chain(&self.cells).chain(&self.stacks);
        if counts.copied().any(|v| v == 0) || self.num_classes == 0 || self.in_channels == 0 || self.head_hidden() == 0 {
            return Err(Error::Config("all counts must be >= 1".into()));
        }
        if self.attn_degree == 0 {
            return Err(Error::Config("attn_degree must be >= 1".into()));
        }
        if self.resolution % 4 != 0 {
            return Err(Error::Config(format!("resolution {} is not divisible by 4", self.resolution)));
        }
        let res = self.stage_resolutions()?;
        if n == 4 && self.mixers[0] == MixerKind::PolyAttn && self.mixers[1] == MixerKind::PolyAttn {
            return Err(Error::Config("attention in the high-resolution stages is not supported".into()));
        }
        for (s, m) in self.mixers.iter().enumerate() {
            if *m == MixerKind::PolyAttn && res[s] * res[s] > 4096 {
                return Err(Error::Config(format!(
                    "stage {s}: attention over {} tokens exceeds the 4096-token limit",
                    res[s] * res[s]
                )));
            }
        }
        Ok(())
    }
}

pub fn stem_spec() -> Conv2dSpec {
    Conv2dSpec::new(4, 3, 1, 1)
}

pub fn down_spec() -> Conv2dSpec {
    Conv2dSpec::new(2, 1, 1, 1)
}

#[derive(Clone, Debug)]
pub enum Mixer {
    Conv(PolyConv),
    Attn(PolyAttn),
}

#[derive(Clone, Debug)]
pub enum Sublayer {
    Mixer(Mixer),
    Mlp(PolyMlp),
}

impl Sublayer {
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        match self {
            Sublayer::Mixer(Mixer::Conv(m)) => m.forward(s, x),
            Sublayer::Mixer(Mixer::Attn(m)) => m.forward(s, x),
            Sublayer::Mlp(m) => m.forward(s, x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Cell {
    pub s0: ParamId,
    pub s1: ParamId,
    pub pre_norm: Norm,
    /// Gate logits, length `2·max_stacks`, consumed positionally.
    pub logits: ParamId,
    pub sublayers: Vec<Sublayer>,
    /// Position of the first sublayer among all sublayers of the model.
    pub first_index: usize,
}

#[derive(Clone, Debug)]
pub struct Stage {
    /// Stride-2 convolutions for the `x_{t−2}` and `x_{t−1}` paths.
    pub down: Option<[Conv; 2]>,
    pub cells: Vec<Cell>,
    pub resolution: usize,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct Head {
    pub norm: Norm,
    pub poly: PolyHead,
}

#[derive(Clone, Debug)]
pub struct PolyNeXtModel {
    pub config: ModelConfig,
    pub stem: Conv,
    pub stages: Vec<Stage>,
    pub head: Head,
    pub total_sublayers: usize,
}

/// Logits plus the last cell output of every stage.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub stage_outputs: Vec<Var>,
}

impl PolyNeXtModel {
    /// Build and initialize a model. Equal seeds give bit-identical parameters.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let res = config.stage_resolutions()?;
        let c0 = config.channels[0];
        let stem = Conv::build(&mut store, "stem", config.in_channels, c0, 7, stem_spec(), GAIN_PLAIN, &mut rng);
        let logit_len = 2 * config.max_stacks();
        let init = init_sigmoid_logits(logit_len, config.sigmoid_init)?;
        let mut stages = Vec::new();
        let mut index = 0;
        for (si, &c) in config.channels.iter().enumerate() {
            let spatial = (res[si], res[si]);
            let down = (si > 0).then(|| {
                let prev = config.channels[si - 1];
                [
                    Conv::build(&mut store, &format!("stages.{si}.down.0"), prev, c, 3, down_spec(), GAIN_POLY, &mut rng),
                    Conv::build(&mut store, &format!("stages.{si}.down.1"), prev, c, 3, down_spec(), GAIN_POLY, &mut rng),
                ]
            });
            let mut cells = Vec::new();
            for ci in 0..config.cells[si] {
                let p = format!("stages.{si}.cells.{ci}");
                let s0 = store.add(format!("{p}.s0"), ParamKind::NoDecay, Tensor::ones(&[c]));
                let s1 = store.add(format!("{p}.s1"), ParamKind::NoDecay, Tensor::ones(&[c]));
                let pre_norm = Norm::build(&mut store, &format!("{p}.pre_norm"), config.norm, c, spatial);
                let logits = store.add(format!("{p}.logits"), ParamKind::NoDecay, Tensor::from_vec(init.clone()));
                let mut sublayers = Vec::new();
                for k in 0..config.stacks[si] {
                    let mp = format!("{p}.sub.{}", 2 * k);
                    let mixer = match config.mixers[si] {
                        MixerKind::PolyConv => Mixer::Conv(PolyConv::build(
                            &mut store,
                            &mp,
                            c,
                            config.conv_hidden(si),
                            si,
                            config.norm,
                            spatial,
                            config.fusion,
                            &mut rng,
                        )),
                        MixerKind::PolyAttn => Mixer::Attn(PolyAttn::build(&mut store, &mp, c, config.attn_degree, config.norm, spatial, &mut rng)?),
                    };
                    sublayers.push(Sublayer::Mixer(mixer));
                    let mlp = PolyMlp::build(
                        &mut store,
                        &format!("{p}.sub.{}", 2 * k + 1),
                        c,
                        config.mlp_hidden(si),
                        c,
                        config.norm,
                        spatial,
                        config.fusion,
                        &mut rng,
                    );
                    sublayers.push(Sublayer::Mlp(mlp));
                }
                cells.push(Cell { s0, s1, pre_norm, logits, first_index: index, sublayers });
                index += 2 * config.stacks[si];
            }
            stages.push(Stage { down, cells, resolution: res[si], channels: c });
        }
        let c_last = *config.channels.last().unwrap();
        let head = Head {
            norm: Norm::build(&mut store, "head.norm", config.norm, c_last, (1, 1)),
            poly: PolyHead::build(&mut store, "head.poly", c_last, config.head_hidden(), config.num_classes, config.norm, config.fusion, &mut rng),
        };
        Ok((Self { config: config.clone(), stem, stages, head, total_sublayers: index }, store))
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        Ok(self.forward_full(s, x)?.logits)
    }

    pub fn forward_full(&self, s: &mut Session<'_>, x: Var) -> Result<ForwardOutput> {
        let shape = s.value(x).shape().to_vec();
        let r = self.config.resolution;
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::InvalidShape(shape, format!("expected [B, {}, H, W]", self.config.in_channels)));
        }
        if self.config.norm == NormKind::PolyBatchNorm && (shape[2] != r || shape[3] != r) {
            return Err(Error::InvalidArgument(format!(
                "input {}x{} does not match the {r}x{r} resolution bound by the BatchNorm buffers",
                shape[2], shape[3]
            )));
        }
        let stem = self.stem.forward(s, x)?;
        let (mut x2, mut x1) = (stem, stem);
        let mut stage_outputs = Vec::new();
        for stage in &self.stages {
            if let Some([d0, d1]) = &stage.down {
                x2 = d0.forward(s, x2)?;
                x1 = d1.forward(s, x1)?;
            }
            for cell in &stage.cells {
                let out = self.cell_forward(s, cell, x2, x1)?;
                x2 = x1;
                x1 = out;
            }
            stage_outputs.push(x1);
        }
        let pooled = s.tape.global_avg_pool(x1)?;
        let h = self.head.norm.forward(s, pooled)?;
        let h = self.dropout(s, h)?;
        let logits = self.head.poly.forward(s, h)?;
        Ok(ForwardOutput { logits, stage_outputs })
    }

    fn dropout(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let rate = s.dropout;
        if !s.training() || rate <= 0.0 {
            return Ok(x);
        }
        let shape = s.value(x).shape().to_vec();
        let mask = dropout_mask(&shape, rate, s.rng()?);
        s.tape.mul_const(x, mask)
    }

    pub fn cell_forward(&self, s: &mut Session<'_>, cell: &Cell, x2: Var, x1: Var) -> Result<Var> {
        let (s0, s1) = (s.p(cell.s0), s.p(cell.s1));
        let a = s.tape.channel_scale(x2, s0)?;
        let b = s.tape.channel_scale(x1, s1)?;
        let sum = s.tape.add(a, b)?;
        let mut y = cell.pre_norm.forward(s, sum)?;
        let logits = s.p(cell.logits);
        for (j, sub) in cell.sublayers.iter().enumerate() {
            let mut f = sub.forward(s, y)?;
            if matches!(sub, Sublayer::Mlp(_)) {
                f = self.dropout(s, f)?;
            }
            let lam = s.tape.index(logits, j)?;
            let gate = s.tape.sigmoid(lam);
            f = s.tape.scale_by(f, gate)?;
            let rate = drop_path_rate(cell.first_index + j, self.total_sublayers, s.drop_path);
            if s.training() && rate > 0.0 {
                let b = s.value(f).dim(0);
                let rng = s.rng()?;
                let factors = (0..b).map(|_| stochastic_depth_gate(rate, true, rng).scale).collect();
                f = s.tape.sample_scale(f, factors)?;
            }
            y = s.tape.add(y, f)?;
        }
        Ok(y)
    }

    /// Inference-mode logits.
    pub fn logits(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, store, Mode::Infer);
        let xv = s.tape.constant(x.clone());
        let y = self.forward(&mut s, xv)?;
        Ok(s.value(y).clone())
    }

    /// Names of every LayerNorm in the model.
    pub fn layer_norm_names(&self, store: &ParamStore) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_norms(|n| {
            if let Norm::Layer { gamma, .. } = n {
                names.push(store.name(*gamma).trim_end_matches(".gamma").to_string());
            }
        });
        names
    }

    pub fn visit_norms(&self, mut f: impl FnMut(&Norm)) {
        for stage in &self.stages {
            for cell in &stage.cells {
                f(&cell.pre_norm);
                for sub in &cell.sublayers {
                    match sub {
                        Sublayer::Mixer(Mixer::Conv(m)) => f(&m.norm),
                        Sublayer::Mixer(Mixer::Attn(m)) => {
                            if let Some(n) = &m.pre_out {
                                f(n);
                            }
                        }
                        Sublayer::Mlp(m) => f(&m.norm),
                    }
                }
            }
        }
        f(&self.head.norm);
        f(&self.head.poly.norm);
    }
}

/// Trainable parameter total.
pub fn param_count(store: &ParamStore) -> usize {
    store.trainable_count()
}

/// Analytic multiply-accumulate count for one image at `resolution`.
///
/// Counts convolutions, projections, Hadamard products and attention
/// (`2·N²·D` for the two products plus `p` multiplies per weight for the
/// scale and the power); additions, norms and pooling are not counted.
pub fn flops_estimate(config: &ModelConfig, resolution: usize) -> Result<u64> {
    let cfg = ModelConfig { resolution, ..config.clone() };
    let res = cfg.stage_resolutions()?;
    let stem_hw = (res[0] * res[0]) as u64;
    let mut macs = stem_hw * cfg.channels[0] as u64 * cfg.in_channels as u64 * 49;
    for (si, &c) in cfg.channels.iter().enumerate() {
        let hw = (res[si] * res[si]) as u64;
        let c = c as u64;
        if si > 0 {
            macs += 2 * hw * c * cfg.channels[si - 1] as u64 * 9;
        }
        let mixer = match cfg.mixers[si] {
            MixerKind::PolyConv => {
                let ch = cfg.conv_hidden(si) as u64;
                let (kc, _) = coarse_kernel(si);
                hw * (2 * c * ch) + hw * ch * ((kc * kc) as u64 + 18) + hw * ch
            }
            MixerKind::PolyAttn => {
                let heads = attn_heads(c as usize) as u64;
                let d = heads * HEAD_DIM as u64;
                hw * (3 * c * d) + 3 * hw * d * 9 + 2 * hw * hw * d + hw * hw * heads * cfg.attn_degree as u64
            }
        };
        let dh = cfg.mlp_hidden(si) as u64;
        let mlp = hw * (3 * c * dh) + hw * dh;
        macs += (cfg.cells[si] * cfg.stacks[si]) as u64 * (mixer + mlp);
    }
    let c_last = *cfg.channels.last().unwrap() as u64;
    let dh = cfg.head_hidden() as u64;
    macs += 2 * c_last * dh + dh + dh * cfg.num_classes as u64;
    Ok(macs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["cpolynext-t", "cpolynext-s", "cpolynext-b", "cpolynext-l", "apolynext-t", "apolynext-s", "cpolynext-lr", "apolynext-t-bn"] {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(ModelConfig::preset("apolynext-lr").is_err());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let mut v: serde_json::Value = serde_json::from_str(&ModelConfig::preset("cpolynext-t").unwrap().to_json()).unwrap();
        v["dropout"] = serde_json::json!(0.1);
        assert!(ModelConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn config_round_trips() {
        let cfg = ModelConfig::preset("apolynext-s-bn").unwrap();
        assert_eq!(ModelConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn stage_maps_at_224() {
        let cfg = ModelConfig::preset("cpolynext-t").unwrap();
        assert_eq!(cfg.stage_resolutions().unwrap(), vec![56, 28, 14, 7]);
        let lr = ModelConfig::preset("cpolynext-lr").unwrap();
        assert_eq!(lr.stage_resolutions().unwrap(), vec![8, 4, 2]);
    }
}
