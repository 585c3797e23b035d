//! Image datasets: the CIFAR-10 binary format and a synthetic generator.

use std::fs;
use std::path::Path;

use polynext_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{format_err, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
/// One label byte followed by the R, G and B planes.
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
pub const CIFAR_CLASSES: usize = 10;

/// Labelled `[C, H, W]` images stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub channels: usize,
    pub resolution: usize,
    pub classes: usize,
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Dataset {
    pub fn empty(channels: usize, resolution: usize, classes: usize) -> Self {
        Self { images: Vec::new(), labels: Vec::new(), channels, resolution, classes }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.resolution * self.resolution
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Samples `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        let n = self.image_len();
        Self {
            images: self.images[range.start * n..range.end * n].to_vec(),
            labels: self.labels[range].to_vec(),
            ..*self
        }
    }

    pub fn take(&self, n: usize) -> Self {
        self.slice(0..n.min(self.len()))
    }

    pub fn channel_stats(&self) -> ChannelStats {
        let plane = self.resolution * self.resolution;
        let mut sum = vec![0.0; self.channels];
        let mut sq = vec![0.0; self.channels];
        for img in self.images.chunks(self.image_len()) {
            for (c, p) in img.chunks(plane).enumerate() {
                for &v in p {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
        }
        let n = (self.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-8)).collect();
        ChannelStats { mean, std }
    }

    /// `(x − mean_c) / std_c` in place.
    pub fn standardize(&mut self, stats: &ChannelStats) {
        let plane = self.resolution * self.resolution;
        let n = self.image_len();
        for img in self.images.chunks_mut(n) {
            for (c, p) in img.chunks_mut(plane).enumerate() {
                let (m, s) = (stats.mean[c], stats.std[c]);
                p.iter_mut().for_each(|v| *v = ((*v as f64 - m) / s) as f32);
            }
        }
    }

    /// Stack samples into a `[B, C, H, W]` tensor, optionally augmented.
    pub fn batch(&self, indices: &[usize], aug: Option<(&Augment, &mut ChaCha8Rng)>) -> (Tensor, Vec<usize>) {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        match aug {
            None => {
                for &i in indices {
                    data.extend(self.image(i).iter().map(|&v| v as f64));
                }
            }
            Some((a, rng)) => {
                for &i in indices {
                    data.extend(a.apply(self.image(i), self.channels, self.resolution, rng));
                }
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i] as usize).collect();
        let t = Tensor::new(vec![indices.len(), self.channels, self.resolution, self.resolution], data).expect("non-empty batch");
        (t, labels)
    }
}

/// Random horizontal flip and zero-padded random crop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub hflip: bool,
    pub pad: usize,
}

impl Augment {
    pub fn apply(&self, img: &[f32], channels: usize, side: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let flip = self.hflip && rng.random::<bool>();
        let (dy, dx) = if self.pad > 0 {
            (rng.random_range(0..=2 * self.pad) as isize - self.pad as isize, rng.random_range(0..=2 * self.pad) as isize - self.pad as isize)
        } else {
            (0, 0)
        };
        let mut out = vec![0.0; img.len()];
        for c in 0..channels {
            for y in 0..side {
                let sy = y as isize + dy;
                if sy < 0 || sy >= side as isize {
                    continue;
                }
                for x in 0..side {
                    let xx = if flip { side - 1 - x } else { x };
                    let sx = xx as isize + dx;
                    if sx < 0 || sx >= side as isize {
                        continue;
                    }
                    out[(c * side + y) * side + x] = img[(c * side + sy as usize) * side + sx as usize] as f64;
                }
            }
        }
        out
    }
}

/// Label and pixel bytes of one CIFAR-10 record.
pub fn decode_record(rec: &[u8]) -> Result<(u8, &[u8])> {
    if rec.len() != CIFAR_RECORD {
        return Err(format_err(format!("record has {} bytes, expected {CIFAR_RECORD}", rec.len())));
    }
    if rec[0] as usize >= CIFAR_CLASSES {
        return Err(format_err(format!("label {} out of range", rec[0])));
    }
    Ok((rec[0], &rec[1..]))
}

pub fn encode_record(label: u8, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(CIFAR_RECORD);
    out.push(label);
    out.extend_from_slice(pixels);
    out
}

/// Decode a whole batch file, pixels scaled to `[0, 1]`.
pub fn parse_cifar_bytes(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(format_err(format!("file size {} is not a multiple of {CIFAR_RECORD}", bytes.len())));
    }
    let mut ds = Dataset::empty(3, CIFAR_SIDE, CIFAR_CLASSES);
    for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        let (label, px) = decode_record(rec).map_err(|e| format_err(format!("record {i}: {e}")))?;
        ds.labels.push(label);
        ds.images.extend(px.iter().map(|&b| b as f32 / 255.0));
    }
    Ok(ds)
}

pub fn read_cifar_file(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| format_err(format!("{}: {e}", path.display())))?;
    parse_cifar_bytes(&bytes).map_err(|e| format_err(format!("{}: {e}", path.display())))
}

fn concat(parts: Vec<Dataset>) -> Dataset {
    let mut out = Dataset::empty(3, CIFAR_SIDE, CIFAR_CLASSES);
    for p in parts {
        out.images.extend(p.images);
        out.labels.extend(p.labels);
    }
    out
}

/// The five training batches and the test batch of a CIFAR-10 binary
/// directory, standardized with the training-split channel statistics.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = concat((1..=5).map(|i| read_cifar_file(&dir.join(format!("data_batch_{i}.bin")))).collect::<Result<_>>()?);
    let mut test = read_cifar_file(&dir.join("test_batch.bin"))?;
    let stats = train.channel_stats();
    let mut train = train;
    train.standardize(&stats);
    test.standardize(&stats);
    Ok((train, test))
}

/// Class-conditioned Gaussian blobs: every class has its own colour, centre
/// and width; samples add pixel noise and a one-pixel jitter of the centre.
pub fn synthetic_dataset(seed: u64, classes: usize, resolution: usize, n: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = resolution as f64;
    let protos: Vec<([f64; 3], f64, f64, f64)> = (0..classes)
        .map(|_| {
            let color = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            (color, rng.random_range(0.25..0.75) * r, rng.random_range(0.25..0.75) * r, rng.random_range(0.12..0.3) * r)
        })
        .collect();
    let noise = Normal::new(0.0, 0.1).expect("valid std");
    let mut ds = Dataset::empty(3, resolution, classes);
    for _ in 0..n {
        let k = rng.random_range(0..classes);
        let (color, cy, cx, w) = protos[k];
        let (jy, jx) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        for c in color {
            for y in 0..resolution {
                for x in 0..resolution {
                    let d2 = (y as f64 - cy - jy).powi(2) + (x as f64 - cx - jx).powi(2);
                    let v = 0.5 + (c - 0.5) * (-d2 / (2.0 * w * w)).exp() + noise.sample(&mut rng);
                    ds.images.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        ds.labels.push(k as u8);
    }
    ds
}

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Cifar10(std::path::PathBuf),
    Synthetic { seed: u64, classes: usize, resolution: usize },
}

impl DataSource {
    /// `synthetic` or a CIFAR-10 directory.
    pub fn parse(arg: &str, seed: u64, classes: usize, resolution: usize) -> Self {
        if arg == "synthetic" {
            DataSource::Synthetic { seed, classes, resolution }
        } else {
            DataSource::Cifar10(arg.into())
        }
    }

    /// Standardized train and validation sets with at most the given
    /// number of samples.
    pub fn load(&self, train_samples: usize, val_samples: usize) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Cifar10(dir) => {
                let (train, test) = load_cifar10(dir)?;
                Ok((train.take(train_samples), test.take(val_samples)))
            }
            DataSource::Synthetic { seed, classes, resolution } => {
                // one stream so both splits share the class prototypes
                let all = synthetic_dataset(*seed, *classes, *resolution, train_samples + val_samples);
                let mut train = all.slice(0..train_samples);
                let mut val = all.slice(train_samples..train_samples + val_samples);
                let stats = train.channel_stats();
                train.standardize(&stats);
                val.standardize(&stats);
                Ok((train, val))
            }
        }
    }
}

/// Shuffled sample order for one epoch.
pub fn epoch_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
