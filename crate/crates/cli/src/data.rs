//! Dataset ingestion and synthesis: the CIFAR binary layouts, procedural
//! Gaussian-mixture toys for desk-scale experiments, channel normalization,
//! and pad-crop-flip augmentation.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use hne_core::Tensor;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel normalization statistics, computed on the train split and
/// reused verbatim for the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[M, dim]` for feature datasets, `[M, C, H, W]` for images.
    pub samples: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    /// Statistics the samples were normalized with, if any.
    pub stats: Option<ChannelStats>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gather rows `indices` into a batch tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let row = self.samples.numel() / self.len().max(1);
        let mut shape = self.samples.shape().to_vec();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * row);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.samples.data()[i * row..(i + 1) * row]);
            labels.push(self.labels[i]);
        }
        (Tensor::new(&shape, data).expect("batch arithmetic"), labels)
    }
}

// ---------------------------------------------------------------------------
// CIFAR binary layouts
// ---------------------------------------------------------------------------

const CIFAR_PIXELS: usize = 3 * 32 * 32;

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

/// One CIFAR-10 binary batch file: records of 3073 bytes, a label byte in
/// 0..=9 followed by 3072 pixel bytes as three 32x32 channel planes,
/// row-major. Pixels are scaled to [0, 1]; channel normalization is a
/// separate step so that test splits can reuse train statistics.
pub fn load_cifar10_binary(path: &Path) -> Result<Dataset> {
    let bytes = read_all(path)?;
    parse_cifar(&bytes, 1, 10, Split::Train)
}

/// One CIFAR-100 binary file: records of 3074 bytes, a coarse then a fine
/// label byte; the fine label is used.
pub fn load_cifar100_binary(path: &Path) -> Result<Dataset> {
    let bytes = read_all(path)?;
    parse_cifar(&bytes, 2, 100, Split::Train)
}

fn parse_cifar(bytes: &[u8], label_bytes: usize, classes: usize, split: Split) -> Result<Dataset> {
    let record = label_bytes + CIFAR_PIXELS;
    if bytes.len() % record != 0 {
        let offset = (bytes.len() / record) * record;
        return Err(Error::Parse {
            offset: offset as u64,
            message: format!(
                "truncated record: file holds {} bytes, records are {record} bytes",
                bytes.len()
            ),
        });
    }
    let count = bytes.len() / record;
    let mut labels = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * CIFAR_PIXELS);
    for r in 0..count {
        let base = r * record;
        let label = bytes[base + label_bytes - 1] as usize;
        if label >= classes {
            return Err(Error::Parse {
                offset: (base + label_bytes - 1) as u64,
                message: format!("label byte {label} out of range 0..{classes}"),
            });
        }
        labels.push(label);
        for &b in &bytes[base + label_bytes..base + record] {
            data.push(b as f32 / 255.0);
        }
    }
    Ok(Dataset {
        samples: Tensor::new(&[count, 3, 32, 32], data).expect("record arithmetic"),
        labels,
        classes,
        split,
        stats: None,
    })
}

/// Load the standard CIFAR-10 directory layout (five train batches plus
/// test_batch) and channel-normalize both splits with train statistics.
pub fn load_cifar10_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let names = [
        "data_batch_1.bin",
        "data_batch_2.bin",
        "data_batch_3.bin",
        "data_batch_4.bin",
        "data_batch_5.bin",
    ];
    let mut parts = Vec::new();
    for n in names {
        parts.push(load_cifar10_binary(&dir.join(n))?);
    }
    let mut train = concat_datasets(parts);
    let mut test = load_cifar10_binary(&dir.join("test_batch.bin"))?;
    test.split = Split::Test;
    let stats = channel_stats(&train);
    apply_stats(&mut train, &stats);
    apply_stats(&mut test, &stats);
    Ok((train, test))
}

/// CIFAR-100 directory layout: train.bin and test.bin.
pub fn load_cifar100_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train = load_cifar100_binary(&dir.join("train.bin"))?;
    let mut test = load_cifar100_binary(&dir.join("test.bin"))?;
    test.split = Split::Test;
    let stats = channel_stats(&train);
    apply_stats(&mut train, &stats);
    apply_stats(&mut test, &stats);
    Ok((train, test))
}

fn concat_datasets(parts: Vec<Dataset>) -> Dataset {
    let classes = parts[0].classes;
    let mut shape = parts[0].samples.shape().to_vec();
    shape[0] = parts.iter().map(|d| d.len()).sum();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        data.extend_from_slice(p.samples.data());
        labels.extend(p.labels);
    }
    Dataset {
        samples: Tensor::new(&shape, data).expect("concat arithmetic"),
        labels,
        classes,
        split: Split::Train,
        stats: None,
    }
}

/// Per-channel mean and population standard deviation over all samples and
/// pixels.
pub fn channel_stats(ds: &Dataset) -> ChannelStats {
    let shape = ds.samples.shape();
    let (m, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product::<usize>().max(1);
    let count = (m * spatial) as f64;
    let mut mean = vec![0.0f64; c];
    let data = ds.samples.data();
    for i in 0..m {
        for ch in 0..c {
            let off = (i * c + ch) * spatial;
            for s in 0..spatial {
                mean[ch] += data[off + s] as f64;
            }
        }
    }
    for v in mean.iter_mut() {
        *v /= count;
    }
    let mut var = vec![0.0f64; c];
    for i in 0..m {
        for ch in 0..c {
            let off = (i * c + ch) * spatial;
            for s in 0..spatial {
                let d = data[off + s] as f64 - mean[ch];
                var[ch] += d * d;
            }
        }
    }
    ChannelStats {
        mean: mean.iter().map(|&v| v as f32).collect(),
        std: var.iter().map(|&v| (v / count).sqrt() as f32).collect(),
    }
}

fn apply_stats(ds: &mut Dataset, stats: &ChannelStats) {
    let shape = ds.samples.shape().to_vec();
    let (m, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product::<usize>().max(1);
    let data = ds.samples.data_mut();
    for i in 0..m {
        for ch in 0..c {
            let off = (i * c + ch) * spatial;
            let (mu, sd) = (stats.mean[ch], stats.std[ch].max(1e-8));
            for s in 0..spatial {
                data[off + s] = (data[off + s] - mu) / sd;
            }
        }
    }
    ds.stats = Some(stats.clone());
}

// ---------------------------------------------------------------------------
// Procedural Gaussian mixture
// ---------------------------------------------------------------------------

/// Gaussian blobs with unit isotropic noise. Class means sit at
/// `separation / sqrt(2)` along distinct coordinate axes (pairwise distance
/// `separation`); classes beyond the dimension count fall back to seeded
/// random directions on the sphere. Samples are interleaved round-robin over
/// classes, deterministic in `seed`.
pub fn synth_gaussians(
    classes: usize,
    dims: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = separation / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|cls| {
            let mut m = vec![0.0f64; dims];
            if cls < dims {
                m[cls] = scale;
            } else {
                let mut norm = 0.0;
                for v in m.iter_mut() {
                    *v = rng.sample::<f64, _>(StandardNormal);
                    norm += *v * *v;
                }
                let norm = norm.sqrt().max(1e-12);
                for v in m.iter_mut() {
                    *v *= scale / norm;
                }
            }
            m
        })
        .collect();
    let total = classes * per_class;
    let mut data = Vec::with_capacity(total * dims);
    let mut labels = Vec::with_capacity(total);
    for _ in 0..per_class {
        for (cls, mean) in means.iter().enumerate() {
            for mu in mean.iter() {
                let noise: f64 = rng.sample(StandardNormal);
                data.push((mu + noise) as f32);
            }
            labels.push(cls);
        }
    }
    Dataset {
        samples: Tensor::new(&[total, dims], data).expect("synth arithmetic"),
        labels,
        classes,
        split: Split::Train,
        stats: None,
    }
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

fn default_flip() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Zero padding in pixels on each side.
    pub pad: usize,
    /// Output crop extent (square).
    pub crop: usize,
    #[serde(default = "default_flip")]
    pub flip_prob: f64,
}

/// Per-sample independent pad, random crop, and horizontal flip.
/// Deterministic under a fixed rng stream; never changes labels or counts.
pub fn augment(batch: &Tensor<f32>, policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    let shape = batch.shape();
    if shape.len() != 4 {
        return Err(Error::Config(format!(
            "augmentation needs image batches [n, c, h, w], got shape {shape:?}"
        )));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (ph, pw) = (h + 2 * policy.pad, w + 2 * policy.pad);
    let crop = policy.crop;
    if crop > ph || crop > pw {
        return Err(Error::Config(format!(
            "crop {crop} larger than padded extent {ph}x{pw}"
        )));
    }
    let mut out = Tensor::zeros(&[n, c, crop, crop]);
    for i in 0..n {
        let dy = rng.gen_range(0..=ph - crop);
        let dx = rng.gen_range(0..=pw - crop);
        let flip = rng.gen::<f64>() < policy.flip_prob;
        for ch in 0..c {
            for y in 0..crop {
                for x in 0..crop {
                    // position in the padded image, then back into the source
                    let sy = (y + dy) as isize - policy.pad as isize;
                    let sx_raw = (x + dx) as isize - policy.pad as isize;
                    let sx = if flip { w as isize - 1 - sx_raw } else { sx_raw };
                    let v = if sy >= 0 && (sy as usize) < h && sx >= 0 && (sx as usize) < w {
                        batch.data()[((i * c + ch) * h + sy as usize) * w + sx as usize]
                    } else {
                        0.0
                    };
                    out.data_mut()[((i * c + ch) * crop + y) * crop + x] = v;
                }
            }
        }
    }
    Ok(out)
}
