//! In-memory image classification datasets: the CIFAR-10 binary format and
//! seeded synthetic blobs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

fn default_noise() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    /// A CIFAR-10 binary file, or a directory holding `data_batch_*.bin` and
    /// `test_batch.bin`. `limit` keeps only the first records.
    Cifar10Binary {
        path: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
    /// `n` images of size 3×dim×dim per split, each a noisy, jittered copy of
    /// one of `classes` random smooth prototypes.
    SyntheticBlobs {
        classes: usize,
        dim: usize,
        n: usize,
        seed: u64,
        #[serde(default = "default_noise")]
        noise: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHandle {
    pub source: DatasetSource,
    pub split: Split,
}

impl DatasetHandle {
    pub fn blobs(classes: usize, dim: usize, n: usize, seed: u64, split: Split) -> Self {
        DatasetHandle {
            source: DatasetSource::SyntheticBlobs {
                classes,
                dim,
                n,
                seed,
                noise: default_noise(),
            },
            split,
        }
    }

    pub fn with_split(&self, split: Split) -> Self {
        DatasetHandle {
            source: self.source.clone(),
            split,
        }
    }
}

/// Images stored N×C×H×W, already normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub shape: [usize; 3],
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let per = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("index {i} beyond dataset of {}", self.len())));
            }
            data.extend_from_slice(&self.images[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.shape;
        Ok((Tensor::from_vec(vec![indices.len(), c, h, w], data)?, labels))
    }

    /// Shuffled index order for `epoch`, a pure function of (seed, epoch).
    pub fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Keeps the first `n` examples.
    pub fn truncate(&mut self, n: usize) {
        let n = n.min(self.len());
        self.labels.truncate(n);
        self.images.truncate(n * self.image_len());
    }
}

/// Parses CIFAR-10 binary records and normalizes with the dataset constants.
/// `base_offset` is added to reported byte offsets.
pub fn parse_cifar10(bytes: &[u8], base_offset: u64) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let full = bytes.len() / CIFAR_RECORD;
        return Err(Error::Format {
            offset: base_offset + (full * CIFAR_RECORD) as u64,
            detail: format!(
                "truncated record: {} trailing bytes, records are {CIFAR_RECORD} bytes",
                bytes.len() % CIFAR_RECORD
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::Format {
                offset: base_offset + (r * CIFAR_RECORD) as u64,
                detail: format!("label byte {label} is not a CIFAR-10 class"),
            });
        }
        labels.push(label);
        for (c, plane) in rec[1..].chunks_exact(1024).enumerate() {
            images.extend(
                plane
                    .iter()
                    .map(|&p| (p as f32 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]),
            );
        }
    }
    Ok(Dataset {
        images,
        labels,
        shape: [3, 32, 32],
        classes: 10,
    })
}

fn cifar_files(path: &Path, split: Split) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|i| path.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![path.join("test_batch.bin")],
    };
    let present: Vec<PathBuf> = files.into_iter().filter(|p| p.is_file()).collect();
    if present.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no CIFAR-10 {split:?} batches under {}",
            path.display()
        )));
    }
    Ok(present)
}

fn blob_prototypes(classes: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = dim * dim;
    (0..classes)
        .map(|_| {
            let mut img = vec![0.0f32; 3 * plane];
            for c in 0..3 {
                for _ in 0..3 {
                    let cy = rng.gen_range(0.0..dim as f64);
                    let cx = rng.gen_range(0.0..dim as f64);
                    let sigma = rng.gen_range(0.08..0.2) * dim as f64;
                    let amp = rng.gen_range(-1.5..1.5);
                    for y in 0..dim {
                        for x in 0..dim {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            img[c * plane + y * dim + x] += (amp * (-d2 / (2.0 * sigma * sigma)).exp()) as f32;
                        }
                    }
                }
            }
            img
        })
        .collect()
}

/// Seeded synthetic blobs; prototypes depend on `seed` only, samples on the split too.
pub fn synthetic_blobs(classes: usize, dim: usize, n: usize, seed: u64, noise: f64, split: Split) -> Result<Dataset> {
    if classes < 2 || dim == 0 || n == 0 {
        return Err(Error::InvalidArgument(
            "synthetic blobs need ≥ 2 classes and positive size".into(),
        ));
    }
    let protos = blob_prototypes(classes, dim, seed);
    let split_salt = match split {
        Split::Train => 0x5eed_0001,
        Split::Test => 0x5eed_0002,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ split_salt);
    let plane = dim * dim;
    let max_shift = (dim / 8) as i64;
    let mut images = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let proto = &protos[label];
        let dy = rng.gen_range(-max_shift..=max_shift);
        let dx = rng.gen_range(-max_shift..=max_shift);
        let gain: f32 = rng.gen_range(0.6..1.4);
        for c in 0..3 {
            for y in 0..dim {
                for x in 0..dim {
                    let sy = (y as i64 - dy).rem_euclid(dim as i64) as usize;
                    let sx = (x as i64 - dx).rem_euclid(dim as i64) as usize;
                    let z: f64 = StandardNormal.sample(&mut rng);
                    images.push(gain * proto[c * plane + sy * dim + sx] + (noise * z) as f32);
                }
            }
        }
        labels.push(label);
    }
    Ok(Dataset {
        images,
        labels,
        shape: [3, dim, dim],
        classes,
    })
}

pub fn load_dataset(handle: &DatasetHandle) -> Result<Dataset> {
    match &handle.source {
        DatasetSource::Cifar10Binary { path, limit } => {
            let mut all: Option<Dataset> = None;
            for file in cifar_files(path, handle.split)? {
                let bytes = fs::read(&file)?;
                let part = parse_cifar10(&bytes, 0).map_err(|e| match e {
                    Error::Format { offset, detail } => Error::Format {
                        offset,
                        detail: format!("{}: {detail}", file.display()),
                    },
                    other => other,
                })?;
                match &mut all {
                    None => all = Some(part),
                    Some(d) => {
                        d.images.extend(part.images);
                        d.labels.extend(part.labels);
                    }
                }
                if let (Some(l), Some(d)) = (limit, &all) {
                    if d.len() >= *l {
                        break;
                    }
                }
            }
            let mut d = all.expect("at least one file");
            if let Some(l) = limit {
                d.truncate(*l);
            }
            Ok(d)
        }
        DatasetSource::SyntheticBlobs {
            classes,
            dim,
            n,
            seed,
            noise,
        } => synthetic_blobs(*classes, *dim, *n, *seed, *noise, handle.split),
    }
}
