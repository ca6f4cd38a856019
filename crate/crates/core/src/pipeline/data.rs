use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel mean and standard deviation of `[0, 1]`-scaled pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn fit(images: &Tensor<f32>) -> Result<Self> {
        let s = images.shape();
        if s.n == 0 {
            return Err(Error::invalid("cannot fit standardization on an empty set"));
        }
        let count = (s.n * s.plane()) as f64;
        let mut mean = vec![0.0; s.c];
        let mut std = vec![0.0; s.c];
        for c in 0..s.c {
            let sum: f64 = (0..s.n)
                .flat_map(|n| images.plane(n, c).iter())
                .map(|&v| v as f64)
                .sum();
            let m = sum / count;
            let var: f64 = (0..s.n)
                .flat_map(|n| images.plane(n, c).iter())
                .map(|&v| (v as f64 - m).powi(2))
                .sum::<f64>()
                / count;
            mean[c] = m;
            std[c] = var.sqrt().max(1e-8);
        }
        Ok(Standardization { mean, std })
    }

    pub fn apply(&self, images: &mut Tensor<f32>) -> Result<()> {
        let s = images.shape();
        if s.c != self.mean.len() {
            return Err(Error::ChannelMismatch {
                op: "standardize",
                expected: self.mean.len(),
                actual: s.c,
            });
        }
        for n in 0..s.n {
            for c in 0..s.c {
                let (m, sd) = (self.mean[c], self.std[c]);
                for v in images.plane_mut(n, c) {
                    *v = ((*v as f64 - m) / sd) as f32;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.shape().n != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.shape().n,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s.c, s.h, s.w)
    }

    /// Gathers the listed examples into one batch.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let s = self.images.shape();
        let mut data = Vec::with_capacity(indices.len() * s.c * s.plane());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("example {i} out of range {}", self.len())));
            }
            data.extend(self.images.item(i).iter().map(|&v| T::of(v as f64)));
            labels.push(self.labels[i]);
        }
        Ok((Tensor::from_vec(Shape::new(indices.len(), s.c, s.h, s.w), data)?, labels))
    }

    /// The first `n` examples, or all when fewer exist.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&idx)?;
        Dataset::new(images, labels, self.num_classes, self.split)
    }
}

fn dataset_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Decodes one CIFAR binary file. Each record is `label_bytes` label
/// bytes (the last one is used) followed by 3072 pixel bytes, red plane
/// first, each plane 32x32 row-major. Pixels are scaled to `[0, 1]`.
pub fn read_cifar_file(path: &Path, label_bytes: usize, num_classes: usize) -> Result<(Vec<f32>, Vec<usize>)> {
    let bytes = fs::read(path).map_err(|e| dataset_err(path, e.to_string()))?;
    parse_cifar_records(&bytes, label_bytes, num_classes).map_err(|reason| dataset_err(path, reason))
}

pub fn parse_cifar_records(bytes: &[u8], label_bytes: usize, num_classes: usize) -> std::result::Result<(Vec<f32>, Vec<usize>), String> {
    let record = label_bytes + CIFAR_PIXELS;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(format!(
            "size {} is not a positive multiple of the {record}-byte record",
            bytes.len()
        ));
    }
    let n = bytes.len() / record;
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(record) {
        let label = rec[label_bytes - 1] as usize;
        if label >= num_classes {
            return Err(format!("label {label} outside [0, {num_classes})"));
        }
        labels.push(label);
        pixels.extend(rec[label_bytes..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

fn load_files(files: &[PathBuf], label_bytes: usize, classes: usize, split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let (p, l) = read_cifar_file(f, label_bytes, classes)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let n = labels.len();
    let images = Tensor::from_vec(Shape::new(n, 3, CIFAR_SIDE, CIFAR_SIDE), pixels)?;
    Dataset::new(images, labels, classes, split)
}

/// Accepts either the batch directory itself or its parent.
fn resolve_dir(dir: &Path, nested: &str, probe: &str) -> PathBuf {
    let inner = dir.join(nested);
    if !dir.join(probe).exists() && inner.join(probe).exists() {
        inner
    } else {
        dir.to_path_buf()
    }
}

fn standardize(mut train: Dataset, mut test: Dataset) -> Result<(Dataset, Dataset, Standardization)> {
    let stats = Standardization::fit(&train.images)?;
    stats.apply(&mut train.images)?;
    stats.apply(&mut test.images)?;
    Ok((train, test, stats))
}

/// CIFAR-10 binary batches, standardized with training-split statistics.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let dir = resolve_dir(dir, "cifar-10-batches-bin", "data_batch_1.bin");
    let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    let train = load_files(&train, 1, 10, Split::Train)?;
    let test = load_files(&[dir.join("test_batch.bin")], 1, 10, Split::Test)?;
    let (train, test, _) = standardize(train, test)?;
    Ok((train, test))
}

/// CIFAR-100 binary files with fine labels (two label bytes per record).
pub fn load_cifar100(dir: &Path) -> Result<(Dataset, Dataset)> {
    let dir = resolve_dir(dir, "cifar-100-binary", "train.bin");
    let train = load_files(&[dir.join("train.bin")], 2, 100, Split::Train)?;
    let test = load_files(&[dir.join("test.bin")], 2, 100, Split::Test)?;
    let (train, test, _) = standardize(train, test)?;
    Ok((train, test))
}

/// Class-conditional Gaussian images: each class has a fixed random
/// prototype and every example is its class prototype plus isotropic noise
/// of standard deviation 0.5. Labels cycle through the classes.
pub fn synth_dataset(n: usize, classes: usize, image: (usize, usize, usize), seed: u64) -> Result<Dataset> {
    if classes == 0 || n < classes {
        return Err(Error::invalid(format!("synthetic set needs n >= classes > 0, got n={n}, classes={classes}")));
    }
    let (c, h, w) = image;
    let per = c * h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::StandardNormal;
    let protos: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..per).map(|_| rng.sample::<f32, _>(normal)).collect())
        .collect();
    let mut data = Vec::with_capacity(n * per);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for &l in &labels {
        data.extend(protos[l].iter().map(|&p| p + 0.5 * rng.sample::<f32, _>(normal)));
    }
    Dataset::new(Tensor::from_vec(Shape::new(n, c, h, w), data)?, labels, classes, Split::Train)
}

/// Pads by 4 with zeros, takes a random crop of the original
/// size and flips horizontally with probability 1/2, per example.
pub fn augment<T: Real>(batch: &Tensor<T>, rng: &mut ChaCha8Rng) -> Tensor<T> {
    const PAD: isize = 4;
    let s = batch.shape();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        let dy = rng.gen_range(-PAD..=PAD);
        let dx = rng.gen_range(-PAD..=PAD);
        let flip = rng.gen_bool(0.5);
        for c in 0..s.c {
            let src = batch.plane(n, c).to_vec();
            let dst = out.plane_mut(n, c);
            for i in 0..s.h {
                let si = i as isize + dy;
                if si < 0 || si >= s.h as isize {
                    continue;
                }
                for j in 0..s.w {
                    let jj = if flip { s.w - 1 - j } else { j };
                    let sj = jj as isize + dx;
                    if sj < 0 || sj >= s.w as isize {
                        continue;
                    }
                    dst[i * s.w + j] = src[si as usize * s.w + sj as usize];
                }
            }
        }
    }
    out
}

/// Epoch-wise shuffled index stream.
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        BatchSampler {
            order,
            cursor: 0,
            rng,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size && !self.order.is_empty() {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, pixel: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend(std::iter::repeat(pixel).take(CIFAR_PIXELS));
        r
    }

    #[test]
    fn records_preserve_count_and_scale() {
        let mut bytes = record(3, 255);
        bytes.extend(record(7, 0));
        let (px, labels) = parse_cifar_records(&bytes, 1, 10).unwrap();
        assert_eq!(labels, [3, 7]);
        assert_eq!(px.len(), 2 * CIFAR_PIXELS);
        assert_eq!(px[0], 1.0);
        assert_eq!(px[CIFAR_PIXELS], 0.0);
    }

    #[test]
    fn truncated_records_rejected() {
        let mut bytes = record(1, 9);
        bytes.pop();
        assert!(parse_cifar_records(&bytes, 1, 10).is_err());
        assert!(parse_cifar_records(&record(12, 0), 1, 10).is_err());
    }

    #[test]
    fn cifar100_uses_fine_label() {
        let mut bytes = vec![2u8];
        bytes.extend(record(42, 128));
        let (_, labels) = parse_cifar_records(&bytes, 2, 100).unwrap();
        assert_eq!(labels, [42]);
    }

    #[test]
    fn load_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        for (i, name) in ["data_batch_1", "data_batch_2", "data_batch_3", "data_batch_4", "data_batch_5", "test_batch"]
            .iter()
            .enumerate()
        {
            let mut bytes = record(i as u8, 10 * i as u8);
            bytes.extend(record(0, 200));
            fs::write(dir.path().join(format!("{name}.bin")), bytes).unwrap();
        }
        let (train, test) = load_cifar10(dir.path()).unwrap();
        assert_eq!((train.len(), test.len()), (10, 2));
        assert_eq!(train.labels[0], 0);
        let stats = Standardization::fit(&train.images).unwrap();
        assert!(stats.mean.iter().all(|m| m.abs() < 1e-6));
        assert!(load_cifar10(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn synthetic_sets() {
        let a = synth_dataset(10, 10, (3, 8, 8), 1).unwrap();
        let mut l = a.labels.clone();
        l.sort();
        assert_eq!(l, (0..10).collect::<Vec<_>>());
        assert_eq!(a, synth_dataset(10, 10, (3, 8, 8), 1).unwrap());
        assert_ne!(a, synth_dataset(10, 10, (3, 8, 8), 2).unwrap());
        assert!(synth_dataset(5, 10, (3, 8, 8), 1).is_err());
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(10, 3);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch(2)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn augment_keeps_shape_and_values() {
        let x = Tensor::<f32>::randn(Shape::new(2, 3, 8, 8), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = augment(&x, &mut rng);
        assert_eq!(y.shape(), x.shape());
        let src: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
        assert!(y.data().iter().all(|v| *v == 0.0 || src.contains(&v.to_bits())));
    }
}
