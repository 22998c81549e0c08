//! Image datasets: a seeded synthetic generator and the CIFAR-10 binary
//! format.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_RECORD_BYTES: usize = 1 + CIFAR_SIDE * CIFAR_SIDE * CIFAR_CHANNELS;

/// Images in `[H, W, C]` layout with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    side: usize,
    channels: usize,
    pixels: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(side: usize, channels: usize, pixels: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if pixels.len() != labels.len() * side * side * channels {
            return Err(Error::Shape(format!(
                "{} pixels for {} images of {side}x{side}x{channels}",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(Self { side, channels, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    fn image_len(&self) -> usize {
        self.side * self.side * self.channels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// `[B, H, W, C]` batch and labels for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index(format!("sample {i} of {}", self.len())));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let shape = vec![indices.len(), self.side, self.side, self.channels];
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// Reorders samples; `order` must be a permutation of `0..len`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        if order.len() != self.len() || order.iter().any(|&i| i >= self.len() || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::Contract("not a permutation of the dataset".into()));
        }
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for &i in order {
            pixels.extend_from_slice(self.image(i));
        }
        let labels = order.iter().map(|&i| self.labels[i]).collect();
        Ok(Self { side: self.side, channels: self.channels, pixels, labels })
    }

    pub fn truncated(mut self, n: usize) -> Self {
        if n < self.len() {
            self.labels.truncate(n);
            self.pixels.truncate(n * self.image_len());
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Per-class mean image plus isotropic Gaussian pixel noise.
    Synthetic { noise: f64 },
    /// Directory holding `data_batch_*.bin` and `test_batch.bin`.
    CifarBinary { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Number of samples; for CIFAR, 0 keeps every record.
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn synthetic(num_classes: usize, train_size: usize, test_size: usize, noise: f64, seed: u64) -> Self {
        Self {
            source: DataSource::Synthetic { noise },
            num_classes,
            image_size: CIFAR_SIDE,
            channels: CIFAR_CHANNELS,
            train_size,
            test_size,
            seed,
        }
    }

    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match &self.source {
            DataSource::Synthetic { .. } => synthetic_dataset(self),
            DataSource::CifarBinary { path } => load_cifar_binary(path, self),
        }
    }
}

/// Class-conditional synthetic images. Each class gets a mean image with
/// pixels uniform in `[0.2, 0.8]`; samples add `N(0, noise²)` per pixel and
/// clamp to `[0, 1]`. Labels cycle through the classes so every class is
/// equally represented. Train and test share the class means.
pub fn synthetic_dataset(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    let DataSource::Synthetic { noise } = spec.source else {
        return Err(Error::Config("synthetic_dataset called with a file source".into()));
    };
    if spec.num_classes == 0 || spec.image_size == 0 || spec.channels == 0 {
        return Err(Error::Config("synthetic dataset needs positive classes and dims".into()));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::Config(format!("data.noise must be >= 0, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let image_len = spec.image_size * spec.image_size * spec.channels;
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| (0..image_len).map(|_| rng.gen_range(0.2..0.8)).collect())
        .collect();
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let sample = |count: usize, rng: &mut ChaCha8Rng| {
        let mut pixels = Vec::with_capacity(count * image_len);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let label = i % spec.num_classes;
            labels.push(label);
            for &m in &means[label] {
                let z: f64 = gauss.sample(rng);
                pixels.push((m + noise * z).clamp(0.0, 1.0));
            }
        }
        Dataset::new(spec.image_size, spec.channels, pixels, labels)
    };
    let train = sample(spec.train_size, &mut rng)?;
    let test = sample(spec.test_size, &mut rng)?;
    Ok((train, test))
}

/// Parses CIFAR-10 binary records: one label byte followed by 1024 red,
/// 1024 green and 1024 blue bytes, each plane row-major 32×32.
pub fn parse_cifar_records(bytes: &[u8], num_classes: usize) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(Error::Format(format!(
            "{} bytes is not a multiple of the {CIFAR_RECORD_BYTES}-byte record size",
            bytes.len()
        )));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let count = bytes.len() / CIFAR_RECORD_BYTES;
    let mut pixels = Vec::with_capacity(count * plane * CIFAR_CHANNELS);
    let mut labels = Vec::with_capacity(count);
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = record[0] as usize;
        if label >= num_classes {
            return Err(Error::Format(format!(
                "record {i} has label {label}, dataset has {num_classes} classes"
            )));
        }
        labels.push(label);
        let body = &record[1..];
        for p in 0..plane {
            for c in 0..CIFAR_CHANNELS {
                pixels.push(body[c * plane + p] as f64 / 255.0);
            }
        }
    }
    Dataset::new(CIFAR_SIDE, CIFAR_CHANNELS, pixels, labels)
}

fn read_records(files: &[PathBuf], num_classes: usize) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for f in files {
        let chunk = fs::read(f)?;
        if chunk.len() % CIFAR_RECORD_BYTES != 0 {
            return Err(Error::Format(format!(
                "{}: length {} is not a multiple of {CIFAR_RECORD_BYTES}",
                f.display(),
                chunk.len()
            )));
        }
        bytes.extend_from_slice(&chunk);
    }
    parse_cifar_records(&bytes, num_classes)
}

/// Loads `data_batch_1.bin`..`data_batch_5.bin` (those present, at least
/// one) as the training split and `test_batch.bin` as the test split.
pub fn load_cifar_binary(dir: &Path, spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    if spec.image_size != CIFAR_SIDE || spec.channels != CIFAR_CHANNELS {
        return Err(Error::Config(format!(
            "CIFAR images are {CIFAR_SIDE}x{CIFAR_SIDE}x{CIFAR_CHANNELS}, config wants {}x{}x{}",
            spec.image_size, spec.image_size, spec.channels
        )));
    }
    let train_files: Vec<PathBuf> = (1..=5)
        .map(|i| dir.join(format!("data_batch_{i}.bin")))
        .filter(|p| p.exists())
        .collect();
    if train_files.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no data_batch_*.bin in {}", dir.display()),
        )));
    }
    let train = read_records(&train_files, spec.num_classes)?;
    let test = read_records(&[dir.join("test_batch.bin")], spec.num_classes)?;
    let limit = |d: Dataset, n: usize| if n == 0 { d } else { d.truncated(n) };
    Ok((limit(train, spec.train_size), limit(test, spec.test_size)))
}
