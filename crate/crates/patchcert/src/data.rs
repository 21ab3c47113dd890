//! Dataset ingestion: MNIST IDX files and CIFAR-10 binary batches.
//!
//! Pixels are scaled to [0, 1] by /255 and kept in `[count, channels, h, w]`
//! channel-planar layout. Loading is deterministic and order-stable; any
//! shuffling happens in training under its own seed.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fmt;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" => Ok(DatasetKind::Cifar10),
            other => Err(Error::Config(format!("unknown dataset '{other}'"))),
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            DatasetKind::Mnist => 1,
            DatasetKind::Cifar10 => 3,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            DatasetKind::Mnist => (28, 28),
            DatasetKind::Cifar10 => (32, 32),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub kind: DatasetKind,
    pub split: Split,
    /// FNV-1a hash of the first image's raw bytes, logged for reproducibility.
    pub first_image_checksum: u32,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label_count(&self) -> usize {
        10
    }

    /// The first `n` examples (dataset order).
    pub fn take(&self, n: usize) -> Result<(Tensor, Vec<usize>)> {
        let n = n.min(self.len());
        if n == 0 {
            return Err(Error::Config("empty dataset slice".into()));
        }
        let per: usize = self.images.shape()[1..].iter().product();
        let mut shape = vec![n];
        shape.extend_from_slice(&self.images.shape()[1..]);
        Ok((
            Tensor::from_vec(shape, self.images.data()[..n * per].to_vec())?,
            self.labels[..n].to_vec(),
        ))
    }

    /// A deterministic pseudorandom sample of `n` examples.
    pub fn sample(&self, n: usize, seed: u64) -> Result<(Tensor, Vec<usize>)> {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let n = n.min(self.len());
        if n == 0 {
            return Err(Error::Config("empty dataset sample".into()));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(n);
        let per: usize = self.images.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(n * per);
        let mut labels = Vec::with_capacity(n);
        for &i in &idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&self.images.shape()[1..]);
        Ok((Tensor::from_vec(shape, data)?, labels))
    }
}

fn fnv1a(bytes: &[u8]) -> u32 {
    let mut h = 0x811c_9dc5u32;
    for &b in bytes {
        h ^= u32::from(b);
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

fn format_err(path: &Path, detail: impl Into<String>, offset: u64) -> Error {
    Error::Format {
        path: path.display().to_string(),
        detail: detail.into(),
        offset,
    }
}

fn read_exact_at(file: &mut File, buf: &mut [u8], path: &Path, offset: &mut u64) -> Result<()> {
    file.read_exact(buf)
        .map_err(|e| format_err(path, format!("truncated read ({e})"), *offset))?;
    *offset += buf.len() as u64;
    Ok(())
}

fn read_u32_be(file: &mut File, path: &Path, offset: &mut u64) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact_at(file, &mut buf, path, offset)?;
    Ok(u32::from_be_bytes(buf))
}

/// Parses one IDX image file (magic 2051) into raw bytes.
fn load_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let mut file = File::open(path)?;
    let mut offset = 0u64;
    let magic = read_u32_be(&mut file, path, &mut offset)?;
    if magic != 2051 {
        return Err(format_err(path, format!("bad image magic {magic}, want 2051"), 0));
    }
    let count = read_u32_be(&mut file, path, &mut offset)? as usize;
    let rows = read_u32_be(&mut file, path, &mut offset)? as usize;
    let cols = read_u32_be(&mut file, path, &mut offset)? as usize;
    let mut data = vec![0u8; count * rows * cols];
    read_exact_at(&mut file, &mut data, path, &mut offset)?;
    Ok((data, count, rows, cols))
}

/// Parses one IDX label file (magic 2049).
fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut file = File::open(path)?;
    let mut offset = 0u64;
    let magic = read_u32_be(&mut file, path, &mut offset)?;
    if magic != 2049 {
        return Err(format_err(path, format!("bad label magic {magic}, want 2049"), 0));
    }
    let count = read_u32_be(&mut file, path, &mut offset)? as usize;
    let mut data = vec![0u8; count];
    read_exact_at(&mut file, &mut data, path, &mut offset)?;
    Ok(data)
}

fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let image_path = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let label_path = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let (bytes, count, rows, cols) = load_idx_images(&image_path)?;
    let labels_raw = load_idx_labels(&label_path)?;
    if labels_raw.len() != count {
        return Err(format_err(
            &label_path,
            format!("{} labels for {count} images", labels_raw.len()),
            8,
        ));
    }
    let per = rows * cols;
    let checksum = fnv1a(&bytes[..per.min(bytes.len())]);
    let images = Tensor::from_vec(
        vec![count, 1, rows, cols],
        bytes.iter().map(|&b| f32::from(b) / 255.0).collect(),
    )?;
    let labels = labels_raw
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if l > 9 {
                Err(format_err(&label_path, format!("label {l} out of range"), 8 + i as u64))
            } else {
                Ok(l as usize)
            }
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        images,
        labels,
        kind: DatasetKind::Mnist,
        split,
        first_image_checksum: checksum,
    })
}

/// CIFAR-10 binary record: 1 label byte + 3072 channel-planar pixel bytes.
pub const CIFAR_RECORD: usize = 3073;

fn load_cifar_file(path: &Path, images: &mut Vec<f32>, labels: &mut Vec<usize>) -> Result<u32> {
    let mut file = File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(format_err(
            path,
            format!("file size {} is not a multiple of {CIFAR_RECORD}-byte records", bytes.len()),
            (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
        ));
    }
    let mut first_checksum = 0;
    for (i, record) in bytes.chunks(CIFAR_RECORD).enumerate() {
        let label = record[0];
        if label > 9 {
            return Err(format_err(
                path,
                format!("label {label} out of range"),
                (i * CIFAR_RECORD) as u64,
            ));
        }
        if i == 0 {
            first_checksum = fnv1a(&record[1..]);
        }
        labels.push(label as usize);
        images.extend(record[1..].iter().map(|&b| f32::from(b) / 255.0));
    }
    Ok(first_checksum)
}

fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5)
            .map(|i| dir.join(format!("data_batch_{i}.bin")))
            .collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut checksum = 0;
    for (i, f) in files.iter().enumerate() {
        let c = load_cifar_file(f, &mut images, &mut labels)?;
        if i == 0 {
            checksum = c;
        }
    }
    let count = labels.len();
    Ok(Dataset {
        images: Tensor::from_vec(vec![count, 3, 32, 32], images)?,
        labels,
        kind: DatasetKind::Cifar10,
        split,
        first_image_checksum: checksum,
    })
}

/// Loads a dataset split from `path` (the directory holding the standard
/// files: `train-images-idx3-ubyte` etc. for MNIST, `data_batch_*.bin` /
/// `test_batch.bin` for CIFAR-10).
pub fn load_dataset(kind: DatasetKind, path: &Path, split: Split) -> Result<Dataset> {
    match kind {
        DatasetKind::Mnist => load_mnist(path, split),
        DatasetKind::Cifar10 => load_cifar10(path, split),
    }
}
