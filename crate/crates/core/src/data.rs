//! CIFAR-10 binary ingestion, subset sampling and a synthetic stand-in set.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::batch::ImageBatch;
use crate::error::{Error, Result};

pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_SIZE: usize = 32;
const IMAGE_BYTES: usize = 3 * CIFAR_SIZE * CIFAR_SIZE;
const RECORD_BYTES: usize = 1 + IMAGE_BYTES;

pub const CIFAR10_LABELS: [&str; 10] = [
    "airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn files(self) -> Vec<&'static str> {
        match self {
            Split::Train => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            Split::Test => vec!["test_batch.bin"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// Directory holding the binary batch files, or its parent.
    pub path: PathBuf,
    pub split: Split,
    /// Number of samples to keep; `None` keeps the whole split.
    pub subset: Option<usize>,
    pub balanced: bool,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(path: impl Into<PathBuf>, split: Split) -> Self {
        Self {
            path: path.into(),
            split,
            subset: None,
            balanced: true,
            seed: 0,
        }
    }

    pub fn with_subset(mut self, size: usize, seed: u64) -> Self {
        self.subset = Some(size);
        self.seed = seed;
        self
    }

    fn resolve_dir(&self) -> PathBuf {
        let nested = self.path.join("cifar-10-batches-bin");
        if nested.is_dir() {
            nested
        } else {
            self.path.clone()
        }
    }
}

/// Parse CIFAR-10 binary records: one label byte followed by 3072 channel-planar
/// pixel bytes.
pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<ImageBatch> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::Dataset {
            path: path.to_path_buf(),
            reason: format!(
                "length {} is not a multiple of the {RECORD_BYTES}-byte record size (truncated?)",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut data = Vec::with_capacity(n * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(n);
    for (i, record) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = record[0];
        if usize::from(label) >= CIFAR_CLASSES {
            return Err(Error::Dataset {
                path: path.to_path_buf(),
                reason: format!("record {i} has label byte {label}"),
            });
        }
        labels.push(label);
        data.extend(record[1..].iter().map(|&b| f32::from(b) / 255.0));
    }
    let data = Array4::from_shape_vec((n, 3, CIFAR_SIZE, CIFAR_SIZE), data)
        .map_err(|e| Error::Npy(e.to_string()))?;
    ImageBatch::new(data, labels)
}

pub fn load_cifar10_file(path: &Path) -> Result<ImageBatch> {
    let bytes = fs::read(path).map_err(|e| Error::Dataset {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    parse_cifar10(&bytes, path)
}

/// Write a batch in the CIFAR-10 binary layout, rounding intensities to bytes.
pub fn write_cifar10_file(path: &Path, batch: &ImageBatch) -> Result<()> {
    if batch.data.shape()[1..] != [3, CIFAR_SIZE, CIFAR_SIZE] {
        return Err(Error::shape("cifar-10 record", &[3, CIFAR_SIZE, CIFAR_SIZE], &batch.data.shape()[1..]));
    }
    let mut out = Vec::with_capacity(batch.len() * RECORD_BYTES);
    for i in 0..batch.len() {
        out.push(batch.labels[i]);
        out.extend(batch.image(i).iter().map(|&v| (v * 255.0).round() as u8));
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Load a split, then draw the requested subset.
pub fn load_cifar10(spec: &DatasetSpec) -> Result<ImageBatch> {
    let dir = spec.resolve_dir();
    let mut parts = Vec::new();
    for name in spec.split.files() {
        let path = dir.join(name);
        if !path.exists() {
            return Err(Error::Dataset {
                path,
                reason: "file not found".into(),
            });
        }
        parts.push(load_cifar10_file(&path)?);
    }
    let all = concat(&parts)?;
    match spec.subset {
        Some(size) => subset(&all, size, spec.balanced, spec.seed),
        None => Ok(all),
    }
}

pub fn concat(parts: &[ImageBatch]) -> Result<ImageBatch> {
    let views: Vec<_> = parts.iter().map(|p| p.data.view()).collect();
    let data = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Config(e.to_string()))?;
    let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
    ImageBatch::new(data, labels)
}

/// Seeded subset. Balanced subsets take `size / classes` samples of every
/// class, and one extra for the first `size % classes` classes, so class
/// counts differ by at most one. The result is shuffled.
pub fn subset(batch: &ImageBatch, size: usize, balanced: bool, seed: u64) -> Result<ImageBatch> {
    if size > batch.len() {
        return Err(Error::Config(format!("subset of {size} requested from {} samples", batch.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = if balanced {
        let classes = usize::from(batch.labels.iter().copied().max().unwrap_or(0)) + 1;
        let mut out = Vec::with_capacity(size);
        for c in 0..classes {
            let per = size / classes + usize::from(c < size % classes);
            let mut idx: Vec<usize> = (0..batch.len()).filter(|&i| usize::from(batch.labels[i]) == c).collect();
            if idx.len() < per {
                return Err(Error::Config(format!("class {c} has {} samples, {per} needed", idx.len())));
            }
            idx.shuffle(&mut rng);
            out.extend_from_slice(&idx[..per]);
        }
        out
    } else {
        let mut idx: Vec<usize> = (0..batch.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(size);
        idx
    };
    chosen.shuffle(&mut rng);
    Ok(batch.select(&chosen))
}

/// Seeded permutation of a batch, for epoch shuffling.
pub fn shuffled(batch: &ImageBatch, seed: u64) -> ImageBatch {
    let mut idx: Vec<usize> = (0..batch.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    batch.select(&idx)
}

/// A learnable synthetic stand-in for CIFAR-10 when the real files are
/// absent: each class is a fixed smooth random template plus pixel noise.
/// Classes cycle so every prefix of length `k * classes` is balanced. The
/// templates depend on `seed`, so draw train and test splits from one call.
pub fn synthetic(n: usize, classes: usize, size: usize, seed: u64) -> Result<ImageBatch> {
    if classes == 0 || classes > 256 {
        return Err(Error::Config(format!("synthetic set needs 1..=256 classes, got {classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0f32, 1.0).expect("valid normal");
    // templates: sums of a few low-frequency cosines per channel
    let mut templates = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut t = vec![0f32; 3 * size * size];
        for ch in 0..3 {
            for _ in 0..3 {
                let (a, fx, fy, ph) = (
                    unit.sample(&mut rng) * 0.12,
                    (rand::Rng::random_range(&mut rng, 0..3)) as f32,
                    (rand::Rng::random_range(&mut rng, 0..3)) as f32,
                    rand::Rng::random::<f32>(&mut rng) * std::f32::consts::TAU,
                );
                for y in 0..size {
                    for x in 0..size {
                        let arg = std::f32::consts::TAU * (fx * x as f32 + fy * y as f32) / size as f32 + ph;
                        t[(ch * size + y) * size + x] += a * arg.cos();
                    }
                }
            }
        }
        templates.push(t);
    }
    let noise = Normal::new(0.0f32, 0.08).expect("valid normal");
    let mut data = Vec::with_capacity(n * 3 * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c as u8);
        data.extend(templates[c].iter().map(|v| (0.5 + v + noise.sample(&mut rng)).clamp(0.0, 1.0)));
    }
    let data = Array4::from_shape_vec((n, 3, size, size), data).map_err(|e| Error::Config(e.to_string()))?;
    ImageBatch::new(data, labels)
}

/// Write a synthetic set under `dir` in the CIFAR-10 file layout: the train
/// split spread over the five train batch files, plus one test file.
pub fn write_synthetic_cifar10(dir: &Path, train: usize, test: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let all = synthetic(train + test, CIFAR_CLASSES, CIFAR_SIZE, seed)?;
    let per = train.div_ceil(5);
    for (k, name) in Split::Train.files().into_iter().enumerate() {
        write_cifar10_file(&dir.join(name), &all.slice(k * per, per.min(train.saturating_sub(k * per))))?;
    }
    write_cifar10_file(&dir.join("test_batch.bin"), &all.slice(train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![fill; RECORD_BYTES];
        r[0] = label;
        r
    }

    #[test]
    fn record_decoding() {
        let mut bytes = record(0, 0);
        bytes.extend(record(9, 255));
        let b = parse_cifar10(&bytes, Path::new("mem")).unwrap();
        assert_eq!(b.labels, vec![0, 9]);
        assert!(b.image(0).iter().all(|&v| v == 0.0));
        assert!(b.image(1).iter().all(|&v| v == 1.0));
        // channel-planar, row-major
        let mut r = record(3, 0);
        r[1 + 1024 + 32 + 5] = 51;
        let b = parse_cifar10(&r, Path::new("mem")).unwrap();
        assert_eq!(b.data[[0, 1, 1, 5]], 0.2);
    }

    #[test]
    fn malformed_records() {
        let bad_label = record(10, 0);
        assert!(matches!(parse_cifar10(&bad_label, Path::new("x")), Err(Error::Dataset { .. })));
        let truncated = &record(1, 0)[..RECORD_BYTES - 1];
        assert!(matches!(parse_cifar10(truncated, Path::new("x")), Err(Error::Dataset { .. })));
    }

    #[test]
    fn balanced_subset_counts() {
        let b = synthetic(2000, 10, 4, 1).unwrap();
        let s = subset(&b, 1000, true, 7).unwrap();
        for c in 0..10u8 {
            assert_eq!(s.labels.iter().filter(|&&l| l == c).count(), 100);
        }
        assert_eq!(subset(&b, 1000, true, 7).unwrap(), s);
        let odd = subset(&b, 1003, true, 7).unwrap();
        let counts: Vec<usize> = (0..10u8).map(|c| odd.labels.iter().filter(|&&l| l == c).count()).collect();
        assert_eq!(counts, vec![101, 101, 101, 100, 100, 100, 100, 100, 100, 100]);
        let small = synthetic(30, 10, 4, 1).unwrap();
        assert!(subset(&small, 30, true, 0).is_ok());
        // class 0 reduced to one sample
        let skewed = small.select(&(0..30).filter(|&i| i != 10 && i != 20).collect::<Vec<_>>());
        assert!(subset(&skewed, 28, true, 0).is_err());
        assert!(subset(&b, 3000, false, 7).is_err());
        assert_eq!(subset(&b, 33, false, 7).unwrap().len(), 33);
    }

    #[test]
    fn file_round_trip_and_split_loading() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_cifar10(dir.path(), 100, 20, 3).unwrap();
        let train = load_cifar10(&DatasetSpec::new(dir.path(), Split::Train)).unwrap();
        assert_eq!(train.len(), 100);
        let test = load_cifar10(&DatasetSpec::new(dir.path(), Split::Test).with_subset(10, 1)).unwrap();
        assert_eq!(test.len(), 10);
        // bytes survive a second write/read exactly
        let path = dir.path().join("again.bin");
        write_cifar10_file(&path, &test).unwrap();
        assert_eq!(load_cifar10_file(&path).unwrap(), test);
        let missing = DatasetSpec::new(dir.path().join("nope"), Split::Test);
        assert!(matches!(load_cifar10(&missing), Err(Error::Dataset { .. })));
    }
}
