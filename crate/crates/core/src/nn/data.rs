//! Image datasets: MNIST IDX files, CIFAR-10 binary batches, and a
//! synthetic separable set.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::spec::Dims;
use crate::rng::{Domain, ProbeSeed, SeqRng};
use crate::tensor::{ChannelTensor, ImageShape};

/// Images stored as `f64` in `[channel][pixel]` order, one after another.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dims: Dims,
    pub classes: usize,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dims: Dims, classes: usize, images: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != dims.len() * labels.len() {
            return Err(Error::Dataset(format!("{} values for {} images of {dims}", images.len(), labels.len())));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Dataset(format!("label {l} outside {classes} classes")));
        }
        Ok(Self { dims, classes, images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.dims.len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Batch tensor and labels for the given sample indices.
    pub fn batch(&self, idx: &[usize]) -> Result<(ChannelTensor, Vec<usize>)> {
        let shape = ImageShape::new(self.dims.height, self.dims.width)?;
        let mut data = Vec::with_capacity(idx.len() * self.dims.len());
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        let x = ChannelTensor::from_vec(shape, self.dims.channels, idx.len(), data)?;
        Ok((x, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    /// First `n` samples.
    pub fn truncate(mut self, n: usize) -> Self {
        let n = n.min(self.len());
        self.images.truncate(n * self.dims.len());
        self.labels.truncate(n);
        self
    }
}

fn open_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::Dataset(format!("cannot open {}: {e}", path.display())))?)
        .read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(b: &[u8], at: usize) -> Result<usize> {
    b.get(at..at + 4)
        .map(|s| u32::from_be_bytes([s[0], s[1], s[2], s[3]]) as usize)
        .ok_or_else(|| Error::Dataset("truncated IDX header".into()))
}

/// Parses an IDX image file (`0x00000803`): returns `(count, rows, cols, bytes)`.
pub fn parse_idx_images(b: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    if be_u32(b, 0)? != 0x803 {
        return Err(Error::Dataset(format!("IDX image magic {:#x}, expected 0x803", be_u32(b, 0)?)));
    }
    let (n, rows, cols) = (be_u32(b, 4)?, be_u32(b, 8)?, be_u32(b, 12)?);
    let body = &b[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Dataset(format!("IDX image body has {} bytes, header says {}", body.len(), n * rows * cols)));
    }
    Ok((n, rows, cols, body.to_vec()))
}

/// Parses an IDX label file (`0x00000801`).
pub fn parse_idx_labels(b: &[u8]) -> Result<Vec<u8>> {
    if be_u32(b, 0)? != 0x801 {
        return Err(Error::Dataset(format!("IDX label magic {:#x}, expected 0x801", be_u32(b, 0)?)));
    }
    let n = be_u32(b, 4)?;
    let body = &b[8..];
    if body.len() != n {
        return Err(Error::Dataset(format!("IDX label body has {} bytes, header says {n}", body.len())));
    }
    Ok(body.to_vec())
}

fn find_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    for cand in [format!("{stem}.gz"), stem.to_string()] {
        let p = dir.join(cand);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Dataset(format!("{stem}[.gz] not found in {}", dir.display())))
}

/// Reads `{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]` from `dir`,
/// scaling pixels to `[0, 1]`.
pub fn load_mnist(dir: &Path, train: bool) -> Result<Dataset> {
    let prefix = if train { "train" } else { "t10k" };
    let (n, rows, cols, px) = parse_idx_images(&open_maybe_gz(&find_file(dir, &format!("{prefix}-images-idx3-ubyte"))?)?)?;
    let labels = parse_idx_labels(&open_maybe_gz(&find_file(dir, &format!("{prefix}-labels-idx1-ubyte"))?)?)?;
    if labels.len() != n {
        return Err(Error::Dataset(format!("{n} images but {} labels", labels.len())));
    }
    Dataset::new(
        Dims::new(1, rows, cols),
        10,
        px.iter().map(|&v| v as f64 / 255.0).collect(),
        labels.into_iter().map(usize::from).collect(),
    )
}

/// Parses CIFAR-10 binary records (1 label byte + 3072 pixel bytes, channel-major).
pub fn parse_cifar10(b: &[u8]) -> Result<Dataset> {
    const REC: usize = 1 + 3 * 1024;
    if !b.len().is_multiple_of(REC) {
        return Err(Error::Dataset(format!("CIFAR-10 batch of {} bytes is not a whole number of records", b.len())));
    }
    let n = b.len() / REC;
    let mut images = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for rec in b.chunks_exact(REC) {
        labels.push(rec[0] as usize);
        images.extend(rec[1..].iter().map(|&v| v as f64 / 255.0));
    }
    Dataset::new(Dims::new(3, 32, 32), 10, images, labels)
}

/// Reads `data_batch_{1..5}.bin` (train) or `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: &Path, train: bool) -> Result<Dataset> {
    let files: Vec<String> =
        if train { (1..=5).map(|i| format!("data_batch_{i}.bin")).collect() } else { vec!["test_batch.bin".into()] };
    let mut bytes = Vec::new();
    for f in files {
        let p = dir.join(&f);
        if !p.is_file() {
            return Err(Error::Dataset(format!("{f} not found in {}", dir.display())));
        }
        bytes.extend(open_maybe_gz(&p)?);
    }
    parse_cifar10(&bytes)
}

/// Two noisy classes `±template + σ·noise`, linearly separable with high probability.
pub fn synthetic(n: usize, dims: Dims, classes: usize, noise: f64, seed: u64, split: u64) -> Result<Dataset> {
    if classes < 2 || dims.is_empty() {
        return Err(Error::Dataset("synthetic data needs two classes and a non-empty image".into()));
    }
    let mut trng = SeqRng::new(ProbeSeed::new(seed, u64::MAX), Domain::Instance);
    let templates: Vec<Vec<f64>> = (0..classes).map(|_| (0..dims.len()).map(|_| trng.normal()).collect()).collect();
    let mut rng = SeqRng::new(ProbeSeed::new(seed, split), Domain::Instance);
    let mut images = Vec::with_capacity(n * dims.len());
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.below(classes as u64) as usize;
        labels.push(c);
        images.extend(templates[c].iter().map(|t| t + noise * rng.normal()));
    }
    Dataset::new(dims, classes, images, labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    Mnist {
        dir: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
    },
    Cifar10 {
        dir: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
    },
    Synthetic {
        train: usize,
        test: usize,
        dims: Dims,
        #[serde(default = "two")]
        classes: usize,
        #[serde(default = "unit")]
        noise: f64,
        seed: u64,
    },
}

fn two() -> usize {
    2
}

fn unit() -> f64 {
    1.0
}

impl DatasetSpec {
    /// Resolves relative directories against `base`.
    pub fn rebase(&mut self, base: &Path) {
        if let DatasetSpec::Mnist { dir, .. } | DatasetSpec::Cifar10 { dir, .. } = self {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
    }

    /// `(train, test)`.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let limit = |d: Dataset, l: &Option<usize>| match l {
            Some(n) => d.truncate(*n),
            None => d,
        };
        match self {
            DatasetSpec::Mnist { dir, train_limit, test_limit } => {
                Ok((limit(load_mnist(dir, true)?, train_limit), limit(load_mnist(dir, false)?, test_limit)))
            }
            DatasetSpec::Cifar10 { dir, train_limit, test_limit } => {
                Ok((limit(load_cifar10(dir, true)?, train_limit), limit(load_cifar10(dir, false)?, test_limit)))
            }
            DatasetSpec::Synthetic { train, test, dims, classes, noise, seed } => Ok((
                synthetic(*train, *dims, *classes, *noise, *seed, 0)?,
                synthetic(*test, *dims, *classes, *noise, *seed, 1)?,
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_images(n: u32, rows: u32, cols: u32, body: &[u8]) -> Vec<u8> {
        let mut v = vec![0, 0, 8, 3];
        for d in [n, rows, cols] {
            v.extend(d.to_be_bytes());
        }
        v.extend_from_slice(body);
        v
    }

    #[test]
    fn idx_round_trip() {
        let bytes = idx_images(2, 2, 3, &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 255]);
        let (n, r, c, px) = parse_idx_images(&bytes).unwrap();
        assert_eq!((n, r, c, px[11]), (2, 2, 3, 255));
        let mut labels = vec![0, 0, 8, 1, 0, 0, 0, 2];
        labels.extend([7, 3]);
        assert_eq!(parse_idx_labels(&labels).unwrap(), vec![7, 3]);
    }

    #[test]
    fn idx_errors() {
        let mut bytes = idx_images(2, 2, 2, &[0; 8]);
        bytes[3] = 1;
        assert!(matches!(parse_idx_images(&bytes), Err(Error::Dataset(_))));
        assert!(parse_idx_images(&idx_images(2, 2, 2, &[0; 7])).is_err());
        assert!(parse_idx_labels(&[0, 0, 8, 1, 0, 0, 0, 3, 1]).is_err());
    }

    #[test]
    fn gz_and_plain_files_load_the_same() {
        let dir = tempfile::tempdir().unwrap();
        let img = idx_images(1, 2, 2, &[0, 51, 102, 255]);
        let lab = vec![0, 0, 8, 1, 0, 0, 0, 1, 4];
        std::fs::write(dir.path().join("train-images-idx3-ubyte"), &img).unwrap();
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        gz.write_all(&lab).unwrap();
        std::fs::write(dir.path().join("train-labels-idx1-ubyte.gz"), gz.finish().unwrap()).unwrap();
        let d = load_mnist(dir.path(), true).unwrap();
        assert_eq!(d.labels, vec![4]);
        assert_eq!(d.image(0), &[0.0, 0.2, 0.4, 1.0]);
        assert!(matches!(load_mnist(dir.path(), false), Err(Error::Dataset(_))));
    }

    #[test]
    fn cifar_records() {
        let mut rec = vec![3u8];
        rec.extend((0..3072).map(|i| (i % 256) as u8));
        let d = parse_cifar10(&rec).unwrap();
        assert_eq!((d.len(), d.labels[0], d.dims), (1, 3, Dims::new(3, 32, 32)));
        assert!(parse_cifar10(&rec[..100]).is_err());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = synthetic(10, Dims::new(1, 4, 4), 2, 0.5, 1, 0).unwrap();
        assert_eq!(a, synthetic(10, Dims::new(1, 4, 4), 2, 0.5, 1, 0).unwrap());
        assert_ne!(a, synthetic(10, Dims::new(1, 4, 4), 2, 0.5, 1, 1).unwrap());
    }
}
