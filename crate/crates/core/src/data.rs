//! MNIST IDX ingestion, class-balanced splits and synthetic datasets.
//!
//! The loader only reads local files. Each of the four standard files may be
//! named with dashes (`train-images-idx3-ubyte`) or a dot
//! (`train-images.idx3-ubyte`) and may be gzip-compressed with a `.gz`
//! suffix. When the directory holds a `SHA256SUMS` file in `sha256sum`
//! format, every listed file is verified before parsing.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{DenseTensor, Rng, Shape, TensorError};

pub const MNIST_MEAN: f32 = 0.1307;
pub const MNIST_STD: f32 = 0.3081;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: no file named {candidates:?}")]
    Missing { path: String, candidates: Vec<String> },
    #[error("{path}: bad IDX magic {magic:#010x}, expected {expected:#010x}")]
    BadMagic { path: String, magic: u32, expected: u32 },
    #[error("{path}: truncated at byte offset {offset}, expected {expected} bytes")]
    Truncated { path: String, offset: usize, expected: usize },
    #[error("{path}: checksum mismatch (expected {expected}, got {actual})")]
    Checksum { path: String, expected: String, actual: String },
    #[error("{0}")]
    Inconsistent(String),
    #[error("class {class} has {available} samples, {requested} requested")]
    InsufficientSamples {
        class: usize,
        available: usize,
        requested: usize,
    },
    #[error("invalid parameter: {0}")]
    BadParameter(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Examples with integer labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[count, ...example dims]`
    pub images: DenseTensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub tag: String,
}

impl Dataset {
    pub fn new(images: DenseTensor, labels: Vec<usize>, classes: usize, tag: impl Into<String>) -> Result<Self, DataError> {
        if images.shape().dims()[0] != labels.len() {
            return Err(DataError::Inconsistent(format!(
                "{} images but {} labels",
                images.shape().dims()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(DataError::Inconsistent(format!("label {bad} outside {classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            classes,
            tag: tag.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Dims of one example.
    pub fn example_dims(&self) -> &[usize] {
        &self.images.shape().dims()[1..]
    }

    fn example_len(&self) -> usize {
        self.example_dims().iter().product()
    }

    /// Gathers the given examples into one batch.
    pub fn batch(&self, indices: &[usize]) -> (DenseTensor, Vec<usize>) {
        let len = self.example_len();
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&src[i * len..(i + 1) * len]);
        }
        let mut dims = vec![indices.len()];
        dims.extend_from_slice(self.example_dims());
        let images = DenseTensor::from_vec(Shape::new(dims).expect("valid dims"), data).expect("finite source");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize], tag: impl Into<String>) -> Dataset {
        let (images, labels) = self.batch(indices);
        Dataset {
            images,
            labels,
            classes: self.classes,
            tag: tag.into(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Parsed IDX container.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses an unsigned-byte IDX buffer (big-endian header).
pub fn parse_idx(bytes: &[u8], expected_magic: u32, path: &str) -> Result<IdxArray, DataError> {
    let truncated = |expected| DataError::Truncated {
        path: path.into(),
        offset: bytes.len(),
        expected,
    };
    if bytes.len() < 4 {
        return Err(truncated(4));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if magic != expected_magic {
        return Err(DataError::BadMagic {
            path: path.into(),
            magic,
            expected: expected_magic,
        });
    }
    let rank = (magic & 0xFF) as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|k| u32::from_be_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let total = header + count;
    if bytes.len() < total {
        return Err(truncated(total));
    }
    if bytes.len() > total {
        return Err(DataError::Inconsistent(format!(
            "{path}: {} trailing bytes after offset {total}",
            bytes.len() - total
        )));
    }
    Ok(IdxArray {
        magic,
        dims,
        data: bytes[header..].to_vec(),
    })
}

/// `(x / 255 - mean) / std`.
pub fn normalize_pixels(raw: &[u8]) -> Vec<f32> {
    raw.iter()
        .map(|&p| (f32::from(p) / 255.0 - MNIST_MEAN) / MNIST_STD)
        .collect()
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn candidates(stem: &str, kind: &str) -> Vec<String> {
    let mut names = Vec::new();
    for sep in ["-", "."] {
        let base = format!("{stem}{sep}{kind}-ubyte");
        names.push(base.clone());
        names.push(format!("{base}.gz"));
    }
    names
}

fn locate(dir: &Path, stem: &str, kind: &str) -> Result<PathBuf, DataError> {
    let names = candidates(stem, kind);
    names
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
        .ok_or_else(|| DataError::Missing {
            path: dir.display().to_string(),
            candidates: names,
        })
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Reads `SHA256SUMS` if present: `(hex digest, file name)` pairs.
fn read_manifest(dir: &Path) -> Result<Vec<(String, String)>, DataError> {
    let path = dir.join("SHA256SUMS");
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let text = String::from_utf8_lossy(&read_file(&path)?).into_owned();
    Ok(text
        .lines()
        .filter_map(|l| {
            let mut parts = l.split_whitespace();
            let hash = parts.next()?.to_ascii_lowercase();
            let name = parts.next()?.trim_start_matches('*').to_string();
            Some((hash, name))
        })
        .collect())
}

fn load_idx(path: &Path, magic: u32, manifest: &[(String, String)]) -> Result<IdxArray, DataError> {
    let raw = read_file(path)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if let Some((expected, _)) = manifest.iter().find(|(_, n)| *n == name) {
        let actual = sha256_hex(&raw);
        if &actual != expected {
            return Err(DataError::Checksum {
                path: path.display().to_string(),
                expected: expected.clone(),
                actual,
            });
        }
    }
    let bytes = if name.ends_with(".gz") {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|source| DataError::Io {
                path: path.display().to_string(),
                source,
            })?;
        out
    } else {
        raw
    };
    parse_idx(&bytes, magic, &path.display().to_string())
}

fn load_split(dir: &Path, stem: &str, tag: &str, manifest: &[(String, String)]) -> Result<Dataset, DataError> {
    let images = load_idx(&locate(dir, &format!("{stem}-images"), "idx3")?, IDX_IMAGES_MAGIC, manifest)?;
    let labels = load_idx(&locate(dir, &format!("{stem}-labels"), "idx1")?, IDX_LABELS_MAGIC, manifest)?;
    let &[n, h, w] = &images.dims[..] else {
        return Err(DataError::Inconsistent(format!("image file has dims {:?}", images.dims)));
    };
    if labels.dims != [n] {
        return Err(DataError::Inconsistent(format!("{n} images but label dims {:?}", labels.dims)));
    }
    let pixels = normalize_pixels(&images.data);
    let images = DenseTensor::from_vec(Shape::new([n, 1, h, w])?, pixels)?;
    let labels: Vec<usize> = labels.data.iter().map(|&l| usize::from(l)).collect();
    Dataset::new(images, labels, 10, tag)
}

#[derive(Debug, Clone)]
pub struct Mnist {
    pub train: Dataset,
    pub test: Dataset,
}

/// Loads the standard training and test splits from `dir`.
pub fn load_mnist(dir: &Path) -> Result<Mnist, DataError> {
    let manifest = read_manifest(dir)?;
    Ok(Mnist {
        train: load_split(dir, "train", "mnist-train", &manifest)?,
        test: load_split(dir, "t10k", "mnist-test", &manifest)?,
    })
}

/// Indices of each class, shuffled deterministically.
fn shuffled_by_class(data: &Dataset, seed: u64) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); data.classes];
    for (i, &y) in data.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = Rng::new(seed);
    for (c, idx) in by_class.iter_mut().enumerate() {
        rng.fork(c as u64).shuffle(idx);
    }
    by_class
}

/// Class-balanced subset with `per_class` examples of every class, in
/// original order.
pub fn subsample(data: &Dataset, per_class: usize, seed: u64) -> Result<Dataset, DataError> {
    let (train, _) = balanced_split(data, per_class, 0, seed)?;
    Ok(train)
}

/// Two disjoint class-balanced subsets, e.g. training and validation.
pub fn balanced_split(
    data: &Dataset,
    first_per_class: usize,
    second_per_class: usize,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    let by_class = shuffled_by_class(data, seed);
    let need = first_per_class + second_per_class;
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for (class, idx) in by_class.iter().enumerate() {
        if idx.len() < need {
            return Err(DataError::InsufficientSamples {
                class,
                available: idx.len(),
                requested: need,
            });
        }
        first.extend_from_slice(&idx[..first_per_class]);
        second.extend_from_slice(&idx[first_per_class..need]);
    }
    first.sort_unstable();
    second.sort_unstable();
    Ok((
        data.subset(&first, format!("{}/{}x{}", data.tag, first_per_class, data.classes)),
        data.subset(&second, format!("{}/holdout-{}x{}", data.tag, second_per_class, data.classes)),
    ))
}

/// Gaussian blobs (unit variance) around `classes` centers placed on the
/// coordinate axes at distance `separation / sqrt(2)` from the origin, so
/// every pair of centers is exactly `separation` apart.
pub fn synth_blobs(classes: usize, per_class: usize, dims: usize, separation: f32, seed: u64) -> Result<Dataset, DataError> {
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(DataError::BadParameter(format!("separation must be positive, got {separation}")));
    }
    if classes == 0 || dims == 0 {
        return Err(DataError::BadParameter("classes and dims must be positive".into()));
    }
    if dims < classes {
        return Err(DataError::BadParameter(format!(
            "{classes} equidistant centers need at least {classes} dims, got {dims}"
        )));
    }
    let radius = f64::from(separation) / std::f64::consts::SQRT_2;
    let mut rng = Rng::new(seed);
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        for d in 0..dims {
            let center = if d == class && classes > 1 { radius } else { 0.0 };
            data.push((center + rng.normal()) as f32);
        }
        labels.push(class);
    }
    let images = DenseTensor::from_vec(Shape::new([n, dims])?, data)?;
    Dataset::new(images, labels, classes, format!("blobs-{classes}x{per_class}-d{dims}-s{separation}"))
}
