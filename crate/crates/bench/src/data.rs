//! Dataset ingestion: IDX and CIFAR binary readers, a seeded synthetic
//! generator, splitting, normalization, and resampling to the network input.

use std::path::{Path, PathBuf};

use ba2::{Dataset, Shape4, Tensor32};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 32 * 32 * 3;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("checksum mismatch for {path}: expected {expected}, found {found}")]
    Checksum { path: PathBuf, expected: String, found: String },
    #[error("invalid dataset spec: {0}")]
    Spec(String),
}

/// Raw 8-bit images, `(n, rows, cols, channels)` row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImages {
    pub n: usize,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl RawImages {
    pub fn to_tensor(&self) -> Tensor32 {
        let data = self.pixels.iter().map(|&p| f32::from(p) / 255.0).collect();
        Tensor32::from_vec(Shape4::new(self.n, self.rows, self.cols, self.channels), data).expect("sizes agree")
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, DataError> {
    let b = bytes.get(at..at + 4).ok_or(DataError::Truncated { expected: at + 4, found: bytes.len() })?;
    Ok(u32::from_be_bytes(b.try_into().unwrap()))
}

/// IDX image file: magic `0x00000803`, then big-endian `n, rows, cols`, then pixels.
pub fn parse_idx_images(bytes: &[u8]) -> Result<RawImages, DataError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic { expected: IDX_IMAGES_MAGIC, found: magic });
    }
    let (n, rows, cols) = (be_u32(bytes, 4)? as usize, be_u32(bytes, 8)? as usize, be_u32(bytes, 12)? as usize);
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(DataError::Truncated { expected, found: bytes.len() });
    }
    Ok(RawImages { n, rows, cols, channels: 1, pixels: bytes[16..].to_vec() })
}

/// IDX label file: magic `0x00000801`, big-endian `n`, then one byte per label.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>, DataError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic { expected: IDX_LABELS_MAGIC, found: magic });
    }
    let n = be_u32(bytes, 4)? as usize;
    if bytes.len() != 8 + n {
        return Err(DataError::Truncated { expected: 8 + n, found: bytes.len() });
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// CIFAR binary: records of one label byte and 3072 channel-planar pixels
/// (1024 red, 1024 green, 1024 blue). Returned interleaved as HWC.
pub fn parse_cifar(bytes: &[u8]) -> Result<(RawImages, Vec<usize>), DataError> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let n = bytes.len() / CIFAR_RECORD + 1;
        return Err(DataError::Truncated { expected: n * CIFAR_RECORD, found: bytes.len() });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        let planes = &rec[1..];
        for p in 0..1024 {
            for c in 0..3 {
                pixels.push(planes[c * 1024 + p]);
            }
        }
    }
    Ok((RawImages { n, rows: 32, cols: 32, channels: 3, pixels }, labels))
}

/// Class-conditional images: each class has a smooth random prototype; a
/// sample is its prototype circularly shifted by up to `max_shift` pixels,
/// rescaled in contrast, plus Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub classes: usize,
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_shift")]
    pub max_shift: usize,
}

fn default_noise() -> f64 {
    0.6
}

fn default_shift() -> usize {
    2
}

pub fn synthetic(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    if spec.classes < 2 || spec.samples == 0 || spec.height == 0 || spec.width == 0 || spec.channels == 0 {
        return Err(DataError::Spec(format!("degenerate synthetic spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let prototypes: Vec<Vec<f32>> = (0..spec.classes).map(|_| prototype(&mut rng, h, w, c)).collect();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| DataError::Spec(e.to_string()))?;
    let per = h * w * c;
    let mut data = Vec::with_capacity(spec.samples * per);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let label = i % spec.classes;
        let p = &prototypes[label];
        let s = spec.max_shift as i64;
        let (dy, dx) = (rng.random_range(-s..=s), rng.random_range(-s..=s));
        let contrast: f64 = rng.random_range(0.8..1.2);
        for r in 0..h {
            for q in 0..w {
                let sr = (r as i64 + dy).rem_euclid(h as i64) as usize;
                let sq = (q as i64 + dx).rem_euclid(w as i64) as usize;
                for ch in 0..c {
                    let v = contrast * f64::from(p[(sr * w + sq) * c + ch]) + noise.sample(&mut rng);
                    data.push(v as f32);
                }
            }
        }
        labels.push(label);
    }
    let images = Tensor32::from_vec(Shape4::new(spec.samples, h, w, c), data).expect("sizes agree");
    Ok(Dataset::new(images, labels, spec.classes).expect("labels in range"))
}

/// A few 2-D sinusoids per channel with integer frequencies, so every domain
/// draws from the same periodic basis and features transfer.
fn prototype(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w * c];
    for ch in 0..c {
        for _ in 0..3 {
            let (fy, fx) = (f64::from(rng.random_range(0u8..4)), f64::from(rng.random_range(0u8..4)));
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.3..0.7);
            for r in 0..h {
                for q in 0..w {
                    let t = std::f64::consts::TAU * (fy * r as f64 / h as f64 + fx * q as f64 / w as f64) + phase;
                    out[(r * w + q) * c + ch] += (amp * t.sin()) as f32;
                }
            }
        }
    }
    out
}

/// Nearest-neighbour resampling to `(h, w)`, with channels tiled cyclically to `c`.
pub fn fit_input(images: &Tensor32, h: usize, w: usize, c: usize) -> Tensor32 {
    let s = images.shape();
    if (s.h(), s.w(), s.c()) == (h, w, c) {
        return images.clone();
    }
    Tensor32::from_fn(Shape4::new(s.n(), h, w, c), |i| {
        let ch = i % c;
        let q = (i / c) % w;
        let r = (i / (c * w)) % h;
        let n = i / (c * w * h);
        images.at(n, r * s.h() / h, q * s.w() / w, ch % s.c())
    })
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn fit(images: &Tensor32) -> Self {
        let c = images.shape().c();
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (i, &v) in images.data().iter().enumerate() {
            sum[i % c] += f64::from(v);
            sq[i % c] += f64::from(v) * f64::from(v);
        }
        let count = (images.len() / c.max(1)).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq.iter().zip(&mean).map(|(s, m)| ((s / count - m * m).max(0.0).sqrt().max(1e-6)) as f32).collect();
        Normalization { mean: mean.into_iter().map(|m| m as f32).collect(), std }
    }

    pub fn apply(&self, images: &mut Tensor32) {
        let c = self.mean.len();
        for (i, v) in images.data_mut().iter_mut().enumerate() {
            *v = (*v - self.mean[i % c]) / self.std[i % c];
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataFormat {
    Idx { images: PathBuf, labels: PathBuf },
    CifarBinary { path: PathBuf },
    Synthetic(SyntheticSpec),
}

/// Sizes of the three disjoint splits drawn from one shuffled pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: usize,
    #[serde(default)]
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub format: DataFormat,
    pub classes: usize,
    pub splits: Splits,
    /// Expected SHA-256 of each input file, in `format` order.
    #[serde(default)]
    pub sha256: Vec<String>,
    /// Fitted on the training split when absent.
    #[serde(default)]
    pub normalization: Option<Normalization>,
    #[serde(default)]
    pub split_seed: u64,
}

#[derive(Debug, Clone)]
pub struct DomainData {
    pub name: String,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub normalization: Normalization,
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

fn verify(path: &Path, bytes: &[u8], expected: Option<&String>) -> Result<(), DataError> {
    if let Some(expected) = expected {
        let found = hex::encode(Sha256::digest(bytes));
        if &found != expected {
            return Err(DataError::Checksum { path: path.to_path_buf(), expected: expected.clone(), found });
        }
    }
    Ok(())
}

/// Loads, checks, splits, resamples to `(h, w, c)`, and normalizes a domain.
pub fn ingest(spec: &DatasetSpec, base: &Path, h: usize, w: usize, c: usize) -> Result<DomainData, DataError> {
    let (images, labels) = match &spec.format {
        DataFormat::Idx { images, labels } => {
            let (ip, lp) = (base.join(images), base.join(labels));
            let (ib, lb) = (read(&ip)?, read(&lp)?);
            verify(&ip, &ib, spec.sha256.first())?;
            verify(&lp, &lb, spec.sha256.get(1))?;
            let raw = parse_idx_images(&ib)?;
            let labels = parse_idx_labels(&lb)?;
            if labels.len() != raw.n {
                return Err(DataError::Spec(format!("{} images but {} labels", raw.n, labels.len())));
            }
            (raw.to_tensor(), labels)
        }
        DataFormat::CifarBinary { path } => {
            let p = base.join(path);
            let bytes = read(&p)?;
            verify(&p, &bytes, spec.sha256.first())?;
            let (raw, labels) = parse_cifar(&bytes)?;
            (raw.to_tensor(), labels)
        }
        DataFormat::Synthetic(s) => {
            if s.classes != spec.classes {
                return Err(DataError::Spec(format!("synthetic classes {} vs declared {}", s.classes, spec.classes)));
            }
            let d = synthetic(s)?;
            (d.images, d.labels)
        }
    };
    if let Some(&label) = labels.iter().find(|&&l| l >= spec.classes) {
        return Err(DataError::LabelOutOfRange { label, classes: spec.classes });
    }
    let Splits { train, val, test } = spec.splits;
    if train == 0 || test == 0 || train + val + test > labels.len() {
        return Err(DataError::Spec(format!(
            "splits {train}/{val}/{test} do not fit {} samples",
            labels.len()
        )));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.split_seed));
    let mut images = fit_input(&images, h, w, c);
    let pool = Dataset::new(std::mem::replace(&mut images, Tensor32::zeros(Shape4::scalar())), labels, spec.classes)
        .map_err(|e| DataError::Spec(e.to_string()))?;
    let mut train_set = pool.subset(&order[..train]);
    let mut val_set = pool.subset(&order[train..train + val]);
    let mut test_set = pool.subset(&order[train + val..train + val + test]);
    let normalization = spec.normalization.clone().unwrap_or_else(|| Normalization::fit(&train_set.images));
    if normalization.mean.len() != c || normalization.std.len() != c {
        return Err(DataError::Spec(format!("normalization has {} channels, input has {c}", normalization.mean.len())));
    }
    for set in [&mut train_set, &mut val_set, &mut test_set] {
        normalization.apply(&mut set.images);
    }
    Ok(DomainData { name: spec.name.clone(), train: train_set, val: val_set, test: test_set, normalization })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32) -> Vec<u8> {
        let mut b = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for v in [n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend((0..n * rows * cols).map(|i| (i % 251) as u8));
        b
    }

    #[test]
    fn idx_ten_digits() {
        let raw = parse_idx_images(&idx_images(10, 28, 28)).unwrap();
        assert_eq!(raw.to_tensor().shape(), Shape4::new(10, 28, 28, 1));
        let mut labels = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        labels.extend_from_slice(&3u32.to_be_bytes());
        labels.extend_from_slice(&[7, 0, 9]);
        assert_eq!(parse_idx_labels(&labels).unwrap(), vec![7, 0, 9]);
    }

    #[test]
    fn idx_errors() {
        let mut b = idx_images(2, 3, 3);
        b.pop();
        assert!(matches!(parse_idx_images(&b), Err(DataError::Truncated { .. })));
        b[3] = 0x01;
        assert!(matches!(parse_idx_images(&b), Err(DataError::BadMagic { .. })));
    }

    #[test]
    fn cifar_records() {
        let mut b = vec![0u8; 2 * CIFAR_RECORD];
        b[0] = 4;
        b[1] = 10; // red of pixel 0
        b[1 + 1024] = 20; // green of pixel 0
        b[CIFAR_RECORD] = 9;
        let (raw, labels) = parse_cifar(&b).unwrap();
        assert_eq!((raw.n, labels), (2, vec![4, 9]));
        assert_eq!(&raw.pixels[..3], &[10, 20, 0]);
        b.push(0);
        assert!(matches!(parse_cifar(&b), Err(DataError::Truncated { .. })));
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let spec = SyntheticSpec { seed: 7, classes: 3, samples: 12, height: 5, width: 5, channels: 2, noise: 0.5, max_shift: 1 };
        assert_eq!(synthetic(&spec).unwrap(), synthetic(&spec).unwrap());
        let other = SyntheticSpec { seed: 8, ..spec.clone() };
        assert_ne!(synthetic(&spec).unwrap(), synthetic(&other).unwrap());
    }

    #[test]
    fn fit_input_tiles_channels() {
        let t = Tensor32::from_vec(Shape4::new(1, 2, 2, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f = fit_input(&t, 1, 1, 3);
        assert_eq!(f.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn normalization_standardizes() {
        let t = Tensor32::from_vec(Shape4::new(2, 1, 1, 2), vec![1.0, 10.0, 3.0, 30.0]).unwrap();
        let n = Normalization::fit(&t);
        assert_eq!(n.mean, vec![2.0, 20.0]);
        let mut u = t.clone();
        n.apply(&mut u);
        assert_eq!(u.data(), &[-1.0, -1.0, 1.0, 1.0]);
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let spec = DatasetSpec {
            name: "s".into(),
            format: DataFormat::Synthetic(SyntheticSpec { seed: 1, classes: 2, samples: 20, height: 4, width: 4, channels: 1, noise: 0.1, max_shift: 0 }),
            classes: 2,
            splits: Splits { train: 10, val: 4, test: 6 },
            sha256: vec![],
            normalization: None,
            split_seed: 3,
        };
        let d = ingest(&spec, Path::new("."), 4, 4, 2).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (10, 4, 6));
        assert_eq!(d.train.images.shape().c(), 2);
    }
}
