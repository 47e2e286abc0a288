//! Datasets: synthetic Gaussian classes, CSV and IDX files.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::derive_seed;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: parse error at byte {offset}: {msg}")]
    Parse {
        path: PathBuf,
        offset: u64,
        msg: String,
    },
    #[error("feature file has {features} rows but label file has {labels}")]
    CountMismatch { features: usize, labels: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

/// Row-major features with one integer label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Vec<f32>,
    pub labels: Vec<u32>,
    pub dim: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f32>, labels: Vec<u32>, dim: usize) -> Result<Self, DataError> {
        if dim == 0 || labels.is_empty() {
            return Err(DataError::Invalid("dataset is empty".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(DataError::Invalid(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        let classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
        Ok(Self {
            features,
            labels,
            dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            features,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            dim: self.dim,
            classes: self.classes,
        }
    }

    /// Little-endian f32 features followed by u32 labels.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * (self.features.len() + self.labels.len()));
        for v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    /// Isotropic unit-variance Gaussian per class. `n` training rows plus
    /// `n / 4` held-out rows.
    Synthetic {
        classes: usize,
        dim: usize,
        n: usize,
        seed: u64,
    },
    /// Numeric CSV. Without `labels` the last column is the label.
    Csv {
        features: PathBuf,
        labels: Option<PathBuf>,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

/// Fraction of file-based rows held out for evaluation.
pub const TEST_FRACTION: f64 = 0.2;

/// Distance between the two class means in the 2-class synthetic task,
/// in units of the noise standard deviation. Gives a Bayes accuracy near
/// 93%.
pub const SYNTHETIC_SEPARATION: f64 = 3.0;

pub fn load_dataset(source: &DataSource, seed: u64) -> Result<Split, DataError> {
    let split = match source {
        DataSource::Synthetic {
            classes,
            dim,
            n,
            seed,
        } => synthetic(*classes, *dim, *n, *seed)?,
        DataSource::Csv { features, labels } => {
            let ds = match labels {
                Some(l) => csv_with_labels(features, l)?,
                None => csv_last_column(features)?,
            };
            holdout(ds, seed)?
        }
        DataSource::Idx { images, labels } => holdout(idx_pair(images, labels)?, seed)?,
    };
    Ok(normalize(split))
}

pub fn synthetic(classes: usize, dim: usize, n: usize, seed: u64) -> Result<Split, DataError> {
    if classes < 2 || dim == 0 || n < 4 {
        return Err(DataError::Invalid(format!(
            "synthetic task needs ≥ 2 classes, dim ≥ 1 and n ≥ 4 (got {classes}, {dim}, {n})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xda7a]));
    let mut direction = || -> Vec<f64> {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(f64::MIN_POSITIVE);
        v.into_iter().map(|x| x / norm).collect()
    };
    let half = SYNTHETIC_SEPARATION / 2.0;
    let means: Vec<Vec<f64>> = if classes == 2 {
        let u = direction();
        vec![
            u.iter().map(|x| x * half).collect(),
            u.iter().map(|x| -x * half).collect(),
        ]
    } else {
        (0..classes)
            .map(|_| direction().into_iter().map(|x| x * half).collect())
            .collect()
    };
    let draw = |count: usize, stream: u64| -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream]));
        let mut features = Vec::with_capacity(count * dim);
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let c = rng.random_range(0..classes);
            labels.push(c as u32);
            for m in &means[c] {
                let noise: f64 = rng.sample(StandardNormal);
                features.push((m + noise) as f32);
            }
        }
        Dataset {
            features,
            labels,
            dim,
            classes,
        }
    };
    Ok(Split {
        train: draw(n, 1),
        test: draw((n / 4).max(1), 2),
    })
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_err(path: &Path, offset: u64, msg: impl Into<String>) -> DataError {
    DataError::Parse {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

/// Rows of numbers with their starting byte offsets. A first row that does
/// not parse as numbers is treated as a header.
fn csv_rows(path: &Path) -> Result<Vec<(u64, Vec<f64>)>, DataError> {
    let bytes = read(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let mut rows = Vec::new();
    let mut width = None;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let offset = e.position().map(|p| p.byte()).unwrap_or(0);
            parse_err(path, offset, e.to_string())
        })?;
        let offset = record.position().map(|p| p.byte()).unwrap_or(0);
        let parsed: Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if i == 0 => continue,
            Err(e) => return Err(parse_err(path, offset, format!("non-numeric field: {e}"))),
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(path, offset, "non-finite value"));
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(parse_err(
                    path,
                    offset,
                    format!("row has {} fields, expected {w}", values.len()),
                ))
            }
            _ => {}
        }
        rows.push((offset, values));
    }
    if rows.is_empty() {
        return Err(parse_err(path, 0, "no data rows"));
    }
    Ok(rows)
}

fn label_of(path: &Path, offset: u64, v: f64) -> Result<u32, DataError> {
    if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
        return Err(parse_err(
            path,
            offset,
            format!("label {v} is not a nonnegative integer"),
        ));
    }
    Ok(v as u32)
}

pub fn csv_last_column(path: &Path) -> Result<Dataset, DataError> {
    let rows = csv_rows(path)?;
    let dim = rows[0].1.len() - 1;
    if dim == 0 {
        return Err(parse_err(
            path,
            rows[0].0,
            "need at least one feature column and a label",
        ));
    }
    let mut features = Vec::with_capacity(rows.len() * dim);
    let mut labels = Vec::with_capacity(rows.len());
    for (offset, row) in rows {
        features.extend(row[..dim].iter().map(|&v| v as f32));
        labels.push(label_of(path, offset, row[dim])?);
    }
    Dataset::new(features, labels, dim)
}

pub fn csv_with_labels(features: &Path, labels: &Path) -> Result<Dataset, DataError> {
    let rows = csv_rows(features)?;
    let label_rows = csv_rows(labels)?;
    if rows.len() != label_rows.len() {
        return Err(DataError::CountMismatch {
            features: rows.len(),
            labels: label_rows.len(),
        });
    }
    if label_rows[0].1.len() != 1 {
        return Err(parse_err(
            labels,
            label_rows[0].0,
            "label file must have exactly one column",
        ));
    }
    let dim = rows[0].1.len();
    let features_flat = rows
        .iter()
        .flat_map(|(_, r)| r.iter().map(|&v| v as f32))
        .collect();
    let labels = label_rows
        .iter()
        .map(|(offset, r)| label_of(labels, *offset, r[0]))
        .collect::<Result<Vec<_>, _>>()?;
    Dataset::new(features_flat, labels, dim)
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(path: &Path, bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| parse_err(path, bytes.len() as u64, "truncated header"))
}

/// `(count, rows, cols, pixels)` from an unsigned-byte IDX image file.
pub fn parse_idx_images(
    path: &Path,
    bytes: &[u8],
) -> Result<(usize, usize, usize, Vec<u8>), DataError> {
    let magic = be_u32(path, bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(parse_err(
            path,
            0,
            format!("magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(path, bytes, 4)? as usize;
    let rows = be_u32(path, bytes, 8)? as usize;
    let cols = be_u32(path, bytes, 12)? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() != need {
        return Err(parse_err(
            path,
            bytes.len().min(16 + need) as u64,
            format!(
                "expected {need} pixel bytes after the header, found {}",
                body.len()
            ),
        ));
    }
    Ok((count, rows, cols, body.to_vec()))
}

pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u32>, DataError> {
    let magic = be_u32(path, bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(parse_err(
            path,
            0,
            format!("magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(path, bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(parse_err(
            path,
            bytes.len().min(8 + count) as u64,
            format!(
                "expected {count} label bytes after the header, found {}",
                body.len()
            ),
        ));
    }
    Ok(body.iter().map(|&b| u32::from(b)).collect())
}

pub fn idx_pair(images: &Path, labels: &Path) -> Result<Dataset, DataError> {
    let (count, rows, cols, pixels) = parse_idx_images(images, &read(images)?)?;
    let labels = parse_idx_labels(labels, &read(labels)?)?;
    if count != labels.len() {
        return Err(DataError::CountMismatch {
            features: count,
            labels: labels.len(),
        });
    }
    let features = pixels.into_iter().map(|b| f32::from(b) / 255.0).collect();
    Dataset::new(features, labels, rows * cols)
}

fn holdout(ds: Dataset, seed: u64) -> Result<Split, DataError> {
    if ds.len() < 2 {
        return Err(DataError::Invalid(
            "need at least two rows to hold out a test set".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5917])));
    let n_test = ((ds.len() as f64 * TEST_FRACTION).round() as usize).clamp(1, ds.len() - 1);
    let (train, test) = idx.split_at(ds.len() - n_test);
    Ok(Split {
        train: ds.subset(train),
        test: ds.subset(test),
    })
}

/// Z-scores every feature with training-set statistics. Constant features
/// are only centered.
fn normalize(mut split: Split) -> Split {
    let dim = split.train.dim;
    let n = split.train.len() as f64;
    let mut mean = vec![0f64; dim];
    let mut sq = vec![0f64; dim];
    for row in split.train.features.chunks_exact(dim) {
        for (j, &v) in row.iter().enumerate() {
            mean[j] += f64::from(v);
            sq[j] += f64::from(v) * f64::from(v);
        }
    }
    let stats: Vec<(f64, f64)> = (0..dim)
        .map(|j| {
            let m = mean[j] / n;
            let var = (sq[j] / n - m * m).max(0.0);
            let sd = if var > 1e-12 { var.sqrt() } else { 1.0 };
            (m, sd)
        })
        .collect();
    let classes = split.train.classes.max(split.test.classes);
    for ds in [&mut split.train, &mut split.test] {
        for row in ds.features.chunks_exact_mut(dim) {
            for (v, (m, sd)) in row.iter_mut().zip(&stats) {
                *v = ((f64::from(*v) - m) / sd) as f32;
            }
        }
        ds.classes = classes;
    }
    split
}

/// Row indices worker `rank` trains on at each step of `epoch`: a seeded
/// global shuffle cut into global batches of `world * batch` rows, of which
/// the worker takes block `rank`. Incomplete global batches are dropped.
pub fn epoch_shards(
    n: usize,
    batch: usize,
    world: usize,
    rank: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        &[0x5afe, epoch as u64],
    )));
    let global = world * batch;
    idx.chunks_exact(global)
        .map(|g| g[rank * batch..(rank + 1) * batch].to_vec())
        .collect()
}
