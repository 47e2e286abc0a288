//! Dense matrix primitives shared by every compressor.
//!
//! Storage is row-major `f32`; every reduction (dot products, norms, matrix
//! products) accumulates in `f64` and rounds once on the way out so that
//! results are stable enough to compare against naive oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Diagonal entries of the R factor below this magnitude mark a column as
/// linearly dependent on the ones before it.
pub const RANK_TOLERANCE: f64 = 1e-8;

/// Seed used to repair rank-deficient factors when the caller does not
/// provide one. Must be the same on every worker.
pub const DEFAULT_REPAIR_SEED: u64 = 0x5eed_0f_0a7e;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("cannot orthogonalize {cols} columns in a {rows}-dimensional space")]
    TooManyColumns { rows: usize, cols: usize },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Row-major dense matrix of 32-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(TensorError::InvalidShape(format!("{rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(TensorError::InvalidShape(format!(
                "{rows}x{cols} needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::InvalidShape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn diag(values: &[f32]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(TensorError::DimensionMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self { data, ..*self })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Self { data, ..*self })
    }

    pub fn scale(&mut self, s: f32) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f32> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }
}

/// How a parameter tensor is viewed for low-rank compression.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapePolicy {
    pub shape: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
    pub compressible: bool,
}

impl ShapePolicy {
    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    /// Largest usable rank, `min(n, m)`.
    pub fn max_rank(&self) -> usize {
        self.rows.min(self.cols)
    }
}

/// Views a parameter shape as an `n x m` matrix: `n` is the leading
/// dimension and `m` the product of the rest. Vectors are never compressed.
pub fn reshape_to_matrix(shape: &[usize]) -> Result<ShapePolicy> {
    if shape.is_empty() {
        return Err(TensorError::InvalidShape("empty shape".into()));
    }
    if shape.contains(&0) {
        return Err(TensorError::InvalidShape(format!(
            "zero dimension in {shape:?}"
        )));
    }
    let rows = shape[0];
    let cols = shape[1..].iter().product::<usize>();
    Ok(ShapePolicy {
        shape: shape.to_vec(),
        rows,
        cols,
        compressible: shape.len() >= 2,
    })
}

/// `op(a) * op(b)` where `op` optionally transposes.
pub fn matmul(a: &Matrix, b: &Matrix, transpose_a: bool, transpose_b: bool) -> Result<Matrix> {
    let (n, k) = if transpose_a {
        (a.cols, a.rows)
    } else {
        a.shape()
    };
    let (k2, m) = if transpose_b {
        (b.cols, b.rows)
    } else {
        b.shape()
    };
    if k != k2 {
        return Err(TensorError::DimensionMismatch {
            op: "matmul",
            left: (n, k),
            right: (k2, m),
        });
    }
    let at;
    let a = if transpose_a {
        at = a.transpose();
        &at
    } else {
        a
    };
    let bt;
    let b = if transpose_b {
        bt = b.transpose();
        &bt
    } else {
        b
    };

    let mut out = Vec::with_capacity(n * m);
    let mut acc = vec![0f64; m];
    for i in 0..n {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a.data[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = f64::from(av);
            let brow = &b.data[p * m..(p + 1) * m];
            for (acc, &bv) in acc.iter_mut().zip(brow) {
                *acc += av * f64::from(bv);
            }
        }
        out.extend(acc.iter().map(|&v| v as f32));
    }
    Ok(Matrix {
        rows: n,
        cols: m,
        data: out,
    })
}

/// Deterministic i.i.d. standard normal matrix. Identical bytes on every
/// worker for the same seed.
pub fn seeded_normal(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    Matrix { rows, cols, data }
}

/// Mixes a base seed with extra coordinates (layer, step, ...) into a new
/// seed. splitmix64 finalizer per part.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut s = base;
    for &p in parts {
        s = s.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(p);
        let mut z = s;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        s = z ^ (z >> 31);
    }
    s
}

pub fn frobenius_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    a.check_same_shape(b, "frobenius_distance")?;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

/// Q factor of the reduced QR decomposition of `a`.
pub fn orthogonalize(a: &Matrix) -> Result<Matrix> {
    orthogonalize_seeded(a, DEFAULT_REPAIR_SEED)
}

/// Reduced QR via modified Gram-Schmidt with one re-orthogonalization pass.
///
/// Columns whose residual norm falls below [`RANK_TOLERANCE`] are replaced
/// by a seeded random column, so an all-zero input still yields an
/// orthonormal basis. The repair is deterministic in `seed`.
pub fn orthogonalize_seeded(a: &Matrix, seed: u64) -> Result<Matrix> {
    if !a.is_finite() {
        return Err(TensorError::NonFinite("orthogonalize input"));
    }
    let (n, r) = a.shape();
    if r > n {
        return Err(TensorError::TooManyColumns { rows: n, cols: r });
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(r);
    for j in 0..r {
        let mut v: Vec<f64> = (0..n).map(|i| f64::from(a.get(i, j))).collect();
        let mut attempt = 0u64;
        loop {
            for _ in 0..2 {
                for q in &basis {
                    let proj: f64 = q.iter().zip(&v).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(q).for_each(|(x, y)| *x -= proj * y);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > RANK_TOLERANCE {
                v.iter_mut().for_each(|x| *x /= norm);
                break;
            }
            // Only reachable a handful of times: a random Gaussian column is
            // independent of j < n fixed vectors with probability one.
            let fresh = seeded_normal(n, 1, derive_seed(seed, &[j as u64, attempt]));
            v = fresh.data.iter().map(|&x| f64::from(x)).collect();
            attempt += 1;
        }
        basis.push(v);
    }
    let mut out = Matrix::zeros(n, r);
    for (j, q) in basis.iter().enumerate() {
        for (i, &x) in q.iter().enumerate() {
            out.data[i * r + j] = x as f32;
        }
    }
    Ok(out)
}

/// Largest entry of `|AᵀA - I|`.
pub fn orthonormality_error(a: &Matrix) -> f64 {
    let r = a.cols;
    let mut worst = 0f64;
    for i in 0..r {
        for j in 0..r {
            let dot: f64 = (0..a.rows)
                .map(|k| f64::from(a.get(k, i)) * f64::from(a.get(k, j)))
                .sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}
