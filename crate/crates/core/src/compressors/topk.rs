//! Top-k sparsification with a sampled threshold search.
//!
//! A magnitude threshold is binary-searched on a uniform sample of the
//! input until the estimated number of entries above it lands in
//! `[k, ceil(1.5 k)]`. Only the entries above the threshold are then
//! ranked, so the final sort touches a small candidate set instead of the
//! whole vector.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::CompressError;

/// Minimum number of sampled magnitudes.
pub const MIN_SAMPLE: usize = 64;
pub const DEFAULT_MAX_ROUNDS: u32 = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct SparsePayload {
    pub indices: Vec<u32>,
    pub values: Vec<f32>,
}

impl SparsePayload {
    pub fn k(&self) -> usize {
        self.indices.len()
    }

    pub fn byte_len(k: usize) -> usize {
        8 * k
    }

    /// `k` little-endian u32 indices followed by `k` little-endian f32
    /// values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::byte_len(self.k()));
        for i in &self.indices {
            out.extend_from_slice(&i.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], k: usize) -> Result<Self, CompressError> {
        if bytes.len() != Self::byte_len(k) {
            return Err(CompressError::Mismatch(format!(
                "sparse payload of {} bytes, expected {} for k={k}",
                bytes.len(),
                Self::byte_len(k)
            )));
        }
        let (idx, val) = bytes.split_at(4 * k);
        Ok(Self {
            indices: idx
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            values: val
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        })
    }

    /// Dense vector of length `n` holding the selected values.
    pub fn densify(&self, n: usize) -> Result<Vec<f32>, CompressError> {
        let mut out = vec![0.0; n];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            *out.get_mut(i as usize).ok_or_else(|| {
                CompressError::Mismatch(format!("index {i} out of range for length {n}"))
            })? = v;
        }
        Ok(out)
    }
}

/// Selects `k` entries of `g` with the largest magnitudes (ties broken by
/// ascending index), returned in ascending index order.
///
/// `sample_fraction` controls how many magnitudes feed the threshold
/// search (`max(64, ceil(fraction * n))`); `max_rounds` caps the binary
/// search. An all-zero input selects the first `k` indices.
pub fn topk_encode(
    g: &[f32],
    k: usize,
    sample_fraction: f64,
    max_rounds: u32,
    seed: u64,
) -> Result<SparsePayload, CompressError> {
    let n = g.len();
    if k == 0 || k > n {
        return Err(CompressError::Config(format!("k={k} must be in 1..={n}")));
    }
    if !(sample_fraction > 0.0 && sample_fraction <= 1.0) {
        return Err(CompressError::Config(format!(
            "sample fraction {sample_fraction} must be in (0, 1]"
        )));
    }

    let threshold = sampled_threshold(g, k, sample_fraction, max_rounds, seed);
    let mut candidates: Vec<u32> = (0..n as u32)
        .filter(|&i| g[i as usize].abs() >= threshold)
        .collect();
    if candidates.len() < k {
        // The sample overestimated the tail; rank everything.
        candidates = (0..n as u32).collect();
    }
    let by_magnitude = |a: &u32, b: &u32| {
        g[*b as usize]
            .abs()
            .total_cmp(&g[*a as usize].abs())
            .then(a.cmp(b))
    };
    if candidates.len() > k {
        candidates.select_nth_unstable_by(k - 1, by_magnitude);
        candidates.truncate(k);
    }
    candidates.sort_unstable();
    let values = candidates.iter().map(|&i| g[i as usize]).collect();
    Ok(SparsePayload {
        indices: candidates,
        values,
    })
}

fn sampled_threshold(g: &[f32], k: usize, sample_fraction: f64, max_rounds: u32, seed: u64) -> f32 {
    let n = g.len();
    let want = ((sample_fraction * n as f64).ceil() as usize).max(MIN_SAMPLE);
    let sample: Vec<f32> = if want >= n {
        g.iter().map(|v| v.abs()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        index::sample(&mut rng, n, want)
            .into_iter()
            .map(|i| g[i].abs())
            .collect()
    };
    let scale = n as f64 / sample.len() as f64;
    let estimate = |t: f32| sample.iter().filter(|&&m| m >= t).count() as f64 * scale;
    let lo_target = k as f64;
    let hi_target = (1.5 * k as f64).ceil();

    let max_mag = g.iter().map(|v| v.abs()).fold(0.0f32, f32::max);
    let (mut lo, mut hi) = (0.0f32, max_mag);
    for _ in 0..max_rounds {
        let mid = lo + (hi - lo) / 2.0;
        if mid <= lo || mid >= hi {
            break;
        }
        let c = estimate(mid);
        if c >= lo_target && c <= hi_target {
            return mid;
        }
        if c > hi_target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Mean of all workers' sparse contributions as a dense vector.
pub fn topk_decode(gathered: &[SparsePayload], n: usize) -> Result<Vec<f32>, CompressError> {
    if gathered.is_empty() {
        return Err(CompressError::Mismatch(
            "no sparse payloads to decode".into(),
        ));
    }
    let mut acc = vec![0f64; n];
    for payload in gathered {
        if payload.indices.len() != payload.values.len() {
            return Err(CompressError::Mismatch(
                "index/value length mismatch".into(),
            ));
        }
        for (&i, &v) in payload.indices.iter().zip(&payload.values) {
            let slot = acc.get_mut(i as usize).ok_or_else(|| {
                CompressError::Mismatch(format!("index {i} out of range for length {n}"))
            })?;
            *slot += f64::from(v);
        }
    }
    let p = gathered.len() as f64;
    Ok(acc.into_iter().map(|v| (v / p) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_normal;
    use proptest::prelude::*;

    /// Full sort by (magnitude desc, index asc).
    fn exact_topk(g: &[f32], k: usize) -> Vec<u32> {
        let mut idx: Vec<u32> = (0..g.len() as u32).collect();
        idx.sort_by(|a, b| {
            g[*b as usize]
                .abs()
                .partial_cmp(&g[*a as usize].abs())
                .unwrap()
                .then(a.cmp(b))
        });
        idx.truncate(k);
        idx.sort();
        idx
    }

    #[test]
    fn exact_at_full_sampling() {
        let p = topk_encode(&[0.1, -5.0, 3.0, 0.2], 2, 1.0, DEFAULT_MAX_ROUNDS, 0).unwrap();
        assert_eq!(p.indices, vec![1, 2]);
        assert_eq!(p.values, vec![-5.0, 3.0]);
    }

    #[test]
    fn sampled_selection_overlaps_exact() {
        let g = seeded_normal(100_000, 1, 42).into_data();
        let p = topk_encode(&g, 100, 0.01, DEFAULT_MAX_ROUNDS, 7).unwrap();
        let exact = exact_topk(&g, 100);
        let overlap = p
            .indices
            .iter()
            .filter(|i| exact.binary_search(i).is_ok())
            .count();
        assert!(overlap >= 90, "overlap {overlap}");
        assert_eq!(p.k(), 100);
        assert!(p.indices.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn all_zero_selects_leading_indices() {
        let p = topk_encode(&[0.0; 10], 3, 0.5, DEFAULT_MAX_ROUNDS, 1).unwrap();
        assert_eq!(p.indices, vec![0, 1, 2]);
        assert_eq!(p.values, vec![0.0; 3]);
    }

    #[test]
    fn invalid_arguments() {
        assert!(topk_encode(&[1.0, 2.0], 3, 1.0, 8, 0).is_err());
        assert!(topk_encode(&[1.0, 2.0], 0, 1.0, 8, 0).is_err());
        assert!(topk_encode(&[1.0, 2.0], 1, 0.0, 8, 0).is_err());
    }

    #[test]
    fn decode_averages_overlap() {
        let a = SparsePayload {
            indices: vec![0],
            values: vec![1.0],
        };
        let b = SparsePayload {
            indices: vec![0],
            values: vec![3.0],
        };
        assert_eq!(topk_decode(&[a, b], 3).unwrap(), vec![2.0, 0.0, 0.0]);
        let bad = SparsePayload {
            indices: vec![5],
            values: vec![1.0],
        };
        assert!(topk_decode(&[bad], 3).is_err());
    }

    #[test]
    fn byte_layout() {
        let p = SparsePayload {
            indices: vec![1, 258],
            values: vec![1.0, -2.0],
        };
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..8], &[1, 0, 0, 0, 2, 1, 0, 0]);
        assert_eq!(SparsePayload::from_bytes(&bytes, 2).unwrap(), p);
        assert!(SparsePayload::from_bytes(&bytes, 3).is_err());
    }

    proptest! {
        #[test]
        fn full_sampling_matches_exact_sort(
            g in proptest::collection::vec(-4i8..4, 1..200),
            kfrac in 0.0f64..1.0,
            seed in any::<u64>(),
        ) {
            // small integer range forces many ties
            let g: Vec<f32> = g.into_iter().map(f32::from).collect();
            let k = ((kfrac * g.len() as f64) as usize).clamp(1, g.len());
            let p = topk_encode(&g, k, 1.0, u32::MAX, seed).unwrap();
            prop_assert_eq!(p.indices, exact_topk(&g, k));
        }

        #[test]
        fn always_returns_k_sorted(n in 1usize..3000, kfrac in 0.0f64..0.2, frac in 0.001f64..1.0, seed in any::<u64>()) {
            let g = seeded_normal(n, 1, seed).into_data();
            let k = ((kfrac * n as f64) as usize).clamp(1, n);
            let p = topk_encode(&g, k, frac, DEFAULT_MAX_ROUNDS, seed).unwrap();
            prop_assert_eq!(p.k(), k);
            prop_assert!(p.indices.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(p.indices.iter().all(|&i| (i as usize) < n));
        }
    }
}
