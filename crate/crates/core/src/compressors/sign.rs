//! 1-bit sign quantization with majority-vote decoding.

use super::CompressError;

/// Packed signs, LSB-first within each byte. A set bit means the element
/// was nonnegative.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignPayload {
    bits: Vec<u8>,
    len: usize,
}

impl SignPayload {
    pub fn byte_len(len: usize) -> usize {
        len.div_ceil(8)
    }

    pub fn from_bytes(bytes: Vec<u8>, len: usize) -> Result<Self, CompressError> {
        if bytes.len() != Self::byte_len(len) {
            return Err(CompressError::Mismatch(format!(
                "{} sign bytes cannot hold exactly {len} elements",
                bytes.len()
            )));
        }
        Ok(Self { bits: bytes, len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bits
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bits
    }

    #[inline]
    pub fn is_nonnegative(&self, i: usize) -> bool {
        self.bits[i / 8] >> (i % 8) & 1 == 1
    }

    /// +1 / -1 per element.
    pub fn signs(&self) -> Vec<f32> {
        (0..self.len)
            .map(|i| if self.is_nonnegative(i) { 1.0 } else { -1.0 })
            .collect()
    }
}

pub fn sign_encode(g: &[f32]) -> SignPayload {
    let mut bits = vec![0u8; SignPayload::byte_len(g.len())];
    for (i, &v) in g.iter().enumerate() {
        // NaN compares false and is treated as negative
        if v >= 0.0 {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    SignPayload { bits, len: g.len() }
}

/// Per-element sign of the vote total; a tied vote decodes to +1.
pub fn sign_majority_decode(payloads: &[SignPayload]) -> Result<Vec<f32>, CompressError> {
    let Some(first) = payloads.first() else {
        return Err(CompressError::Mismatch("no sign payloads to decode".into()));
    };
    let n = first.len;
    if let Some(bad) = payloads.iter().find(|p| p.len != n) {
        return Err(CompressError::Mismatch(format!(
            "sign payload element counts differ: {n} vs {}",
            bad.len
        )));
    }
    Ok((0..n)
        .map(|i| {
            let votes: i64 = payloads
                .iter()
                .map(|p| if p.is_nonnegative(i) { 1 } else { -1 })
                .sum();
            if votes >= 0 {
                1.0
            } else {
                -1.0
            }
        })
        .collect())
}
