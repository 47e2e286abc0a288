//! Frame layout shared by every transport.
//!
//! ```text
//! offset  size  field
//! 0       4     length (u32 LE) = 1 + 4 + payload bytes
//! 4       1     tag
//! 5       4     sequence number (u32 LE)
//! 9       ...   payload
//! ```
//!
//! Reduction payloads are little-endian `f32`s.

use std::io::{self, Read};

use super::CommError;

pub const HEADER_LEN: usize = 9;

/// Bytes counted by the length prefix in addition to the payload.
pub const LENGTH_OVERHEAD: u32 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Tag {
    ReduceChunk = 0,
    GatherChunk = 1,
    Barrier = 2,
    Control = 3,
}

impl TryFrom<u8> for Tag {
    type Error = CommError;

    fn try_from(v: u8) -> Result<Self, CommError> {
        Ok(match v {
            0 => Tag::ReduceChunk,
            1 => Tag::GatherChunk,
            2 => Tag::Barrier,
            3 => Tag::Control,
            other => return Err(CommError::Frame(format!("unknown tag {other}"))),
        })
    }
}

impl Tag {
    /// Whether the payload is gradient data (as opposed to handshakes).
    pub fn carries_data(self) -> bool {
        matches!(self, Tag::ReduceChunk | Tag::GatherChunk)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WireFrame {
    pub tag: Tag,
    pub seq: u32,
    pub payload: Vec<u8>,
}

impl WireFrame {
    pub fn new(tag: Tag, seq: u32, payload: Vec<u8>) -> Self {
        Self { tag, seq, payload }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        let len = self.payload.len() as u32 + LENGTH_OVERHEAD;
        out.extend_from_slice(&len.to_le_bytes());
        out.push(self.tag as u8);
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CommError> {
        if bytes.len() < HEADER_LEN {
            return Err(CommError::Frame(format!(
                "short frame: {} bytes",
                bytes.len()
            )));
        }
        let len = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
        if len < LENGTH_OVERHEAD || len as usize != bytes.len() - 4 {
            return Err(CommError::Frame(format!(
                "length field {len} does not match {} trailing bytes",
                bytes.len() - 4
            )));
        }
        let tag = Tag::try_from(bytes[4])?;
        let seq = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
        Ok(Self {
            tag,
            seq,
            payload: bytes[HEADER_LEN..].to_vec(),
        })
    }

    /// Reads one complete encoded frame. `Ok(None)` on a clean EOF before
    /// the first byte.
    pub fn read_encoded<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
        let mut len = [0u8; 4];
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e),
        }
        let body_len = u32::from_le_bytes(len) as usize;
        if body_len < LENGTH_OVERHEAD as usize {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                "frame length too small",
            ));
        }
        let mut buf = vec![0u8; 4 + body_len];
        buf[..4].copy_from_slice(&len);
        r.read_exact(&mut buf[4..])?;
        Ok(Some(buf))
    }
}

pub fn f32s_to_le(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn le_to_f32s(bytes: &[u8]) -> Result<Vec<f32>, CommError> {
    if bytes.len() % 4 != 0 {
        return Err(CommError::Frame(format!(
            "payload of {} bytes is not a whole number of f32s",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let f = WireFrame::new(Tag::GatherChunk, 0x0102_0304, f32s_to_le(&[1.0]));
        let bytes = f.encode();
        assert_eq!(
            bytes,
            vec![9, 0, 0, 0, 1, 4, 3, 2, 1, 0x00, 0x00, 0x80, 0x3f]
        );
        assert_eq!(WireFrame::decode(&bytes).unwrap(), f);
    }

    #[test]
    fn rejects_corrupt_frames() {
        assert!(WireFrame::decode(&[1, 2, 3]).is_err());
        let mut bytes = WireFrame::new(Tag::Barrier, 1, vec![]).encode();
        bytes[0] = 7;
        assert!(WireFrame::decode(&bytes).is_err());
        let mut bytes = WireFrame::new(Tag::Barrier, 1, vec![]).encode();
        bytes[4] = 9;
        assert!(matches!(
            WireFrame::decode(&bytes),
            Err(CommError::Frame(_))
        ));
        assert!(le_to_f32s(&[0, 0, 0]).is_err());
    }

    #[test]
    fn reads_from_stream() {
        let a = WireFrame::new(Tag::ReduceChunk, 3, vec![1, 2, 3, 4]).encode();
        let b = WireFrame::new(Tag::Control, 4, vec![]).encode();
        let joined = [a.clone(), b.clone()].concat();
        let mut cur = std::io::Cursor::new(joined);
        assert_eq!(WireFrame::read_encoded(&mut cur).unwrap(), Some(a));
        assert_eq!(WireFrame::read_encoded(&mut cur).unwrap(), Some(b));
        assert_eq!(WireFrame::read_encoded(&mut cur).unwrap(), None);
    }

    proptest! {
        #[test]
        fn roundtrip(tag in 0u8..4, seq in any::<u32>(), payload in proptest::collection::vec(any::<u8>(), 0..64)) {
            let f = WireFrame::new(Tag::try_from(tag).unwrap(), seq, payload);
            let bytes = f.encode();
            prop_assert_eq!(bytes.len(), f.encoded_len());
            prop_assert_eq!(u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize, f.payload.len() + 5);
            prop_assert_eq!(WireFrame::decode(&bytes).unwrap(), f);
        }
    }
}
