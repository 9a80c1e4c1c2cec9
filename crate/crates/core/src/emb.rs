//! EMB1 matrix container: magic `EMB1`, `u32` version, `u64` rows, `u64`
//! cols, then `rows·cols` little-endian `f32` values in row-major order.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EMB1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

fn format_error(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

/// Appends the EMB1 encoding of `t` to `out`. Values are rounded to `f32`.
pub fn encode_into(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.len());
    encode_into(t, &mut out);
    out
}

/// Little-endian reader that reports absolute byte offsets.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0, base: 0 }
    }

    /// Offsets in errors are reported relative to `base`.
    pub fn with_base(bytes: &'a [u8], base: usize) -> Self {
        Self { bytes, pos: 0, base }
    }

    pub fn offset(&self) -> usize {
        self.base + self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(format_error(
                self.offset(),
                format!("truncated {what}: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    /// Reads one EMB1 record starting at the current position.
    pub fn matrix(&mut self) -> Result<Tensor> {
        let start = self.offset();
        if self.take(4, "magic")? != MAGIC {
            return Err(format_error(start, "bad magic, expected \"EMB1\""));
        }
        let at = self.offset();
        let version = self.u32("version")?;
        if version != VERSION {
            return Err(format_error(at, format!("unsupported EMB1 version {version}")));
        }
        let at = self.offset();
        let rows = self.u64("row count")?;
        let cols = self.u64("column count")?;
        let count = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| format_error(at, format!("extent {rows}x{cols} overflows")))?;
        let payload_at = self.offset();
        let payload = self.take(count, "payload")?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(format_error(payload_at + 4 * i, "non-finite value"));
        }
        Tensor::new(rows as usize, cols as usize, data)
    }
}

/// Decodes a buffer holding exactly one EMB1 record.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    let t = r.matrix()?;
    if r.remaining() != 0 {
        return Err(format_error(r.offset(), format!("{} trailing bytes", r.remaining())));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::Initializer;

    #[test]
    fn two_by_three_round_trip() {
        let t = Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let bytes = encode(&t);
        assert_eq!(bytes.len(), HEADER_LEN + 24);
        assert_eq!(decode(&bytes).unwrap(), t);
    }

    #[test]
    fn bad_magic_is_rejected_at_offset_zero() {
        let mut bytes = encode(&Tensor::zeros(1, 1));
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let bytes = encode(&Tensor::zeros(2, 2));
        let err = decode(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: HEADER_LEN, .. }), "{err:?}");
    }

    #[test]
    fn overflowing_extent_is_rejected() {
        let mut bytes = encode(&Tensor::zeros(1, 1));
        bytes[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        bytes[16..24].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 8, .. })));
    }

    #[test]
    fn random_matrix_within_f32_quantization() {
        let t = Initializer::new(9).uniform(5, 8, 10.0);
        let back = decode(&encode(&t)).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= a.abs() * f64::powi(2.0, -24));
        }
    }
}
