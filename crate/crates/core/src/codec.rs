//! Versioned little-endian binary blobs used for every simulated transfer.
//!
//! Layout of every blob:
//!
//! | offset | size | field                      |
//! |--------|------|----------------------------|
//! | 0      | 4    | magic `LCFL`               |
//! | 4      | 1    | format version (`1`)       |
//! | 5      | 1    | payload type tag           |
//! | 6      | ..   | payload, little-endian     |
//!
//! Payload layouts are documented next to each type's encoder.

use crate::error::{LcflError, Result};

pub const MAGIC: [u8; 4] = *b"LCFL";
pub const VERSION: u8 = 1;

pub mod tag {
    pub const LOGISTIC: u8 = 0x01;
    pub const MLP: u8 = 0x02;
    pub const STUMPS: u8 = 0x03;
    pub const GMM: u8 = 0x10;
    pub const KDE: u8 = 0x11;
}

pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(tag: u8) -> Self {
        let mut buf = Vec::with_capacity(64);
        buf.extend_from_slice(&MAGIC);
        buf.push(VERSION);
        buf.push(tag);
        Self { buf }
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: usize) -> &mut Self {
        let v = u32::try_from(v).expect("length exceeds u32");
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64s(&mut self, vs: &[f64]) -> &mut Self {
        for &v in vs {
            self.f64(v);
        }
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Validates the header and returns the reader together with the type tag.
    pub fn open(buf: &'a [u8]) -> Result<(Self, u8)> {
        if buf.len() < 6 {
            return Err(LcflError::Decode(format!(
                "blob of {} bytes is shorter than the 6-byte header",
                buf.len()
            )));
        }
        if buf[..4] != MAGIC {
            return Err(LcflError::Decode("bad magic".into()));
        }
        if buf[4] != VERSION {
            return Err(LcflError::Decode(format!("unsupported version {}", buf[4])));
        }
        Ok((Self { buf, pos: 6 }, buf[5]))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(LcflError::Decode(format!(
                "truncated: need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    pub fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        // bound the allocation by what is actually present
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(LcflError::Decode(format!(
                "truncated: {n} floats declared, {} bytes left",
                self.buf.len() - self.pos
            )));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(LcflError::Decode(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_checks() {
        assert!(Reader::open(b"LCF").is_err());
        assert!(Reader::open(b"XXXX\x01\x01").is_err());
        assert!(Reader::open(b"LCFL\x09\x01").is_err());
        let (r, tag) = Reader::open(b"LCFL\x01\x02").unwrap();
        assert_eq!(tag, 2);
        r.finish().unwrap();
    }

    #[test]
    fn truncation_and_trailing() {
        let mut w = Writer::new(7);
        w.u32(3).f64(1.5);
        let bytes = w.finish();
        let (mut r, _) = Reader::open(&bytes[..bytes.len() - 1]).unwrap();
        assert_eq!(r.u32().unwrap(), 3);
        assert!(r.f64().is_err());
        let (mut r, _) = Reader::open(&bytes).unwrap();
        r.u32().unwrap();
        assert!(r.finish().is_err());
    }
}
