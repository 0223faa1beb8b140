//! Little-endian binary encoding shared by the on-disk formats.
//!
//! The reader tracks its byte offset so that parse failures can point at the
//! exact location of the problem.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("unexpected end of data at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("bad magic at byte 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported version {found} (expected {expected})")]
    Version { expected: u16, found: u16 },
    #[error("invalid data at byte {offset}: {reason}")]
    Invalid { offset: usize, reason: String },
}

#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    /// u32 length prefix followed by UTF-8 bytes.
    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    /// u64 length prefix followed by the section payload.
    pub fn section(&mut self, payload: &[u8]) {
        self.u64(payload.len() as u64);
        self.bytes(payload);
    }
}

#[derive(Debug, Clone)]
pub struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    /// Absolute offset of `data[0]` within the enclosing file.
    base: usize,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0, base: 0 }
    }

    pub fn offset(&self) -> usize {
        self.base + self.pos
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.data.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.remaining() < n {
            return Err(DecodeError::Truncated {
                offset: self.offset(),
                needed: n - self.remaining(),
            });
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<(), DecodeError> {
        let found = self.take(4).map_err(|_| DecodeError::BadMagic {
            expected: String::from_utf8_lossy(expected).into_owned(),
            found: String::from_utf8_lossy(self.data).into_owned(),
        })?;
        if found != expected {
            return Err(DecodeError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    pub fn version(&mut self, expected: u16) -> Result<(), DecodeError> {
        let found = self.u16()?;
        if found != expected {
            return Err(DecodeError::Version { expected, found });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn i64(&mut self) -> Result<i64, DecodeError> {
        Ok(i64::from_le_bytes(self.array()?))
    }

    pub fn f32(&mut self) -> Result<f32, DecodeError> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64, DecodeError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    /// A u32 count that will be used to size an allocation of `elem_size`-byte
    /// items; rejected if the remaining data cannot possibly hold it.
    pub fn count(&mut self, elem_size: usize) -> Result<usize, DecodeError> {
        let at = self.offset();
        let n = self.u32()? as usize;
        if n.saturating_mul(elem_size.max(1)) > self.remaining() {
            return Err(DecodeError::Truncated {
                offset: at,
                needed: n * elem_size.max(1) - self.remaining(),
            });
        }
        Ok(n)
    }

    pub fn str(&mut self) -> Result<String, DecodeError> {
        let len = self.u32()? as usize;
        let at = self.offset();
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| DecodeError::Invalid {
            offset: at,
            reason: "string is not valid UTF-8".into(),
        })
    }

    /// Reads a u64-length-prefixed section and returns a reader over it whose
    /// offsets stay absolute.
    pub fn section(&mut self) -> Result<Reader<'a>, DecodeError> {
        let len = self.u64()?;
        let len = usize::try_from(len).map_err(|_| DecodeError::Invalid {
            offset: self.offset() - 8,
            reason: "section length overflows".into(),
        })?;
        let base = self.offset();
        let data = self.take(len)?;
        Ok(Reader { data, pos: 0, base })
    }

    pub fn invalid(&self, reason: impl Into<String>) -> DecodeError {
        DecodeError::Invalid {
            offset: self.offset(),
            reason: reason.into(),
        }
    }

    pub fn expect_end(&self) -> Result<(), DecodeError> {
        if self.is_at_end() {
            Ok(())
        } else {
            Err(self.invalid(format!("{} trailing bytes", self.remaining())))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn section_offsets_are_absolute() {
        let mut w = Writer::new();
        w.bytes(b"ABCD");
        let mut inner = Writer::new();
        inner.u32(7);
        w.section(&inner.into_bytes());
        let bytes = w.into_bytes();

        let mut r = Reader::new(&bytes);
        r.magic(b"ABCD").unwrap();
        let mut s = r.section().unwrap();
        assert_eq!(s.offset(), 12);
        assert_eq!(s.u32().unwrap(), 7);
        let err = s.u32().unwrap_err();
        assert_eq!(err, DecodeError::Truncated { offset: 16, needed: 4 });
    }

    #[test]
    fn oversized_count_rejected() {
        let mut w = Writer::new();
        w.u32(1_000_000);
        let bytes = w.into_bytes();
        let mut r = Reader::new(&bytes);
        assert!(matches!(r.count(8), Err(DecodeError::Truncated { offset: 0, .. })));
    }
}
