//! Little-endian binary codecs: checkpoints (`DCKPT1`) and rasters (`SGEO1`).

mod checkpoint;
mod raster;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use raster::{load_raster, save_raster, Raster, Sidecar};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: &'static str, found: Vec<u8> },
    #[error("truncated while reading {what} at byte {offset}")]
    Truncated { what: &'static str, offset: usize },
    #[error("unknown section at byte {offset}")]
    UnknownSection { offset: usize },
    #[error("{count} unexpected trailing bytes")]
    TrailingBytes { count: usize },
    #[error("invalid field: {0}")]
    Invalid(String),
}

/// Bounds-checked reader over a byte slice.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated { what, offset: self.pos });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn peek(&self, n: usize) -> Option<&'a [u8]> {
        self.buf.get(self.pos..self.pos + n)
    }

    pub fn magic(&mut self, expected: &'static str) -> Result<(), FormatError> {
        let found = self.buf[self.pos..(self.pos + expected.len()).min(self.buf.len())].to_vec();
        if found != expected.as_bytes() {
            return Err(FormatError::BadMagic { expected, found });
        }
        self.pos += expected.len();
        Ok(())
    }

    pub fn u8(&mut self, what: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &'static str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self, what: &'static str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>, FormatError> {
        let bytes = self.take(n.checked_mul(4).ok_or(FormatError::Truncated { what, offset: self.pos })?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn f64s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>, FormatError> {
        let bytes = self.take(n.checked_mul(8).ok_or(FormatError::Truncated { what, offset: self.pos })?, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn name(&mut self) -> Result<String, FormatError> {
        let n = self.u16("name length")? as usize;
        let bytes = self.take(n, "name")?;
        String::from_utf8(bytes.to_vec()).map_err(|_| FormatError::Invalid("name is not UTF-8".into()))
    }
}

pub(crate) fn put_name(out: &mut Vec<u8>, name: &str) -> Result<(), FormatError> {
    let n = u16::try_from(name.len()).map_err(|_| FormatError::Invalid(format!("name too long: {name}")))?;
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    Ok(())
}
