//! Versioned, tagged binary container shared by checkpoints, hardware
//! configurations and calibration stores.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"ITLC"
//! version  u32
//! count    u32                 number of sections
//! repeated count times:
//!   tag    [u8; 4]
//!   len    u64                 payload length in bytes
//!   bytes  [u8; len]
//! ```

use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"ITLC";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a container file (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("truncated container: {0}")]
    Truncated(&'static str),
    #[error("missing section {0:?}")]
    MissingSection(String),
    #[error("malformed section {tag:?}: {reason}")]
    Malformed { tag: String, reason: String },
}

pub type Tag = [u8; 4];

#[derive(Debug, Default, Clone, PartialEq)]
pub struct Container {
    sections: Vec<(Tag, Vec<u8>)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tag: Tag, payload: Vec<u8>) {
        self.sections.push((tag, payload));
    }

    pub fn get(&self, tag: Tag) -> Option<&[u8]> {
        self.sections
            .iter()
            .find(|(t, _)| *t == tag)
            .map(|(_, p)| p.as_slice())
    }

    pub fn require(&self, tag: Tag) -> Result<&[u8], ContainerError> {
        self.get(tag)
            .ok_or_else(|| ContainerError::MissingSection(tag_name(tag)))
    }

    pub fn has(&self, tag: Tag) -> bool {
        self.get(tag).is_some()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (tag, payload) in &self.sections {
            out.extend_from_slice(tag);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let mut r = Reader::new(bytes, "header");
        let magic = r.take(4).map_err(|_| ContainerError::Truncated("header"))?;
        if magic != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let version = r.u32().map_err(|_| ContainerError::Truncated("header"))?;
        if version != VERSION {
            return Err(ContainerError::Version(version));
        }
        let count = r.u32().map_err(|_| ContainerError::Truncated("header"))?;
        let mut sections = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let tag: Tag = r
                .take(4)
                .map_err(|_| ContainerError::Truncated("section tag"))?
                .try_into()
                .expect("4 bytes");
            let len = r
                .u64()
                .map_err(|_| ContainerError::Truncated("section length"))?;
            let payload = r
                .take(len as usize)
                .map_err(|_| ContainerError::Truncated("section payload"))?;
            sections.push((tag, payload.to_vec()));
        }
        Ok(Self { sections })
    }

    pub fn write(&self, path: &Path) -> Result<(), ContainerError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, ContainerError> {
        let bytes = std::fs::read(path).map_err(|source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

pub fn tag_name(tag: Tag) -> String {
    String::from_utf8_lossy(&tag).into_owned()
}

/// Little-endian payload builder.
#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }
    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }
    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn f32(&mut self, v: f32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn f64s(&mut self, v: &[f64]) -> &mut Self {
        for x in v {
            self.f64(*x);
        }
        self
    }
    pub fn str(&mut self, s: &str) -> &mut Self {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
        self
    }
    pub fn finish(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.buf)
    }
}

/// Little-endian payload cursor.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    tag: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], tag: &'static str) -> Self {
        Self { bytes, pos: 0, tag }
    }

    fn malformed(&self, reason: &str) -> ContainerError {
        ContainerError::Malformed {
            tag: self.tag.to_string(),
            reason: reason.to_string(),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.malformed("unexpected end of payload"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16, ContainerError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f32(&mut self) -> Result<f32, ContainerError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64, ContainerError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, ContainerError> {
        (0..n).map(|_| self.f64()).collect()
    }
    pub fn str(&mut self) -> Result<String, ContainerError> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.malformed("invalid utf-8"))
    }
    pub fn finish(&self) -> Result<(), ContainerError> {
        if self.pos != self.bytes.len() {
            return Err(self.malformed("trailing bytes"));
        }
        Ok(())
    }
    pub fn error(&self, reason: &str) -> ContainerError {
        self.malformed(reason)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn sections_survive_serialization(payloads in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..64), 0..6)) {
            let mut c = Container::new();
            for (i, p) in payloads.iter().enumerate() {
                c.push([b'S', b'E', b'C', b'0' + i as u8], p.clone());
            }
            let back = Container::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(back, c);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(
            Container::from_bytes(b"NOPE\x01\0\0\0\0\0\0\0"),
            Err(ContainerError::BadMagic)
        ));
        assert!(matches!(
            Container::from_bytes(b"IT"),
            Err(ContainerError::Truncated(_))
        ));
        let mut c = Container::new();
        c.push(*b"DATA", vec![1, 2, 3]);
        let bytes = c.to_bytes();
        assert!(matches!(
            Container::from_bytes(&bytes[..bytes.len() - 1]),
            Err(ContainerError::Truncated(_))
        ));
        assert!(matches!(
            c.require(*b"NONE"),
            Err(ContainerError::MissingSection(_))
        ));
    }
}
