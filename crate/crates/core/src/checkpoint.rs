//! Sectioned little-endian container used for model checkpoints, training
//! checkpoints and descriptor indexes.
//!
//! Layout: 4-byte magic, `u32` version, then any number of sections, each
//! `[u8; 4]` tag, `u64` payload length, payload.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub tag: [u8; 4],
    pub payload: Vec<u8>,
}

impl Section {
    pub fn new(tag: &[u8; 4], payload: Vec<u8>) -> Self {
        Self { tag: *tag, payload }
    }

    pub fn tag_str(&self) -> String {
        String::from_utf8_lossy(&self.tag).into_owned()
    }
}

pub fn write_container<W: Write>(mut w: W, magic: &[u8; 4], sections: &[Section]) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    for s in sections {
        w.write_all(&s.tag)?;
        w.write_all(&(s.payload.len() as u64).to_le_bytes())?;
        w.write_all(&s.payload)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_container<R: Read>(mut r: R, magic: &[u8; 4]) -> Result<Vec<Section>> {
    let mut head = [0u8; 8];
    r.read_exact(&mut head)
        .map_err(|_| Error::Format("file too short for a container header".into()))?;
    if &head[..4] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&head[..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    let mut sections = Vec::new();
    let mut at = 0usize;
    while at < rest.len() {
        if rest.len() - at < 12 {
            return Err(Error::Format("truncated section header".into()));
        }
        let tag: [u8; 4] = rest[at..at + 4].try_into().unwrap();
        let len = u64::from_le_bytes(rest[at + 4..at + 12].try_into().unwrap()) as usize;
        at += 12;
        if rest.len() - at < len {
            return Err(Error::Format(format!(
                "section {} truncated",
                String::from_utf8_lossy(&tag)
            )));
        }
        sections.push(Section { tag, payload: rest[at..at + len].to_vec() });
        at += len;
    }
    Ok(sections)
}

pub fn f64s_to_bytes(v: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(v.len() * 8);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn bytes_to_f64s(b: &[u8]) -> Result<Vec<f64>> {
    if !b.len().is_multiple_of(8) {
        return Err(Error::Format("float payload length not a multiple of 8".into()));
    }
    Ok(b.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Cursor over a byte payload with typed little-endian reads.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, at: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::Format("unexpected end of payload".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        bytes_to_f64s(self.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?)
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8".into()))
    }

    pub fn is_done(&self) -> bool {
        self.at == self.buf.len()
    }
}

pub(crate) fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip() {
        let sections = vec![
            Section::new(b"META", b"{}".to_vec()),
            Section::new(b"PROJ", f64s_to_bytes(&[1.0, -2.5, f64::MIN_POSITIVE])),
        ];
        let mut buf = Vec::new();
        write_container(&mut buf, b"TEST", &sections).unwrap();
        assert_eq!(read_container(buf.as_slice(), b"TEST").unwrap(), sections);
        assert!(read_container(buf.as_slice(), b"NOPE").is_err());
        assert!(read_container(&buf[..buf.len() - 1], b"TEST").is_err());
    }
}
