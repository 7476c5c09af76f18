//! Sectioned little-endian checkpoint container.
//!
//! Layout: magic `DAQ8CKPT`, `u32` container version, `u32` section count,
//! then per section a `u32` name length, the UTF-8 name, a `u64` payload
//! length and the payload.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::ByteReader;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DAQ8CKPT";
pub const CONTAINER_VERSION: u32 = 1;

pub fn write_container<W: Write>(mut out: W, sections: &[(&str, Vec<u8>)]) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    out.write_all(&(sections.len() as u32).to_le_bytes())?;
    for (name, payload) in sections {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(payload.len() as u64).to_le_bytes())?;
        out.write_all(payload)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads every section; structural problems become checkpoint errors with the byte offset.
pub fn read_container<R: Read>(input: R) -> Result<Vec<(String, Vec<u8>)>> {
    let mut r = ByteReader::new(input);
    let structural = |e: Error| match e {
        Error::Format { offset, message } => Error::Checkpoint(format!("at byte {offset}: {message}")),
        other => other,
    };
    r.expect_magic(CHECKPOINT_MAGIC).map_err(structural)?;
    let version = r.read_u32().map_err(structural)?;
    if version != CONTAINER_VERSION {
        return Err(Error::Checkpoint(format!(
            "container version {version} is not supported (expected {CONTAINER_VERSION})"
        )));
    }
    let count = r.read_u32().map_err(structural)?;
    let mut sections = Vec::with_capacity(count.min(64) as usize);
    for _ in 0..count {
        let len = r.read_u32().map_err(structural)? as usize;
        let name = String::from_utf8(r.read_bytes(len).map_err(structural)?)
            .map_err(|_| Error::Checkpoint(format!("section name near byte {} is not UTF-8", r.offset())))?;
        let size = r.read_u64().map_err(structural)?;
        let payload = r.read_bytes(size as usize).map_err(structural)?;
        sections.push((name, payload));
    }
    r.expect_eof().map_err(structural)?;
    Ok(sections)
}

/// Takes the named section out of `sections`, or explains what is there instead.
pub(crate) fn take_section(sections: &mut Vec<(String, Vec<u8>)>, name: &str) -> Result<Vec<u8>> {
    if let Some(i) = sections.iter().position(|(n, _)| n == name) {
        return Ok(sections.remove(i).1);
    }
    let family = name.split('/').next().unwrap_or(name);
    match sections.iter().find(|(n, _)| n.split('/').next() == Some(family)) {
        Some((other, _)) => Err(Error::Checkpoint(format!("section {other} is not supported (expected {name})"))),
        None => Err(Error::Checkpoint(format!("missing section {name}"))),
    }
}

#[derive(Default)]
pub(crate) struct Payload(pub Vec<u8>);

impl Payload {
    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.u64(v.to_bits())
    }

    /// Length-prefixed float slices.
    pub fn slices<'a>(&mut self, items: impl ExactSizeIterator<Item = &'a [f32]>) -> &mut Self {
        self.0.extend_from_slice(&(items.len() as u32).to_le_bytes());
        for s in items {
            self.u64(s.len() as u64);
            for v in s {
                self.0.extend_from_slice(&v.to_le_bytes());
            }
        }
        self
    }
}

pub(crate) fn read_slices<R: Read>(r: &mut ByteReader<R>) -> Result<Vec<Vec<f32>>> {
    let count = r.read_u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.read_u64()? as usize;
        let mut v = Vec::with_capacity(len.min(1 << 24));
        for _ in 0..len {
            v.push(r.read_f32()?);
        }
        out.push(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_roundtrip() {
        let mut buf = Vec::new();
        write_container(&mut buf, &[("a/v1", vec![1, 2, 3]), ("b/v1", vec![])]).unwrap();
        let mut s = read_container(&buf[..]).unwrap();
        assert_eq!(take_section(&mut s, "b/v1").unwrap(), Vec::<u8>::new());
        assert_eq!(take_section(&mut s, "a/v1").unwrap(), vec![1, 2, 3]);
        assert!(take_section(&mut s, "a/v1").is_err());
    }

    #[test]
    fn version_and_truncation_errors() {
        let mut buf = Vec::new();
        write_container(&mut buf, &[("model/v2", vec![0; 4])]).unwrap();
        let mut s = read_container(&buf[..]).unwrap();
        match take_section(&mut s, "model/v1") {
            Err(Error::Checkpoint(m)) => assert!(m.contains("model/v2")),
            other => panic!("{other:?}"),
        }
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(matches!(read_container(&bad[..]), Err(Error::Checkpoint(_))));
        assert!(matches!(read_container(&buf[..buf.len() - 1]), Err(Error::Checkpoint(_))));
        assert!(matches!(read_container(&b"NOTACKPT"[..]), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn slices_roundtrip() {
        let a = [1.0f32, -2.5];
        let b: [f32; 0] = [];
        let mut p = Payload::default();
        p.slices([&a[..], &b[..]].into_iter()).u64(7);
        let mut r = ByteReader::new(&p.0[..]);
        assert_eq!(read_slices(&mut r).unwrap(), vec![a.to_vec(), vec![]]);
        assert_eq!(r.read_u64().unwrap(), 7);
    }
}
