//! Flat named-tensor container.
//!
//! Layout (little-endian): magic `MTNK`, version `u32`, entry count `u32`,
//! then per entry: name length `u32`, UTF-8 name, rank `u32`, `rank` extents
//! as `u32`, and the `f32` payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MTNK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} exceeds u32")))
}

pub fn write_to(w: &mut impl Write, entries: &[NamedTensor]) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    put_u32(w, to_u32(entries.len(), "entry count")?)?;
    for e in entries {
        if e.shape.iter().product::<usize>() != e.data.len() {
            return Err(Error::Checkpoint(format!("entry {} has inconsistent shape", e.name)));
        }
        put_u32(w, to_u32(e.name.len(), "name length")?)?;
        w.write_all(e.name.as_bytes())?;
        put_u32(w, to_u32(e.shape.len(), "rank")?)?;
        for &d in &e.shape {
            put_u32(w, to_u32(d, "extent")?)?;
        }
        let mut buf = Vec::with_capacity(e.data.len() * 4);
        for v in &e.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_from(r: &mut impl Read) -> Result<Vec<NamedTensor>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let count = get_u32(r)? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = get_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
        let rank = get_u32(r)? as usize;
        let shape = (0..rank).map(|_| get_u32(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push(NamedTensor { name, shape, data });
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &[NamedTensor]) -> Result<()> {
    let mut buf = Vec::new();
    write_to(&mut buf, entries)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = std::fs::read(path)?;
    read_from(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_to(
            &mut buf,
            &[NamedTensor {
                name: "w".into(),
                shape: vec![2],
                data: vec![1.0, -2.0],
            }],
        )
        .unwrap();
        assert_eq!(&buf[..4], b"MTNK");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(buf[16], b'w');
        assert_eq!(&buf[17..21], &1u32.to_le_bytes());
        assert_eq!(&buf[21..25], &2u32.to_le_bytes());
        assert_eq!(&buf[25..29], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 33);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_from(&mut &b"NOPE\x01\x00\x00\x00"[..]).is_err());
        assert!(read_from(&mut &b"MTNK\x02\x00\x00\x00\x00\x00\x00\x00"[..]).is_err());
        assert!(read_from(&mut &b"MTNK\x01\x00\x00\x00\x01\x00\x00\x00"[..]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(entries in proptest::collection::vec(
            ("[a-z.]{1,12}", proptest::collection::vec(1usize..4, 0..4)), 0..5)) {
            let entries: Vec<NamedTensor> = entries.into_iter().enumerate().map(|(i, (name, shape))| {
                let n = shape.iter().product::<usize>();
                NamedTensor { name, shape, data: (0..n).map(|k| (k as f32 + i as f32) * 0.5 - 1.0).collect() }
            }).collect();
            let mut buf = Vec::new();
            write_to(&mut buf, &entries).unwrap();
            prop_assert_eq!(read_from(&mut buf.as_slice()).unwrap(), entries);
        }
    }
}
