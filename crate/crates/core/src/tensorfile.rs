//! Binary container shared by checkpoints, corpus image files and binary
//! feature sets.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic  "XGAP"
//! u32    format version
//! u8     payload kind
//! u32    header length, followed by that many bytes of kind-specific header
//! u32    tensor count
//! per tensor:
//!   u32 name length, name bytes (UTF-8)
//!   u32 rank, rank × u64 dims
//!   numel × f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"XGAP";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum PayloadKind {
    Checkpoint = 1,
    Images = 2,
    Features = 3,
}

impl PayloadKind {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            1 => Ok(Self::Checkpoint),
            2 => Ok(Self::Images),
            3 => Ok(Self::Features),
            other => Err(Error::Format(format!("unknown payload kind {other}"))),
        }
    }
}

/// Decoded container contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub kind: PayloadKind,
    pub header: Vec<u8>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Bundle {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))
    }
}

pub fn write_bundle<W: Write>(mut w: W, bundle: &Bundle) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[bundle.kind as u8])?;
    write_u32(&mut w, bundle.header.len())?;
    w.write_all(&bundle.header)?;
    write_u32(&mut w, bundle.tensors.len())?;
    for (name, t) in &bundle.tensors {
        write_u32(&mut w, name.len())?;
        w.write_all(name.as_bytes())?;
        write_u32(&mut w, t.shape().len())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_bundle<R: Read>(mut r: R) -> Result<Bundle> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let mut kind = [0u8; 1];
    read_exact(&mut r, &mut kind)?;
    let kind = PayloadKind::from_byte(kind[0])?;
    let header_len = read_u32(&mut r)? as usize;
    let header = read_vec(&mut r, header_len)?;
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let name = String::from_utf8(read_vec(&mut r, name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("tensor {name:?} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0 && n < (1 << 32))
            .ok_or_else(|| Error::Format(format!("tensor {name:?} has bad shape {shape:?}")))?;
        let raw = read_vec(&mut r, numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok(Bundle {
        kind,
        header,
        tensors,
    })
}

pub fn save(path: &Path, bundle: &Bundle) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_bundle(&mut w, bundle)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Bundle> {
    read_bundle(BufReader::new(File::open(path)?))
}

fn write_u32<W: Write>(w: &mut W, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Format(format!("length {n} overflows u32")))?;
    w.write_all(&n.to_le_bytes())?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_vec<R: Read>(r: &mut R, len: usize) -> Result<Vec<u8>> {
    let mut v = Vec::new();
    r.take(len as u64).read_to_end(&mut v)?;
    if v.len() != len {
        return Err(Error::Format("truncated file".into()));
    }
    Ok(v)
}
