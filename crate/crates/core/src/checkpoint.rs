//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SPPCKPT1"            8 bytes magic
//! version               u8 (= 1)
//! slot count            u32
//! per slot:
//!   name length         u32
//!   name                UTF-8 bytes
//!   shape               4 x u32 (batch, channels, height, width)
//!   values              f32 x product(shape)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::netgraph::{NetworkSpec, ParameterStore};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"SPPCKPT1";
pub const VERSION: u8 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, params: &ParameterStore<f32>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(params.slots().len() as u32).to_le_bytes())?;
    for slot in params.slots() {
        let name = slot.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        for d in slot.value.shape().dims() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(slot.value.len() * 4);
        for v in slot.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::CorruptCheckpoint(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Raw slot records in file order.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let mut version = [0u8; 1];
    read_exact(&mut r, &mut version, "version")?;
    if version[0] != VERSION {
        return Err(Error::CorruptCheckpoint(format!("unsupported version {}", version[0])));
    }
    let count = read_u32(&mut r, "slot count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u32(&mut r, "name length")? as usize;
        if len > 4096 {
            return Err(Error::CorruptCheckpoint(format!("slot name length {len}")));
        }
        let mut name = vec![0u8; len];
        read_exact(&mut r, &mut name, "slot name")?;
        let name = String::from_utf8(name).map_err(|_| Error::CorruptCheckpoint("slot name is not UTF-8".into()))?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = read_u32(&mut r, "shape")? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = match n {
            Some(n) if n <= 1 << 30 => n,
            _ => return Err(Error::CorruptCheckpoint(format!("slot `{name}` has absurd shape {shape}"))),
        };
        let mut bytes = vec![0u8; n * 4];
        read_exact(&mut r, &mut bytes, "slot values")?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::from_vec(shape, data)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::CorruptCheckpoint("trailing bytes after last slot".into()));
    }
    Ok(out)
}

/// Writes through a temporary file in the same directory, then renames.
pub fn save(path: &Path, params: &ParameterStore<f32>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params)?;
    crate::write_atomic(path, &buf)
}

pub fn load(path: &Path, spec: &NetworkSpec) -> Result<ParameterStore<f32>> {
    let bytes = fs::read(path)?;
    ParameterStore::from_tensors(spec, read_checkpoint(bytes.as_slice())?)
}
