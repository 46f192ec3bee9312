//! Binary parameter files.
//!
//! Layout (little-endian): magic `ADRN`, `u32` format version, `u32` blob
//! count, then per blob: `u32` name length, UTF-8 name, `u32` rank, `u64`
//! per dimension, and the `f64` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rnn::RnnParams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ADRN";
pub const VERSION: u32 = 1;

pub fn write_checkpoint(params: &RnnParams, mut w: impl Write) -> Result<()> {
    let names = params.names();
    let tensors = params.tensors();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(names.len() as u32).to_le_bytes())?;
    for (name, t) in names.iter().zip(tensors) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read, what: &'static str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::UnexpectedEof(what),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

const MAX_NAME: usize = 256;
const MAX_VALUES: u64 = 1 << 32;

pub fn read_checkpoint(mut r: impl Read) -> Result<RnnParams> {
    let magic = take::<4>(&mut r, "checkpoint header")?;
    if &magic != MAGIC {
        return Err(Error::BadMagic { expected: u32::from_be_bytes(*MAGIC), found: u32::from_be_bytes(magic) });
    }
    let version = u32::from_le_bytes(take(&mut r, "checkpoint header")?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut r, "checkpoint header")?) as usize;
    let mut named = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let len = u32::from_le_bytes(take(&mut r, "blob name")?) as usize;
        if len > MAX_NAME {
            return Err(Error::Format(format!("blob name of {len} bytes")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| Error::UnexpectedEof("blob name"))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("blob name is not UTF-8".into()))?;
        let rank = u32::from_le_bytes(take(&mut r, "blob shape")?) as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::Format(format!("{name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut total: u64 = 1;
        for _ in 0..rank {
            let d = u64::from_le_bytes(take(&mut r, "blob shape")?);
            total = total.saturating_mul(d);
            shape.push(d as usize);
        }
        if total > MAX_VALUES {
            return Err(Error::Format(format!("{name}: {total} values")));
        }
        let mut data = Vec::with_capacity(total as usize);
        for _ in 0..total {
            data.push(f64::from_le_bytes(take(&mut r, "blob values")?));
        }
        named.push((name, Tensor::new(shape, data)?));
    }
    RnnParams::from_named(named)
}

pub fn save_checkpoint(params: &RnnParams, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(params, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<RnnParams> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
