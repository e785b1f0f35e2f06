//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "KBVQCKPT"
//! version  u32      1
//! precision u8      0 = f64, 1 = f32
//! step     u64      optimizer step counter
//! count    u32      number of entries
//! entry*:
//!   name_len u32, name (utf-8)
//!   flags    u8     bit 0 trainable
//!   rows u64, cols u64
//!   values   rows*cols f64, row-major
//!   if trainable: first moments, then second moments (rows*cols f64 each)
//! ```
//! All integers and floats are little-endian. Values are stored as raw
//! IEEE-754 bits, so a save/load cycle is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{NumError, Result};
use crate::params::{Moments, Parameter, ParameterStore};
use crate::tensor::{Precision, Tensor};

const MAGIC: &[u8; 8] = b"KBVQCKPT";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(store: &ParameterStore, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&[match store.precision() {
        Precision::F64 => 0u8,
        Precision::F32 => 1u8,
    }])?;
    w.write_all(&store.step().to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for id in store.ids() {
        let p = store.get(id);
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[u8::from(p.trainable)])?;
        w.write_all(&(p.value.rows() as u64).to_le_bytes())?;
        w.write_all(&(p.value.cols() as u64).to_le_bytes())?;
        write_f64s(&mut w, p.value.data())?;
        if let Some(m) = store.moments(id) {
            write_f64s(&mut w, &m.first)?;
            write_f64s(&mut w, &m.second)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParameterStore> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NumError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(NumError::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let precision = match read_u8(&mut r)? {
        0 => Precision::F64,
        1 => Precision::F32,
        other => return Err(NumError::Checkpoint(format!("unknown precision tag {other}"))),
    };
    let step = read_u64(&mut r)?;
    let count = read_u32(&mut r)? as usize;
    let mut params = Vec::with_capacity(count);
    let mut moments = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| NumError::Checkpoint("parameter name is not utf-8".into()))?;
        let trainable = read_u8(&mut r)? & 1 == 1;
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| NumError::Checkpoint(format!("shape overflow for `{name}`")))?;
        let value = Tensor::new(rows, cols, read_f64s(&mut r, n)?)
            .map_err(|e| NumError::Checkpoint(format!("`{name}`: {e}")))?;
        let m = if trainable {
            Some(Moments {
                first: read_f64s(&mut r, n)?,
                second: read_f64s(&mut r, n)?,
            })
        } else {
            None
        };
        params.push(Parameter {
            name,
            value,
            grad: None,
            trainable,
        });
        moments.push(m);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(NumError::Checkpoint("trailing bytes after last entry".into()));
    }
    ParameterStore::from_checkpoint_parts(params, moments, step, precision)
}

pub fn save(store: &ParameterStore, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(store, BufWriter::new(File::create(path)?))
}

pub fn load(path: impl AsRef<Path>) -> Result<ParameterStore> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_bits().to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect())
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
