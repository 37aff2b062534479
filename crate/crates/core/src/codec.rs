//! Little-endian binary records shared by checkpoint and importance files.
//!
//! Tensor record: `"FCBU"`, u16 version, u8 dtype (0 = f32, 1 = i8), u8 rank,
//! `rank` u32 dims, payload, then an f32 scale for i8 records.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{QuantizedTensor, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"FCBU";
pub const TENSOR_VERSION: u16 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_I8: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorRecord {
    F32(Tensor),
    I8(QuantizedTensor),
}

fn truncated(e: std::io::Error, what: &str) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Truncated(what.to_string())
    } else {
        Error::Io(e)
    }
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| truncated(e, what))
}

pub(crate) fn read_u8<R: Read>(r: &mut R, what: &str) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b, what)?;
    Ok(b[0])
}

pub(crate) fn read_u16<R: Read>(r: &mut R, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f32<R: Read>(r: &mut R, what: &str) -> Result<f32> {
    Ok(f32::from_bits(read_u32(r, what)?))
}

pub(crate) fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, "magic")?;
    if &b != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&b),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

pub(crate) fn expect_version<R: Read>(r: &mut R, expected: u16) -> Result<()> {
    let found = read_u16(r, "version")?;
    if found != expected {
        return Err(Error::Version { found, expected });
    }
    Ok(())
}

pub(crate) fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

fn write_header<W: Write>(w: &mut W, dtype: u8, shape: &[usize]) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&[dtype])?;
    let rank = u8::try_from(shape.len())
        .map_err(|_| Error::Format(format!("rank {} exceeds 255", shape.len())))?;
    w.write_all(&[rank])?;
    for &d in shape {
        w.write_all(&dim_u32(d, "dimension")?.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    write_header(w, DTYPE_F32, t.shape())?;
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_quantized<W: Write>(w: &mut W, q: &QuantizedTensor) -> Result<()> {
    write_header(w, DTYPE_I8, q.shape())?;
    let bytes: Vec<u8> = q.data().iter().map(|&v| v as u8).collect();
    w.write_all(&bytes)?;
    w.write_all(&q.scale().to_le_bytes())?;
    Ok(())
}

pub fn read_record<R: Read>(r: &mut R) -> Result<TensorRecord> {
    expect_magic(r, TENSOR_MAGIC)?;
    expect_version(r, TENSOR_VERSION)?;
    let dtype = read_u8(r, "tensor dtype")?;
    let rank = read_u8(r, "tensor rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r, "tensor dims")? as usize);
    }
    let n: usize = shape.iter().product();
    match dtype {
        DTYPE_F32 => {
            let mut bytes = vec![0u8; n * 4];
            read_exact(r, &mut bytes, "f32 payload")?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(TensorRecord::F32(Tensor::new(shape, data)?))
        }
        DTYPE_I8 => {
            let mut bytes = vec![0u8; n];
            read_exact(r, &mut bytes, "i8 payload")?;
            let scale = read_f32(r, "i8 scale")?;
            let data = bytes.into_iter().map(|b| b as i8).collect();
            Ok(TensorRecord::I8(QuantizedTensor::new(shape, data, scale)?))
        }
        other => Err(Error::Format(format!("unknown tensor dtype {other}"))),
    }
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    match read_record(r)? {
        TensorRecord::F32(t) => Ok(t),
        TensorRecord::I8(_) => Err(Error::Format("expected an f32 tensor record, found i8".into())),
    }
}
