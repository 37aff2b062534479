//! Model checkpoint files.
//!
//! Layout (little endian): `"FCBM"`, u16 version, u16 layer count, u8 input
//! rank and u32 input dims, then per layer: u8 kind, u8 geometry count, u32
//! geometry values, u8 parameter-tensor count, u8 eligibility bitmask, and the
//! parameter tensors as tensor records.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::codec::{
    dim_u32, expect_magic, expect_version, read_tensor, read_u16, read_u32, read_u8, write_tensor,
};
use crate::error::{Error, Result};

use super::{Layer, LayerKind, LayerSpec, Model};

pub const MODEL_MAGIC: &[u8; 4] = b"FCBM";
pub const MODEL_VERSION: u16 = 1;

fn encode_kind(kind: &LayerKind) -> (u8, Vec<usize>) {
    match *kind {
        LayerKind::Dense { in_features, out_features } => (0, vec![in_features, out_features]),
        LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding, in_height, in_width } => (
            1,
            vec![in_channels, out_channels, kernel, stride, padding, in_height, in_width],
        ),
        LayerKind::Relu => (2, vec![]),
        LayerKind::MaxPool2d { kernel, stride } => (3, vec![kernel, stride]),
        LayerKind::Flatten => (4, vec![]),
        LayerKind::SoftmaxHead => (5, vec![]),
    }
}

fn decode_kind(tag: u8, g: &[usize]) -> Result<LayerKind> {
    let want = |n: usize| -> Result<()> {
        if g.len() != n {
            return Err(Error::Format(format!("layer kind {tag} needs {n} geometry values, got {}", g.len())));
        }
        Ok(())
    };
    Ok(match tag {
        0 => {
            want(2)?;
            LayerKind::Dense { in_features: g[0], out_features: g[1] }
        }
        1 => {
            want(7)?;
            LayerKind::Conv2d {
                in_channels: g[0],
                out_channels: g[1],
                kernel: g[2],
                stride: g[3],
                padding: g[4],
                in_height: g[5],
                in_width: g[6],
            }
        }
        2 => {
            want(0)?;
            LayerKind::Relu
        }
        3 => {
            want(2)?;
            LayerKind::MaxPool2d { kernel: g[0], stride: g[1] }
        }
        4 => {
            want(0)?;
            LayerKind::Flatten
        }
        5 => {
            want(0)?;
            LayerKind::SoftmaxHead
        }
        other => return Err(Error::Format(format!("unknown layer kind {other}"))),
    })
}

pub fn write_model<W: Write>(w: &mut W, model: &Model) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    let count = u16::try_from(model.layers().len())
        .map_err(|_| Error::Format("more than 65535 layers".into()))?;
    w.write_all(&count.to_le_bytes())?;
    w.write_all(&[model.input_shape().len() as u8])?;
    for &d in model.input_shape() {
        w.write_all(&dim_u32(d, "input dimension")?.to_le_bytes())?;
    }
    for layer in model.layers() {
        let (tag, geometry) = encode_kind(&layer.spec.kind);
        w.write_all(&[tag, geometry.len() as u8])?;
        for v in geometry {
            w.write_all(&dim_u32(v, "layer geometry")?.to_le_bytes())?;
        }
        let mask = layer
            .eligible
            .iter()
            .enumerate()
            .fold(0u8, |m, (i, &e)| if e { m | (1 << i) } else { m });
        w.write_all(&[layer.params.len() as u8, mask])?;
        for p in &layer.params {
            write_tensor(w, p)?;
        }
    }
    Ok(())
}

pub fn read_model<R: Read>(r: &mut R) -> Result<Model> {
    expect_magic(r, MODEL_MAGIC)?;
    expect_version(r, MODEL_VERSION)?;
    let count = read_u16(r, "layer count")? as usize;
    let rank = read_u8(r, "input rank")? as usize;
    let input_shape = (0..rank)
        .map(|_| read_u32(r, "input dims").map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let tag = read_u8(r, "layer kind")?;
        let n = read_u8(r, "geometry count")? as usize;
        let geometry = (0..n)
            .map(|_| read_u32(r, "layer geometry").map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let kind = decode_kind(tag, &geometry)?;
        let nparams = read_u8(r, "parameter count")? as usize;
        let mask = read_u8(r, "eligibility mask")?;
        let params = (0..nparams).map(|_| read_tensor(r)).collect::<Result<Vec<_>>>()?;
        let eligible = (0..nparams).map(|i| mask & (1 << i) != 0).collect();
        let spec = LayerSpec::new(kind);
        layers.push(Layer { spec, params, eligible });
    }
    Model::new(input_shape, layers)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let mut r = BufReader::new(File::open(path)?);
    read_model(&mut r)
}
