//! Dense f32 tensors, the GEMM kernel every layer is built on, and symmetric
//! per-tensor INT8 quantization.
//!
//! All reductions run in a fixed order (`k` ascending in GEMM) so results are
//! reproducible bit-for-bit across runs, which the partial-inference and
//! degeneracy checks rely on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn shape_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite(data: &[f32], what: &str) -> Result<()> {
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what}: element {pos} is {}", data[pos])));
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape_len(&shape) != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                shape_len(&shape),
                data.len()
            )));
        }
        check_finite(&data, "tensor")?;
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for kernels that already guarantee the invariants.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape_len(&shape), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape_len(&shape);
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape_len(&shape) != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Dimension(format!("expected a matrix, got shape {other:?}"))),
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }
}

fn gemm_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "gemm inner dimensions differ: {m}x{k} times {k2}x{n}"
        )));
    }
    Ok((m, k, n))
}

/// Raw row-major kernel: `c[i][j] = sum_k a[i][k] * b[k][j]`, `k` ascending.
pub(crate) fn gemm_into(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        let out = &mut c[i * n..(i + 1) * n];
        out.iter_mut().for_each(|v| *v = 0.0);
        for (kk, &av) in row.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn gemm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = gemm_dims(a, b)?;
    let mut c = vec![0.0; m * n];
    gemm_into(&a.data, &b.data, &mut c, m, k, n);
    check_finite(&c, "gemm output")?;
    Ok(Tensor::from_parts(vec![m, n], c))
}

/// Output-tiled GEMM. Tiles only partition `i` and `j`; every output element
/// still accumulates over `k` ascending, so the result is bit-identical to
/// [`gemm`].
pub fn gemm_tiled(a: &Tensor, b: &Tensor, tile: usize) -> Result<Tensor> {
    let (m, k, n) = gemm_dims(a, b)?;
    let tile = tile.max(1);
    let mut c = vec![0.0f32; m * n];
    for i0 in (0..m).step_by(tile) {
        for j0 in (0..n).step_by(tile) {
            let i1 = (i0 + tile).min(m);
            let j1 = (j0 + tile).min(n);
            for kk in 0..k {
                for i in i0..i1 {
                    let av = a.data[i * k + kk];
                    for j in j0..j1 {
                        c[i * n + j] += av * b.data[kk * n + j];
                    }
                }
            }
        }
    }
    check_finite(&c, "gemm output")?;
    Ok(Tensor::from_parts(vec![m, n], c))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    data: Vec<i8>,
    scale: f32,
}

impl QuantizedTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i8>, scale: f32) -> Result<Self> {
        if shape_len(&shape) != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                shape_len(&shape),
                data.len()
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Format(format!("quantization scale must be positive, got {scale}")));
        }
        Ok(QuantizedTensor { shape, data, scale })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }
}

pub const INT8_LIMIT: f32 = 127.0;

/// Symmetric per-tensor quantization: `scale = max|x| / 127`, round half to
/// even, clamp to `[-127, 127]`. An all-zero tensor gets `scale = 1`.
pub fn quantize_symmetric(x: &Tensor) -> QuantizedTensor {
    let max = x.max_abs();
    let scale = if max > 0.0 { max / INT8_LIMIT } else { 1.0 };
    let data = x
        .data
        .iter()
        .map(|&v| (v / scale).round_ties_even().clamp(-INT8_LIMIT, INT8_LIMIT) as i8)
        .collect();
    QuantizedTensor { shape: x.shape.clone(), data, scale }
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let data = q.data.iter().map(|&v| v as f32 * q.scale).collect();
    Tensor::from_parts(q.shape.clone(), data)
}

/// Integer GEMM over quantized operands with i32 accumulation, rescaled by the
/// product of the two scales.
pub(crate) fn gemm_i8(
    a: &[i8],
    a_scale: f32,
    b: &[i8],
    b_scale: f32,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f32> {
    let mut acc = vec![0i32; m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk] as i32;
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in acc[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o += av * bv as i32;
            }
        }
    }
    let s = a_scale * b_scale;
    acc.into_iter().map(|v| v as f32 * s).collect()
}
