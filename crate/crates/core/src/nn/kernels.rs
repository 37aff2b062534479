// Per-sample layer kernels. Dense and convolution both lower to the GEMM in
// `tensor`, so their summation order is fixed.

use crate::error::Result;
use crate::tensor::{gemm_i8, gemm_into, quantize_symmetric, QuantizedTensor, Tensor};

use super::{Layer, LayerKind};

pub(crate) struct Im2Col {
    cols: Vec<f32>,
    rows: usize,
    positions: usize,
    out_h: usize,
    out_w: usize,
}

fn out_dim(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding - kernel) / stride + 1
}

/// `[C, H, W]` into a `[C*k*k, OH*OW]` patch matrix.
pub(crate) fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Im2Col {
    let out_h = out_dim(h, k, stride, pad);
    let out_w = out_dim(w, k, stride, pad);
    let rows = c * k * k;
    let positions = out_h * out_w;
    let mut cols = vec![0.0; rows * positions];
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let r = (ch * k + ki) * k + kj;
                for oh in 0..out_h {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..out_w {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        cols[r * positions + oh * out_w + ow] =
                            x[(ch * h + ih as usize) * w + iw as usize];
                    }
                }
            }
        }
    }
    Im2Col { cols, rows, positions, out_h, out_w }
}

fn col2im(
    cols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f32> {
    let out_h = out_dim(h, k, stride, pad);
    let out_w = out_dim(w, k, stride, pad);
    let positions = out_h * out_w;
    let mut x = vec![0.0; c * h * w];
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let r = (ch * k + ki) * k + kj;
                for oh in 0..out_h {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..out_w {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        x[(ch * h + ih as usize) * w + iw as usize] += cols[r * positions + oh * out_w + ow];
                    }
                }
            }
        }
    }
    x
}

/// Weights pre-quantized for the INT8 path, one entry per layer position.
pub(crate) type QuantizedWeights = Vec<Option<QuantizedTensor>>;

pub(crate) fn quantize_weights(layers: &[Layer]) -> QuantizedWeights {
    layers
        .iter()
        .map(|l| if l.spec.has_params() { Some(quantize_symmetric(&l.params[0])) } else { None })
        .collect()
}

fn add_bias_rows(y: &mut [f32], bias: &[f32], positions: usize) {
    for (oc, b) in bias.iter().enumerate() {
        for v in &mut y[oc * positions..(oc + 1) * positions] {
            *v += *b;
        }
    }
}

/// Forward one layer on one sample. `qweight` selects the INT8 path for
/// parameterized layers; activations are then quantized per tensor on entry.
pub(crate) fn forward_layer(
    layer: &Layer,
    x: &Tensor,
    out_shape: &[usize],
    qweight: Option<&QuantizedTensor>,
) -> Result<Tensor> {
    let data = match layer.spec.kind {
        LayerKind::Dense { in_features, out_features } => {
            let mut y = match qweight {
                None => {
                    let mut y = vec![0.0; out_features];
                    gemm_into(x.data(), layer.weight().data(), &mut y, 1, in_features, out_features);
                    y
                }
                Some(qw) => {
                    let qx = quantize_symmetric(x);
                    gemm_i8(qx.data(), qx.scale(), qw.data(), qw.scale(), 1, in_features, out_features)
                }
            };
            for (v, b) in y.iter_mut().zip(layer.bias().data()) {
                *v += *b;
            }
            y
        }
        LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding, in_height, in_width } => {
            let mut y = vec![0.0; out_channels * out_shape[1] * out_shape[2]];
            match qweight {
                None => {
                    let ic = im2col(x.data(), in_channels, in_height, in_width, kernel, stride, padding);
                    gemm_into(layer.weight().data(), &ic.cols, &mut y, out_channels, ic.rows, ic.positions);
                    add_bias_rows(&mut y, layer.bias().data(), ic.positions);
                }
                Some(qw) => {
                    let qx = quantize_symmetric(x);
                    let as_f32: Vec<f32> = qx.data().iter().map(|&v| v as f32).collect();
                    let ic = im2col(&as_f32, in_channels, in_height, in_width, kernel, stride, padding);
                    let cols: Vec<i8> = ic.cols.iter().map(|&v| v as i8).collect();
                    y = gemm_i8(qw.data(), qw.scale(), &cols, qx.scale(), out_channels, ic.rows, ic.positions);
                    add_bias_rows(&mut y, layer.bias().data(), ic.positions);
                }
            }
            y
        }
        LayerKind::Relu => x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        LayerKind::MaxPool2d { kernel, stride } => {
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let mut y = vec![0.0; c * oh * ow];
            for ch in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        for di in 0..kernel {
                            for dj in 0..kernel {
                                let v = x.data()[(ch * h + i * stride + di) * w + j * stride + dj];
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                        y[(ch * oh + i) * ow + j] = best;
                    }
                }
            }
            y
        }
        LayerKind::Flatten | LayerKind::SoftmaxHead => x.data().to_vec(),
    };
    Tensor::new(out_shape.to_vec(), data)
}

/// Backward through one layer for one sample.
///
/// `x` is the layer input and `g` the gradient with respect to its output.
/// Returns the parameter gradients (empty for activation layers) and, when
/// `want_input` is set, the gradient with respect to `x`.
pub(crate) fn backward_layer(
    layer: &Layer,
    x: &Tensor,
    g: &Tensor,
    want_input: bool,
) -> (Vec<Tensor>, Option<Tensor>) {
    match layer.spec.kind {
        LayerKind::Dense { in_features, out_features } => {
            let gd = g.data();
            let mut dw = vec![0.0; in_features * out_features];
            for (i, &xi) in x.data().iter().enumerate() {
                for (o, &gj) in dw[i * out_features..(i + 1) * out_features].iter_mut().zip(gd) {
                    *o = xi * gj;
                }
            }
            let dx = want_input.then(|| {
                let w = layer.weight().data();
                let dx = (0..in_features)
                    .map(|i| {
                        let row = &w[i * out_features..(i + 1) * out_features];
                        row.iter().zip(gd).fold(0.0f32, |s, (a, b)| s + a * b)
                    })
                    .collect();
                Tensor::from_parts(vec![in_features], dx)
            });
            let grads = vec![
                Tensor::from_parts(vec![in_features, out_features], dw),
                Tensor::from_parts(vec![out_features], gd.to_vec()),
            ];
            (grads, dx)
        }
        LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding, in_height, in_width } => {
            let ic = im2col(x.data(), in_channels, in_height, in_width, kernel, stride, padding);
            let positions = ic.positions;
            debug_assert_eq!(positions, ic.out_h * ic.out_w);
            let gd = g.data();
            // dW[oc][r] = sum_p g[oc][p] * cols[r][p]
            let mut dw = vec![0.0; out_channels * ic.rows];
            for oc in 0..out_channels {
                let grow = &gd[oc * positions..(oc + 1) * positions];
                for r in 0..ic.rows {
                    let crow = &ic.cols[r * positions..(r + 1) * positions];
                    dw[oc * ic.rows + r] = grow.iter().zip(crow).fold(0.0f32, |s, (a, b)| s + a * b);
                }
            }
            let db = (0..out_channels)
                .map(|oc| gd[oc * positions..(oc + 1) * positions].iter().fold(0.0f32, |s, v| s + v))
                .collect();
            let dx = want_input.then(|| {
                let w = layer.weight().data();
                let mut dcols = vec![0.0; ic.rows * positions];
                for r in 0..ic.rows {
                    let out = &mut dcols[r * positions..(r + 1) * positions];
                    for oc in 0..out_channels {
                        let wv = w[oc * ic.rows + r];
                        for (o, gv) in out.iter_mut().zip(&gd[oc * positions..(oc + 1) * positions]) {
                            *o += wv * gv;
                        }
                    }
                }
                let dx = col2im(&dcols, in_channels, in_height, in_width, kernel, stride, padding);
                Tensor::from_parts(vec![in_channels, in_height, in_width], dx)
            });
            let grads = vec![
                Tensor::from_parts(layer.weight().shape().to_vec(), dw),
                Tensor::from_parts(vec![out_channels], db),
            ];
            (grads, dx)
        }
        LayerKind::Relu => {
            let dx = x
                .data()
                .iter()
                .zip(g.data())
                .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                .collect();
            (Vec::new(), Some(Tensor::from_parts(x.shape().to_vec(), dx)))
        }
        LayerKind::MaxPool2d { kernel, stride } => {
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (oh, ow) = (g.shape()[1], g.shape()[2]);
            let mut dx = vec![0.0; c * h * w];
            for ch in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        // first maximum in scan order receives the gradient
                        let mut best = f32::NEG_INFINITY;
                        let mut at = 0;
                        for di in 0..kernel {
                            for dj in 0..kernel {
                                let idx = (ch * h + i * stride + di) * w + j * stride + dj;
                                if x.data()[idx] > best {
                                    best = x.data()[idx];
                                    at = idx;
                                }
                            }
                        }
                        dx[at] += g.data()[(ch * oh + i) * ow + j];
                    }
                }
            }
            (Vec::new(), Some(Tensor::from_parts(x.shape().to_vec(), dx)))
        }
        LayerKind::Flatten => (Vec::new(), Some(Tensor::from_parts(x.shape().to_vec(), g.data().to_vec()))),
        LayerKind::SoftmaxHead => (Vec::new(), Some(g.clone())),
    }
}

/// `onehot(label) - softmax(logits)`: the gradient of `ln p(label | x)` with
/// respect to the logits.
pub(crate) fn loglik_logit_grad(logits: &Tensor, label: usize) -> Tensor {
    let z = logits.data();
    let max = z.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f32> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum = exps.iter().fold(0.0f32, |s, v| s + v);
    let g = exps
        .iter()
        .enumerate()
        .map(|(j, e)| if j == label { 1.0 } else { 0.0 } - e / sum)
        .collect();
    Tensor::from_parts(logits.shape().to_vec(), g)
}

/// `ln softmax(logits)[label]`, computed stably in f64.
pub fn log_likelihood(logits: &Tensor, label: usize) -> f64 {
    let z = logits.data();
    let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = z.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    z[label] as f64 - lse
}
