//! Independent f64 references shared by the integration tests.

#![allow(dead_code)]

use std::path::PathBuf;

use ficabu_core::harness::config::ExperimentConfig;
use ficabu_core::nn::{LabeledBatch, LayerKind, Model};

/// A copy of a model in f64 with a direct, loop-per-definition forward pass.
#[derive(Clone)]
pub struct RefNet {
    pub kinds: Vec<LayerKind>,
    /// Per front-to-back layer: parameter tensors as flat f64 vectors.
    pub params: Vec<Vec<Vec<f64>>>,
    /// Back-end-first index of each layer, if parameterized.
    pub index: Vec<Option<usize>>,
}

impl RefNet {
    pub fn from_model(m: &Model) -> Self {
        RefNet {
            kinds: m.layers().iter().map(|l| l.spec.kind).collect(),
            params: m
                .layers()
                .iter()
                .map(|l| l.params.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect())
                .collect(),
            index: (0..m.layers().len()).map(|p| m.index_at(p)).collect(),
        }
    }

    /// Front-to-back position of back-end-first layer `l`.
    pub fn position(&self, l: usize) -> usize {
        self.index.iter().position(|&i| i == Some(l)).unwrap()
    }

    /// `ln p(label | x)`.
    pub fn loglik(&self, x: &[f64], shape: &[usize], label: usize) -> f64 {
        let mut a = x.to_vec();
        let mut shape = shape.to_vec();
        for (kind, p) in self.kinds.iter().zip(&self.params) {
            match *kind {
                LayerKind::Dense { in_features, out_features } => {
                    let (w, b) = (&p[0], &p[1]);
                    a = (0..out_features)
                        .map(|j| b[j] + (0..in_features).map(|i| a[i] * w[i * out_features + j]).sum::<f64>())
                        .collect();
                    shape = vec![out_features];
                }
                LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding, in_height, in_width } => {
                    let oh = (in_height + 2 * padding - kernel) / stride + 1;
                    let ow = (in_width + 2 * padding - kernel) / stride + 1;
                    let (w, b) = (&p[0], &p[1]);
                    let mut out = vec![0.0; out_channels * oh * ow];
                    for o in 0..out_channels {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let mut s = b[o];
                                for c in 0..in_channels {
                                    for ky in 0..kernel {
                                        for kx in 0..kernel {
                                            let iy = (y * stride + ky) as isize - padding as isize;
                                            let ix = (xx * stride + kx) as isize - padding as isize;
                                            if iy < 0 || ix < 0 || iy >= in_height as isize || ix >= in_width as isize {
                                                continue;
                                            }
                                            let v = a[c * in_height * in_width + iy as usize * in_width + ix as usize];
                                            s += v * w[((o * in_channels + c) * kernel + ky) * kernel + kx];
                                        }
                                    }
                                }
                                out[(o * oh + y) * ow + xx] = s;
                            }
                        }
                    }
                    a = out;
                    shape = vec![out_channels, oh, ow];
                }
                LayerKind::Relu => a.iter_mut().for_each(|v| *v = v.max(0.0)),
                LayerKind::MaxPool2d { kernel, stride } => {
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    let oh = (h - kernel) / stride + 1;
                    let ow = (w - kernel) / stride + 1;
                    let mut out = vec![f64::NEG_INFINITY; c * oh * ow];
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                for ky in 0..kernel {
                                    for kx in 0..kernel {
                                        let v = a[(ch * h + y * stride + ky) * w + xx * stride + kx];
                                        let o = &mut out[(ch * oh + y) * ow + xx];
                                        *o = o.max(v);
                                    }
                                }
                            }
                        }
                    }
                    a = out;
                    shape = vec![c, oh, ow];
                }
                LayerKind::Flatten => shape = vec![a.len()],
                LayerKind::SoftmaxHead => {}
            }
        }
        let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + a.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        a[label] - lse
    }

    /// Central-difference diagonal Fisher, `[l - 1][tensor][element]`.
    pub fn fd_fisher(&self, batch: &LabeledBatch, h: f64) -> Vec<Vec<Vec<f64>>> {
        let depth = self.index.iter().flatten().count();
        let mut out = Vec::with_capacity(depth);
        for l in 1..=depth {
            let pos = self.position(l);
            let mut layer = Vec::new();
            for t in 0..self.params[pos].len() {
                let mut acc = vec![0.0; self.params[pos][t].len()];
                for (x, &y) in batch.inputs.iter().zip(&batch.labels) {
                    let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
                    let mut net = self.clone();
                    for (i, a) in acc.iter_mut().enumerate() {
                        let orig = net.params[pos][t][i];
                        net.params[pos][t][i] = orig + h;
                        let up = net.loglik(&xs, x.shape(), y);
                        net.params[pos][t][i] = orig - h;
                        let down = net.loglik(&xs, x.shape(), y);
                        net.params[pos][t][i] = orig;
                        let g = (up - down) / (2.0 * h);
                        *a += g * g;
                    }
                }
                layer.push(acc.into_iter().map(|v| v / batch.len() as f64).collect());
            }
            out.push(layer);
        }
        out
    }
}

/// Relative error with both-tiny values counted as agreement.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-12 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// The shipped five-class blob experiment.
pub fn toy_config() -> ExperimentConfig {
    ExperimentConfig::load(&repo_root().join("configs/toy.toml")).unwrap()
}
