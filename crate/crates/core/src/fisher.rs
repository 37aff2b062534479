//! Diagonal Fisher importance: the batch mean of squared log-likelihood
//! gradients, one score per parameter.
//!
//! Squares are accumulated in f64 in ascending sample order and stored as f32,
//! so a full map, a single layer slice, and the streamed slices produced during
//! unlearning all agree bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{expect_magic, expect_version, read_tensor, read_u16, read_u32, read_u8, write_tensor};
use crate::error::{Error, Result};
use crate::nn::{BackwardStream, LabeledBatch, Model};
use crate::tensor::Tensor;

pub const IMPORTANCE_MAGIC: &[u8; 4] = b"FCBI";
pub const IMPORTANCE_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceSource {
    /// Importance over the full training set.
    Global,
    /// Importance over a forget batch.
    Forget,
}

impl ImportanceSource {
    fn tag(self) -> u8 {
        match self {
            ImportanceSource::Global => 0,
            ImportanceSource::Forget => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(ImportanceSource::Global),
            1 => Ok(ImportanceSource::Forget),
            other => Err(Error::Format(format!("unknown importance source tag {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap {
    pub source: ImportanceSource,
    pub sample_count: usize,
    /// `layers[l - 1]` mirrors the parameter tensors of layer `l`.
    pub layers: Vec<Vec<Tensor>>,
}

impl ImportanceMap {
    pub fn layer(&self, l: usize) -> Result<&[Tensor]> {
        if l == 0 || l > self.layers.len() {
            return Err(Error::LayerOutOfRange { index: l, depth: self.layers.len() });
        }
        Ok(&self.layers[l - 1])
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Errors unless every slice matches the parameter shapes of `model`.
    pub fn check_matches(&self, model: &Model) -> Result<()> {
        if self.layers.len() != model.depth() {
            return Err(Error::ShapeMismatch(format!(
                "importance map has {} layers, model has {}",
                self.layers.len(),
                model.depth()
            )));
        }
        for l in 1..=model.depth() {
            let shapes = model.param_shapes(l)?;
            let slice = &self.layers[l - 1];
            if shapes.len() != slice.len()
                || shapes.iter().zip(slice).any(|(s, t)| s.as_slice() != t.shape())
            {
                return Err(Error::ShapeMismatch(format!(
                    "importance slice for layer {l} does not match parameter shapes {shapes:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &ImportanceMap) -> bool {
        self.source == other.source
            && self.sample_count == other.sample_count
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bit_eq(y)))
    }
}

/// Running f64 sums of squared gradients for one layer.
#[derive(Debug, Clone)]
pub struct FisherAccumulator {
    shapes: Vec<Vec<usize>>,
    sums: Vec<Vec<f64>>,
    samples: usize,
}

impl FisherAccumulator {
    pub fn new(shapes: Vec<Vec<usize>>) -> Self {
        let sums = shapes.iter().map(|s| vec![0.0; s.iter().product()]).collect();
        FisherAccumulator { shapes, sums, samples: 0 }
    }

    pub fn add(&mut self, grads: &[Tensor]) {
        for (sum, g) in self.sums.iter_mut().zip(grads) {
            for (s, &v) in sum.iter_mut().zip(g.data()) {
                let v = v as f64;
                *s += v * v;
            }
        }
        self.samples += 1;
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Mean over `count` samples, rounded to f32.
    pub fn finish(self, count: usize) -> Result<Vec<Tensor>> {
        if count == 0 {
            return Err(Error::EmptyInput("importance over zero samples".into()));
        }
        let n = count as f64;
        self.shapes
            .into_iter()
            .zip(self.sums)
            .map(|(shape, sum)| Tensor::new(shape, sum.into_iter().map(|s| (s / n) as f32).collect()))
            .collect()
    }
}

/// Advances `stream` by one layer and returns that layer's importance slice.
pub fn stream_layer_importance(stream: &mut BackwardStream, model: &Model) -> Result<(usize, Vec<Tensor>)> {
    let l = stream.next_index();
    let mut acc = FisherAccumulator::new(model.param_shapes(l)?);
    stream.advance(model, |_, g| acc.add(g))?;
    let n = stream.samples();
    Ok((l, acc.finish(n)?))
}

pub fn estimate_importance(model: &Model, batch: &LabeledBatch, source: ImportanceSource) -> Result<ImportanceMap> {
    let mut stream = BackwardStream::new(model, batch)?;
    let mut layers = Vec::with_capacity(model.depth());
    for _ in 0..model.depth() {
        layers.push(stream_layer_importance(&mut stream, model)?.1);
    }
    Ok(ImportanceMap { source, sample_count: batch.len(), layers })
}

/// Importance slice of layer `l` alone; back-propagation stops there.
pub fn estimate_importance_layer(model: &Model, batch: &LabeledBatch, l: usize) -> Result<Vec<Tensor>> {
    model.check_index(l)?;
    let mut stream = BackwardStream::new(model, batch)?;
    loop {
        let (idx, slice) = stream_layer_importance(&mut stream, model)?;
        if idx == l {
            return Ok(slice);
        }
    }
}

/// Global importance over a whole dataset, processed in fixed-order chunks of
/// `chunk` samples with a running f64 sum. Equal to [`estimate_importance`] on
/// the full set but with bounded memory.
pub fn estimate_global_importance(model: &Model, data: &LabeledBatch, chunk: usize) -> Result<ImportanceMap> {
    if data.is_empty() {
        return Err(Error::EmptyInput("global importance over an empty dataset".into()));
    }
    let chunk = chunk.max(1);
    let mut accs: Vec<FisherAccumulator> = (1..=model.depth())
        .map(|l| model.param_shapes(l).map(FisherAccumulator::new))
        .collect::<Result<_>>()?;
    let mut start = 0;
    while start < data.len() {
        let end = (start + chunk).min(data.len());
        let part = LabeledBatch {
            inputs: data.inputs[start..end].to_vec(),
            labels: data.labels[start..end].to_vec(),
        };
        let mut stream = BackwardStream::new(model, &part)?;
        for acc in accs.iter_mut() {
            stream.advance(model, |_, g| acc.add(g))?;
        }
        start = end;
    }
    let layers = accs.into_iter().map(|a| a.finish(data.len())).collect::<Result<_>>()?;
    Ok(ImportanceMap { source: ImportanceSource::Global, sample_count: data.len(), layers })
}

pub fn write_importance<W: Write>(w: &mut W, map: &ImportanceMap) -> Result<()> {
    w.write_all(IMPORTANCE_MAGIC)?;
    w.write_all(&IMPORTANCE_VERSION.to_le_bytes())?;
    w.write_all(&[map.source.tag()])?;
    let count = u32::try_from(map.sample_count)
        .map_err(|_| Error::Format("sample count exceeds u32".into()))?;
    w.write_all(&count.to_le_bytes())?;
    w.write_all(&(map.layers.len() as u16).to_le_bytes())?;
    // checkpoint order: front (l = L) to back (l = 1)
    for slice in map.layers.iter().rev() {
        w.write_all(&[slice.len() as u8])?;
        for t in slice {
            write_tensor(w, t)?;
        }
    }
    Ok(())
}

pub fn read_importance<R: Read>(r: &mut R) -> Result<ImportanceMap> {
    expect_magic(r, IMPORTANCE_MAGIC)?;
    expect_version(r, IMPORTANCE_VERSION)?;
    let source = ImportanceSource::from_tag(read_u8(r, "source tag")?)?;
    let sample_count = read_u32(r, "sample count")? as usize;
    let depth = read_u16(r, "layer count")? as usize;
    let mut layers = Vec::with_capacity(depth);
    for _ in 0..depth {
        let n = read_u8(r, "tensor count")? as usize;
        let slice = (0..n).map(|_| read_tensor(r)).collect::<Result<Vec<_>>>()?;
        if slice.iter().flat_map(|t| t.data()).any(|&v| v < 0.0) {
            return Err(Error::Format("negative importance score".into()));
        }
        layers.push(slice);
    }
    layers.reverse();
    Ok(ImportanceMap { source, sample_count, layers })
}

pub fn save_importance(map: &ImportanceMap, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_importance(&mut w, map)?;
    w.flush()?;
    Ok(())
}

pub fn load_importance(path: &Path) -> Result<ImportanceMap> {
    read_importance(&mut BufReader::new(File::open(path)?))
}

/// Loads a map and checks it against `model`.
pub fn load_importance_for(path: &Path, model: &Model) -> Result<ImportanceMap> {
    let map = load_importance(path)?;
    map.check_matches(model)?;
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{backward_loglik, Layer, LayerKind};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(rng: &mut ChaCha8Rng, n: usize, dims: usize, classes: usize) -> LabeledBatch {
        let mut b = LabeledBatch::default();
        for _ in 0..n {
            let x = Tensor::from_vec((0..dims).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
            b.push(x, rng.gen_range(0..classes));
        }
        b
    }

    #[test]
    fn single_sample_equals_squared_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Model::mlp(&[6, 4, 3], &mut rng).unwrap();
        let b = batch(&mut rng, 1, 6, 3);
        let map = estimate_importance(&m, &b, ImportanceSource::Forget).unwrap();
        let g = backward_loglik(&m, &b.inputs[0], b.labels[0]).unwrap();
        for l in 1..=2 {
            for (imp, grad) in map.layer(l).unwrap().iter().zip(g.layer(l)) {
                for (s, v) in imp.data().iter().zip(grad.data()) {
                    assert_eq!(s.to_bits(), (((*v as f64) * (*v as f64)) as f32).to_bits());
                }
            }
        }
    }

    #[test]
    fn four_samples_equal_mean_of_per_sample_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = Model::mlp(&[5, 4, 3], &mut rng).unwrap();
        let b = batch(&mut rng, 4, 5, 3);
        let map = estimate_importance(&m, &b, ImportanceSource::Forget).unwrap();
        let per: Vec<_> = (0..4).map(|n| backward_loglik(&m, &b.inputs[n], b.labels[n]).unwrap()).collect();
        for l in 1..=2 {
            for t in 0..2 {
                for i in 0..map.layer(l).unwrap()[t].len() {
                    let mean = per
                        .iter()
                        .map(|g| {
                            let v = g.layer(l)[t].data()[i] as f64;
                            v * v
                        })
                        .sum::<f64>()
                        / 4.0;
                    assert_eq!(map.layer(l).unwrap()[t].data()[i], mean as f32);
                }
            }
        }
    }

    #[test]
    fn loss_minimum_gives_zero_scores() {
        // logits saturate to the correct class for every sample
        let w = Tensor::new(vec![2, 2], vec![60.0, -60.0, -60.0, 60.0]).unwrap();
        let m = Model::new(
            vec![2],
            vec![
                Layer::with_params(LayerKind::Dense { in_features: 2, out_features: 2 }, vec![w, Tensor::zeros(vec![2])])
                    .unwrap(),
                Layer::activation(LayerKind::SoftmaxHead),
            ],
        )
        .unwrap();
        let b = LabeledBatch::new(
            vec![Tensor::from_vec(vec![1.0, 0.0]).unwrap(), Tensor::from_vec(vec![0.0, 1.0]).unwrap()],
            vec![0, 1],
        )
        .unwrap();
        let map = estimate_importance(&m, &b, ImportanceSource::Forget).unwrap();
        assert!(map.layers.iter().flatten().flat_map(|t| t.data()).all(|&v| v <= 1e-12));
    }

    #[test]
    fn layer_slices_match_full_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = Model::tiny_cnn(1, 8, 8, 6, 3, &mut rng).unwrap();
        let mut b = LabeledBatch::default();
        for _ in 0..3 {
            let x = Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
            b.push(x, rng.gen_range(0..3));
        }
        let full = estimate_importance(&m, &b, ImportanceSource::Forget).unwrap();
        for l in 1..=m.depth() {
            let slice = estimate_importance_layer(&m, &b, l).unwrap();
            assert!(slice.iter().zip(full.layer(l).unwrap()).all(|(a, b)| a.bit_eq(b)));
        }
        assert!(matches!(estimate_importance_layer(&m, &b, 5), Err(Error::LayerOutOfRange { .. })));
    }

    #[test]
    fn zero_gradient_layer_gives_zero_slice() {
        // a dead ReLU layer blocks every gradient below it
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut m = Model::mlp(&[4, 3, 2], &mut rng).unwrap();
        {
            let first = m.param_layer_mut(2).unwrap();
            first.params[0] = Tensor::zeros(vec![4, 3]);
            first.params[1] = Tensor::new(vec![3], vec![-1.0; 3]).unwrap();
        }
        let b = batch(&mut rng, 5, 4, 2);
        let slice = estimate_importance_layer(&m, &b, 2).unwrap();
        assert!(slice.iter().flat_map(|t| t.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn chunked_global_equals_single_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = Model::mlp(&[5, 6, 3], &mut rng).unwrap();
        let b = batch(&mut rng, 23, 5, 3);
        let mut full = estimate_importance(&m, &b, ImportanceSource::Global).unwrap();
        full.source = ImportanceSource::Global;
        let chunked = estimate_global_importance(&m, &b, 4).unwrap();
        assert!(chunked.bit_eq(&full));
    }

    #[test]
    fn empty_batch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = Model::mlp(&[5, 3], &mut rng).unwrap();
        assert!(matches!(
            estimate_importance(&m, &LabeledBatch::default(), ImportanceSource::Forget),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn file_roundtrip_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mlp = Model::mlp(&[16, 8, 5], &mut rng).unwrap();
        let b = batch(&mut rng, 7, 16, 5);
        let map = estimate_importance(&mlp, &b, ImportanceSource::Forget).unwrap();
        let mut buf = Vec::new();
        write_importance(&mut buf, &map).unwrap();
        let back = read_importance(&mut buf.as_slice()).unwrap();
        assert!(back.bit_eq(&map));
        let mut again = Vec::new();
        write_importance(&mut again, &back).unwrap();
        assert_eq!(buf, again);

        let mut bad = buf.clone();
        bad[0] = b'Z';
        assert!(matches!(read_importance(&mut bad.as_slice()), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[4] = 7;
        assert!(matches!(read_importance(&mut bad.as_slice()), Err(Error::Version { .. })));
        assert!(matches!(read_importance(&mut &buf[..buf.len() - 2]), Err(Error::Truncated(_))));

        let cnn = Model::tiny_cnn(1, 8, 8, 6, 5, &mut rng).unwrap();
        assert!(matches!(back.check_matches(&cnn), Err(Error::ShapeMismatch(_))));
    }

    proptest! {
        #[test]
        fn scores_scale_with_gradient_squared(values in proptest::collection::vec(-10.0f32..10.0, 1..32), samples in 1usize..6) {
            // c = 2 is exact in binary floating point, so the ratio is exactly 4
            let shape = vec![values.len()];
            let g = Tensor::from_vec(values.clone()).unwrap();
            let g2 = Tensor::from_vec(values.iter().map(|v| v * 2.0).collect()).unwrap();
            let mut a = FisherAccumulator::new(vec![shape.clone()]);
            let mut b = FisherAccumulator::new(vec![shape]);
            for _ in 0..samples {
                a.add(std::slice::from_ref(&g));
                b.add(std::slice::from_ref(&g2));
            }
            let a = a.finish(samples).unwrap();
            let b = b.finish(samples).unwrap();
            for (x, y) in a[0].data().iter().zip(b[0].data()) {
                prop_assert!(*x >= 0.0);
                prop_assert_eq!(*x * 4.0, *y);
            }
        }

        #[test]
        fn scores_are_non_negative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Model::mlp(&[4, 5, 3], &mut rng).unwrap();
            let b = batch(&mut rng, 3, 4, 3);
            let map = estimate_importance(&m, &b, ImportanceSource::Forget).unwrap();
            prop_assert!(map.layers.iter().flatten().flat_map(|t| t.data()).all(|&v| v >= 0.0));
        }
    }
}
