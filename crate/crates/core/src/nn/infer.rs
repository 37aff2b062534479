use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::kernels::{forward_layer, quantize_weights, QuantizedWeights};
use super::{LabeledBatch, Model};

/// Numeric path used for inference. Fisher estimation and dampening always use
/// the f32 master weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    Int8,
}

/// Inputs to parameterized layers captured during a caching forward pass,
/// keyed by `(layer index, sample index)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivationCache {
    precision: Precision,
    entries: BTreeMap<(usize, usize), Tensor>,
}

impl ActivationCache {
    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn get(&self, l: usize, n: usize) -> Result<&Tensor> {
        self.entries.get(&(l, n)).ok_or(Error::CacheMiss { layer: l, sample: n })
    }

    pub fn contains(&self, l: usize, n: usize) -> bool {
        self.entries.contains_key(&(l, n))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn layers(&self) -> BTreeSet<usize> {
        self.entries.keys().map(|(l, _)| *l).collect()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

pub(crate) struct Runner<'m> {
    model: &'m Model,
    qweights: Option<QuantizedWeights>,
}

impl<'m> Runner<'m> {
    pub(crate) fn new(model: &'m Model, precision: Precision) -> Self {
        let qweights = match precision {
            Precision::F32 => None,
            Precision::Int8 => Some(quantize_weights(model.layers())),
        };
        Runner { model, qweights }
    }

    fn qweight(&self, pos: usize) -> Option<&crate::tensor::QuantizedTensor> {
        self.qweights.as_ref().and_then(|q| q[pos].as_ref())
    }

    /// Runs positions `from..` and returns the logits. `visit` sees the input
    /// to every position before it executes.
    pub(crate) fn run_from(
        &self,
        from: usize,
        x: &Tensor,
        mut visit: impl FnMut(usize, &Tensor),
    ) -> Result<Tensor> {
        let shapes = self.model.shapes();
        if x.shape() != shapes[from].as_slice() {
            return Err(Error::Dimension(format!(
                "layer position {from} expects input {:?}, got {:?}",
                shapes[from],
                x.shape()
            )));
        }
        let layers = self.model.layers();
        let mut cur = x.clone();
        for pos in from..layers.len() {
            visit(pos, &cur);
            cur = forward_layer(&layers[pos], &cur, &shapes[pos + 1], self.qweight(pos))?;
        }
        Ok(cur)
    }
}

/// Plain single-sample inference in f32.
pub fn forward(model: &Model, x: &Tensor) -> Result<Tensor> {
    Runner::new(model, Precision::F32).run_from(0, x, |_, _| {})
}

/// Forward every input and cache the input to each parameterized layer in
/// `cache_at` for every sample.
pub fn forward_batch(
    model: &Model,
    inputs: &[Tensor],
    cache_at: &BTreeSet<usize>,
    precision: Precision,
) -> Result<(Vec<Tensor>, ActivationCache)> {
    for &l in cache_at {
        model.check_index(l)?;
    }
    let positions: BTreeMap<usize, usize> = cache_at
        .iter()
        .map(|&l| Ok((model.position_of(l)?, l)))
        .collect::<Result<_>>()?;
    let runner = Runner::new(model, precision);
    let mut cache = ActivationCache { precision, entries: BTreeMap::new() };
    let mut logits = Vec::with_capacity(inputs.len());
    for (n, x) in inputs.iter().enumerate() {
        let out = runner.run_from(0, x, |pos, input| {
            if let Some(&l) = positions.get(&pos) {
                cache.entries.insert((l, n), input.clone());
            }
        })?;
        logits.push(out);
    }
    Ok((logits, cache))
}

/// Runs layers `l` down to 1 on the cached input to layer `l` for sample `n`.
pub fn partial_inference(model: &Model, cache: &ActivationCache, l: usize, n: usize) -> Result<Tensor> {
    let pos = model.position_of(l)?;
    let x = cache.get(l, n)?;
    Runner::new(model, cache.precision).run_from(pos, x, |_, _| {})
}

/// Batch-mean accuracy of partial inference from layer `l` over cached samples
/// `0..labels.len()`.
pub(crate) fn partial_accuracy(
    model: &Model,
    cache: &ActivationCache,
    l: usize,
    labels: &[usize],
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("checkpoint evaluation on an empty batch".into()));
    }
    let pos = model.position_of(l)?;
    let runner = Runner::new(model, cache.precision);
    let mut correct = 0usize;
    for (n, &y) in labels.iter().enumerate() {
        let logits = runner.run_from(pos, cache.get(l, n)?, |_, _| {})?;
        if argmax(logits.data()) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate_accuracy(model: &Model, data: &LabeledBatch, precision: Precision) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("accuracy of an empty batch".into()));
    }
    data.check_against(model)?;
    let runner = Runner::new(model, precision);
    let mut correct = 0usize;
    for (x, &y) in data.inputs.iter().zip(&data.labels) {
        let logits = runner.run_from(0, x, |_, _| {})?;
        if argmax(logits.data()) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Layer, LayerKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dense(w: Vec<f32>, b: Vec<f32>, i: usize, o: usize) -> Layer {
        Layer::with_params(
            LayerKind::Dense { in_features: i, out_features: o },
            vec![Tensor::new(vec![i, o], w).unwrap(), Tensor::new(vec![o], b).unwrap()],
        )
        .unwrap()
    }

    fn hand_mlp() -> Model {
        // W1 = [[1, -1], [2, 0.5]] as [in, out], b1 = [0, 1]
        // W2 = [[1, 0, -1], [0.5, 2, 1]], b2 = [0.1, 0, 0]
        Model::new(
            vec![2],
            vec![
                dense(vec![1.0, -1.0, 2.0, 0.5], vec![0.0, 1.0], 2, 2),
                Layer::activation(LayerKind::Relu),
                dense(vec![1.0, 0.0, -1.0, 0.5, 2.0, 1.0], vec![0.1, 0.0, 0.0], 2, 3),
                Layer::activation(LayerKind::SoftmaxHead),
            ],
        )
        .unwrap()
    }

    #[test]
    fn zero_weight_dense_gives_zero_logits() {
        let m = Model::new(
            vec![3],
            vec![dense(vec![0.0; 6], vec![0.0; 2], 3, 2), Layer::activation(LayerKind::SoftmaxHead)],
        )
        .unwrap();
        let out = forward(&m, &Tensor::from_vec(vec![1.0, -4.0, 9.0]).unwrap()).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn hand_computed_two_layer_mlp() {
        // x = [1, 2]: h = relu([1 + 4, -1 + 1 + 1]) = [5, 1]
        // logits = [5 + 0.5 + 0.1, 0 + 2, -5 + 1] = [5.6, 2, -4]
        let out = forward(&hand_mlp(), &Tensor::from_vec(vec![1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(out.data(), &[5.6, 2.0, -4.0]);
    }

    #[test]
    fn empty_cache_set() {
        let m = hand_mlp();
        let xs = vec![Tensor::from_vec(vec![1.0, 2.0]).unwrap()];
        let (logits, cache) = forward_batch(&m, &xs, &BTreeSet::new(), Precision::F32).unwrap();
        assert!(cache.is_empty());
        assert!(logits[0].bit_eq(&forward(&m, &xs[0]).unwrap()));
    }

    #[test]
    fn partial_inference_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Model::mlp(&[6, 5, 4, 3], &mut rng).unwrap();
        let xs: Vec<Tensor> = (0..4)
            .map(|i| Tensor::from_vec((0..6).map(|j| ((i * 6 + j) as f32).sin()).collect()).unwrap())
            .collect();
        let all: BTreeSet<usize> = (1..=3).collect();
        let (logits, cache) = forward_batch(&m, &xs, &all, Precision::F32).unwrap();
        assert_eq!(cache.len(), 12);
        for n in 0..4 {
            // full depth
            assert!(partial_inference(&m, &cache, 3, n).unwrap().bit_eq(&logits[n]));
            // l = 1 applies only the classifier to its cached input
            let layer = m.param_layer(1).unwrap();
            let x = cache.get(1, n).unwrap();
            let mut expected = crate::tensor::gemm(
                &x.clone().reshape(vec![1, 4]).unwrap(),
                layer.weight(),
            )
            .unwrap()
            .into_data();
            for (v, b) in expected.iter_mut().zip(layer.bias().data()) {
                *v += b;
            }
            assert_eq!(partial_inference(&m, &cache, 1, n).unwrap().data(), expected.as_slice());
        }
    }

    #[test]
    fn cache_miss() {
        let m = hand_mlp();
        let xs = vec![Tensor::from_vec(vec![1.0, 2.0]).unwrap()];
        let (_, cache) = forward_batch(&m, &xs, &[1].into_iter().collect(), Precision::F32).unwrap();
        assert!(matches!(
            partial_inference(&m, &cache, 2, 0),
            Err(Error::CacheMiss { layer: 2, sample: 0 })
        ));
        assert!(matches!(
            partial_inference(&m, &cache, 1, 5),
            Err(Error::CacheMiss { layer: 1, sample: 5 })
        ));
    }

    #[test]
    fn geometry_mismatch() {
        let m = hand_mlp();
        assert!(matches!(forward(&m, &Tensor::from_vec(vec![1.0]).unwrap()), Err(Error::Dimension(_))));
    }

    #[test]
    fn accuracy_counts() {
        // one-hot logits via a 3->3 identity dense layer
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let m = Model::new(
            vec![3],
            vec![dense(w, vec![0.0; 3], 3, 3), Layer::activation(LayerKind::SoftmaxHead)],
        )
        .unwrap();
        let onehot = |c: usize| {
            let mut v = vec![0.0; 3];
            v[c] = 1.0;
            Tensor::from_vec(v).unwrap()
        };
        let all_right = LabeledBatch::new(vec![onehot(0), onehot(1)], vec![0, 1]).unwrap();
        assert_eq!(evaluate_accuracy(&m, &all_right, Precision::F32).unwrap(), 1.0);
        let all_wrong = LabeledBatch::new(vec![onehot(0), onehot(1)], vec![2, 2]).unwrap();
        assert_eq!(evaluate_accuracy(&m, &all_wrong, Precision::F32).unwrap(), 0.0);
        let three_of_four =
            LabeledBatch::new(vec![onehot(0), onehot(1), onehot(2), onehot(2)], vec![0, 1, 2, 0]).unwrap();
        assert_eq!(evaluate_accuracy(&m, &three_of_four, Precision::F32).unwrap(), 0.75);
        // all-zero logits tie: lowest class wins
        let tie = LabeledBatch::new(vec![Tensor::zeros(vec![3])], vec![0]).unwrap();
        assert_eq!(evaluate_accuracy(&m, &tie, Precision::F32).unwrap(), 1.0);
        assert!(matches!(
            evaluate_accuracy(&m, &LabeledBatch::default(), Precision::F32),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn int8_inference_tracks_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = Model::mlp(&[8, 16, 4], &mut rng).unwrap();
        let x = Tensor::from_vec((0..8).map(|i| (i as f32 * 0.7).cos()).collect()).unwrap();
        let (f, _) = forward_batch(&m, &[x.clone()], &BTreeSet::new(), Precision::F32).unwrap();
        let (q, _) = forward_batch(&m, &[x], &BTreeSet::new(), Precision::Int8).unwrap();
        let scale = f[0].max_abs();
        for (a, b) in f[0].data().iter().zip(q[0].data()) {
            assert!((a - b).abs() < 0.05 * scale.max(1.0));
        }
    }
}
