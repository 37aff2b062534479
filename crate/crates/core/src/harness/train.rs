//! Plain minibatch SGD on the cross-entropy loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{forward, log_likelihood, BackwardStream, LabeledBatch, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec { epochs: 40, learning_rate: 0.1, batch_size: 32, seed: 0 }
    }
}

/// Mean negative log-likelihood over `data`.
pub fn mean_loss(model: &Model, data: &LabeledBatch) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("loss of an empty batch".into()));
    }
    let mut total = 0.0;
    for (x, &y) in data.inputs.iter().zip(&data.labels) {
        total -= log_likelihood(&forward(model, x)?, y);
    }
    Ok(total / data.len() as f64)
}

fn step(model: &mut Model, batch: &LabeledBatch, lr: f32) -> Result<()> {
    let mut stream = BackwardStream::new(model, batch)?;
    let scale = lr / batch.len() as f32;
    for _ in 0..model.depth() {
        let l = stream.next_index();
        let mut sums: Vec<Vec<f32>> = model.param_shapes(l)?.iter().map(|s| vec![0.0; s.iter().product()]).collect();
        stream.advance(model, |_, grads| {
            for (acc, g) in sums.iter_mut().zip(grads) {
                for (a, v) in acc.iter_mut().zip(g.data()) {
                    *a += v;
                }
            }
        })?;
        // ascent on the log-likelihood
        for (p, acc) in model.param_layer_mut(l)?.params.iter_mut().zip(&sums) {
            for (w, g) in p.data_mut().iter_mut().zip(acc) {
                *w += scale * g;
            }
        }
    }
    Ok(())
}

/// Trains in place and returns the mean training loss after every epoch.
pub fn train_sgd(model: &mut Model, data: &LabeledBatch, spec: &TrainSpec) -> Result<Vec<f64>> {
    if spec.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if !(spec.learning_rate > 0.0 && spec.learning_rate.is_finite()) {
        return Err(Error::Config("learning_rate must be positive".into()));
    }
    if spec.epochs > 0 && data.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(spec.epochs);
    for epoch in 0..spec.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(spec.batch_size) {
            let batch = LabeledBatch {
                inputs: chunk.iter().map(|&i| data.inputs[i].clone()).collect(),
                labels: chunk.iter().map(|&i| data.labels[i]).collect(),
            };
            step(model, &batch, spec.learning_rate)?;
        }
        let loss = mean_loss(model, data)?;
        let params_finite = model.layers().iter().flat_map(|l| &l.params).all(|p| p.data().iter().all(|v| v.is_finite()));
        if !loss.is_finite() || !params_finite {
            return Err(Error::NonFinite(format!("training diverged in epoch {}", epoch + 1)));
        }
        losses.push(loss);
    }
    Ok(losses)
}
