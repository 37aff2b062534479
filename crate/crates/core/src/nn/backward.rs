use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::infer::{Precision, Runner};
use super::kernels::{backward_layer, loglik_logit_grad};
use super::{LabeledBatch, Model};

/// Per-parameter gradients of `ln p(label | x)`, indexed back-end first:
/// `layers[l - 1]` holds `[d weight, d bias]` of layer `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Vec<Tensor>>,
}

impl Gradients {
    pub fn layer(&self, l: usize) -> &[Tensor] {
        &self.layers[l - 1]
    }
}

/// Reverse-mode pass over a batch that yields parameter gradients one
/// parameterized layer at a time, starting at `l = 1`.
///
/// Each call to [`BackwardStream::advance`] back-propagates through the
/// activation layers above the next parameterized layer, hands that layer's
/// per-sample gradients to the caller, and then propagates through it using the
/// model's current weights. Callers that edit layer `l` after `advance`
/// returns therefore never influence gradients of layers `l' > l`.
pub struct BackwardStream {
    /// Input to every layer position, per sample.
    tapes: Vec<Vec<Tensor>>,
    /// Gradient with respect to the output of position `cursor - 1`.
    upstream: Vec<Tensor>,
    cursor: usize,
    next_index: usize,
}

impl BackwardStream {
    /// Runs the forward pass for every sample and seeds the stream with
    /// `onehot(label) - softmax(logits)`.
    pub fn new(model: &Model, batch: &LabeledBatch) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("backward pass over an empty batch".into()));
        }
        batch.check_against(model)?;
        let runner = Runner::new(model, Precision::F32);
        let mut tapes = Vec::with_capacity(batch.len());
        let mut upstream = Vec::with_capacity(batch.len());
        for (x, &y) in batch.inputs.iter().zip(&batch.labels) {
            let mut tape = Vec::with_capacity(model.layers().len());
            let logits = runner.run_from(0, x, |_, input| tape.push(input.clone()))?;
            upstream.push(loglik_logit_grad(&logits, y));
            tapes.push(tape);
        }
        Ok(BackwardStream { tapes, upstream, cursor: model.layers().len(), next_index: 1 })
    }

    pub fn samples(&self) -> usize {
        self.tapes.len()
    }

    /// Layer index the next [`advance`](Self::advance) call will produce.
    pub fn next_index(&self) -> usize {
        self.next_index
    }

    /// Input to layer `l` of sample `n` recorded by the forward pass.
    pub fn layer_input(&self, model: &Model, l: usize, n: usize) -> Result<&Tensor> {
        let pos = model.position_of(l)?;
        Ok(&self.tapes[n][pos])
    }

    /// Produces the gradients of the next parameterized layer. `sink` receives
    /// `(sample index, [d weight, d bias])` for every sample in order.
    pub fn advance(
        &mut self,
        model: &Model,
        mut sink: impl FnMut(usize, &[Tensor]),
    ) -> Result<usize> {
        let l = self.next_index;
        let target = model.position_of(l)?;
        if target >= self.cursor {
            return Err(Error::Consistency(format!(
                "backward stream at position {} cannot produce layer {l}",
                self.cursor
            )));
        }
        let layers = model.layers();
        for pos in (target + 1..self.cursor).rev() {
            for (tape, g) in self.tapes.iter().zip(self.upstream.iter_mut()) {
                let (_, dx) = backward_layer(&layers[pos], &tape[pos], g, true);
                *g = dx.expect("activation layers always produce an input gradient");
            }
        }
        let want_input = target > 0;
        for (n, (tape, g)) in self.tapes.iter().zip(self.upstream.iter_mut()).enumerate() {
            let (grads, dx) = backward_layer(&layers[target], &tape[target], g, want_input);
            sink(n, &grads);
            if let Some(dx) = dx {
                *g = dx;
            }
        }
        self.cursor = target;
        self.next_index += 1;
        Ok(l)
    }
}

/// Gradient of `ln p(label | x, theta)` for every parameter, layer by layer
/// from the output toward the input.
pub fn backward_loglik(model: &Model, x: &Tensor, label: usize) -> Result<Gradients> {
    let batch = LabeledBatch::new(vec![x.clone()], vec![label])?;
    let mut stream = BackwardStream::new(model, &batch)?;
    let mut layers = Vec::with_capacity(model.depth());
    for _ in 0..model.depth() {
        let mut grads = Vec::new();
        stream.advance(model, |_, g| grads = g.to_vec())?;
        layers.push(grads);
    }
    Ok(Gradients { layers })
}
