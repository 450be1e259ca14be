//! Mini-batch training of a [`Model`] on binary labels.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::densenet::{Mode, Model};
use crate::error::{Error, Result};
use crate::pipeline::optim::AdadeltaState;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    /// Re-estimate batch-norm statistics over the training set after every
    /// epoch instead of keeping the momentum averages.
    pub recalibrate_bn: bool,
}

/// Trains on `[C, D, H, W]` samples for `cfg.epochs` epochs and returns the
/// mean loss of each epoch. `on_epoch(epoch, loss, model)` runs after every
/// epoch with the model in eval mode.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    inputs: &[Tensor<T>],
    labels: &[u8],
    cfg: &TrainConfig,
    state: &mut AdadeltaState<T>,
    mut on_epoch: impl FnMut(usize, f64, &Model<T>) -> Result<()>,
) -> Result<Vec<f64>> {
    if inputs.is_empty() || inputs.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} samples for {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Validation("batch size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        model.set_mode(Mode::Train);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Tensor<T>> = chunk.iter().map(|&i| &inputs[i]).collect();
            let y: Vec<T> = chunk.iter().map(|&i| T::lit(labels[i] as f64)).collect();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::stack(&batch)?);
            let out = model.forward(&mut tape, x)?;
            let loss = tape.bce_loss(out.probs, &y)?;
            let value = tape.value(loss).item()?.as_f64();
            if !value.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss at epoch {epoch} batch {b}")));
            }
            tape.backward(loss)?;
            model.zero_grad();
            model.accumulate_grads(&tape, &out.params)?;
            state.step(model.params_mut()).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("epoch {epoch} batch {b}: {m}")),
                other => other,
            })?;
            model.zero_grad();
            total += value * chunk.len() as f64;
        }
        let mean = total / inputs.len() as f64;
        trace.push(mean);
        if cfg.recalibrate_bn {
            let batches = order
                .chunks(cfg.batch_size)
                .map(|c| Tensor::stack(&c.iter().map(|&i| &inputs[i]).collect::<Vec<_>>()))
                .collect::<Result<Vec<_>>>()?;
            model.recalibrate_batchnorm(&batches)?;
        }
        model.set_mode(Mode::Eval);
        on_epoch(epoch, mean, model)?;
    }
    model.set_mode(Mode::Eval);
    Ok(trace)
}

/// Eval-mode positive-class probabilities, `batch_size` samples at a time.
pub fn predict_all<T: Scalar>(model: &Model<T>, inputs: &[Tensor<T>], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch_size.max(1)) {
        let refs: Vec<&Tensor<T>> = chunk.iter().collect();
        out.extend(model.predict(&Tensor::stack(&refs)?)?.into_iter().map(|p| p.as_f64()));
    }
    Ok(out)
}

/// Fraction of `scores` on the right side of `threshold`.
pub fn accuracy_at(scores: &[f64], labels: &[u8], threshold: f64) -> f64 {
    let right = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == (l == 1))
        .count();
    right as f64 / scores.len().max(1) as f64
}
