use super::loss::{self, LossValues};
use super::network::Model;
use crate::data::{batch_iter, derive_seed, MultiViewBatch, MultiViewDataset};
use crate::engine::{AdamConfig, AdamState, Mode};
use crate::error::{Error, Result};

const DROPOUT_STREAM: u64 = 0x6472_6f70;

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based index of the epoch just finished.
    pub epoch: u64,
    /// Per-term and objective means over the epoch's batches.
    pub mean: LossValues,
    pub batches: usize,
}

impl TrainState {
    pub fn new(model: Model, adam: AdamConfig, seed: u64) -> Self {
        Self {
            model,
            adam: AdamState::new(adam),
            epoch: 0,
            step: 0,
            seed,
        }
    }

    /// One forward/backward pass and Adam update on a batch.
    pub fn train_step(&mut self, batch: &MultiViewBatch) -> Result<LossValues> {
        let dropout_seed = derive_seed(self.seed ^ DROPOUT_STREAM, self.step);
        let model = &self.model;
        let mut fwd = model.forward(Mode::Train, dropout_seed);
        let trace = fwd.trace(&batch.x, &batch.y)?;
        let terms = loss::compute(&mut fwd.tape, &trace, &model.spec, &model.weights)?;
        let values = terms.values(&fwd.tape);
        if !values.objective.is_finite() {
            return Err(Error::Numerical(format!(
                "objective became {} at step {}",
                values.objective, self.step
            )));
        }
        let (grads, bn) = fwd.finish(terms.objective)?;
        self.adam.step(&mut self.model.params, &grads)?;
        self.model.apply_bn_updates(&bn);
        self.step += 1;
        Ok(values)
    }
}

/// Shuffled pass over `data` (order seeded by the state seed and epoch).
pub fn train_epoch(state: &mut TrainState, data: &MultiViewDataset, batch_size: usize) -> Result<EpochMetrics> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "batch_size {batch_size} < 2 leaves correlation undefined"
        )));
    }
    let mut sum = LossValues::default();
    let mut batches = 0;
    for batch in batch_iter(data, batch_size, state.seed, state.epoch)? {
        let v = state.train_step(&batch)?;
        for (s, t) in sum.terms.iter_mut().zip(v.terms) {
            *s += t;
        }
        sum.objective += v.objective;
        batches += 1;
    }
    if batches == 0 {
        return Err(Error::Usage("dataset yields no batch of at least 2 samples".into()));
    }
    let k = batches as f64;
    state.epoch += 1;
    Ok(EpochMetrics {
        epoch: state.epoch,
        mean: LossValues {
            terms: sum.terms.map(|t| t / k),
            objective: sum.objective / k,
        },
        batches,
    })
}
