//! Minibatch training loop and dataset evaluation.

use crate::autodiff::Tape;
use crate::data::{self, Sample};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::metrics::{self, AggregateReport};
use crate::model::{self, FcnModel};
use crate::ops;
use crate::optim::{self, SgdConfig, SgdState};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: u64,
    pub mean_loss: f64,
    /// Mean Jaccard index of the masks predicted during the epoch's forward passes.
    pub train_ja: f64,
}

pub struct Trainer {
    pub model: FcnModel<f32>,
    pub state: SgdState<f32>,
    pub config: SgdConfig,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
}

impl Trainer {
    pub fn new(model: FcnModel<f32>, config: SgdConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let state = SgdState::new(model.params());
        Ok(Trainer {
            model,
            state,
            config,
            seed,
        })
    }

    /// One forward, backward and update on a normalised batch. Returns the
    /// batch loss and the masks predicted before the update.
    pub fn step(&mut self, batch: crate::Tensor<f32>, labels: &[u8]) -> Result<(f64, Vec<BinaryMask>)> {
        optim::zero_grads(self.model.params_mut());
        let mut tape = Tape::new();
        let out = self.model.forward(&mut tape, batch)?;
        let (loss, _) = ops::softmax_cross_entropy(&mut tape, out.logits, labels)?;
        let loss_value = tape.value(loss).data()[0] as f64;
        if !loss_value.is_finite() {
            return Err(Error::NonFinite { op: "loss".into() });
        }
        let masks = model::predict_mask(tape.value(out.logits))?;
        tape.backward(loss, self.model.params_mut())?;
        drop(tape);
        optim::sgd_step(self.model.params_mut(), &mut self.state, &self.config)?;
        Ok((loss_value, masks))
    }

    /// A full pass over `samples` in the epoch's shuffled order. The reported
    /// loss is the sample-weighted mean of batch losses.
    pub fn epoch(&mut self, samples: &[Sample], epoch: u64) -> Result<EpochStats> {
        let batches = data::make_batches(samples.len(), self.config.batch_size, self.seed, epoch)?;
        let means = self.model.means;
        let mut loss_sum = 0.0;
        let mut ja_sum = 0.0;
        for idx in &batches {
            let (batch, labels) = data::collate(samples, idx, means)?;
            let (loss, masks) = self.step(batch, &labels)?;
            loss_sum += loss * idx.len() as f64;
            for (mask, &i) in masks.iter().zip(idx) {
                let c = metrics::confusion_counts(mask, &samples[i].mask)?;
                ja_sum += metrics::compute_metrics("", &c).ja;
            }
        }
        let n = samples.len() as f64;
        Ok(EpochStats {
            epoch,
            mean_loss: loss_sum / n,
            train_ja: ja_sum / n,
        })
    }
}

/// Predicted mask for one raw `(1, 3, h, w)` image of any size: reflect-pad to
/// the input multiple, run, crop back.
pub fn predict(model: &FcnModel<f32>, image: &crate::Tensor<f32>) -> Result<BinaryMask> {
    let s = image.shape();
    let x = data::normalize(image, model.means)?;
    let padded = data::pad_to_multiple(&x, model.config().input_multiple);
    let logits = model.infer(padded)?;
    let logits = data::crop(&logits, s.h, s.w)?;
    model::predict_mask(&logits)?
        .pop()
        .ok_or_else(|| Error::Contract("empty prediction".into()))
}

pub fn evaluate(model: &FcnModel<f32>, samples: &[Sample]) -> Result<AggregateReport> {
    let per_image = samples
        .iter()
        .map(|s| {
            let pred = predict(model, &s.image)?;
            let c = metrics::confusion_counts(&pred, &s.mask)?;
            Ok(metrics::compute_metrics(s.id.clone(), &c))
        })
        .collect::<Result<Vec<_>>>()?;
    metrics::aggregate(per_image)
}

/// Mean loss over `samples` without updating the model.
pub fn dataset_loss(model: &FcnModel<f32>, samples: &[Sample], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let all: Vec<usize> = (0..samples.len()).collect();
    for idx in all.chunks(batch_size.max(1)) {
        let (batch, labels) = data::collate(samples, idx, model.means)?;
        let mut tape = Tape::inference();
        let out = model.forward(&mut tape, batch)?;
        let (loss, _) = ops::softmax_cross_entropy(&mut tape, out.logits, &labels)?;
        total += tape.value(loss).data()[0] as f64 * idx.len() as f64;
    }
    Ok(total / samples.len() as f64)
}
