//! Mini-batch training with Adam and per-image evaluation.

use std::borrow::Borrow;
use std::fmt;

use rayon::prelude::*;

use crate::autograd::Tape;
use crate::data::SegmentationSample;
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::metrics::{binarize_logits, binarize_probs, EvalReport, ImageScore, MaskCounts};
use crate::model::StmUNet;
use crate::optim::Adam;
use crate::rng::{SeededRng, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size_train: usize,
    /// Always 1: every image is scored on its own.
    pub batch_size_eval: usize,
    pub seed: u64,
    pub loss_kind: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 1e-4,
            batch_size_train: 8,
            batch_size_eval: 1,
            seed: 0,
            loss_kind: LossKind::BceDice,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if self.batch_size_eval != 1 {
            return Err(Error::Config(format!(
                "batch_size_eval is fixed at 1, got {}",
                self.batch_size_eval
            )));
        }
        if self.batch_size_train == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs and batch_size_train must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean mini-batch loss over the epoch.
    pub loss: f64,
    pub val_miou: f64,
    pub val_mdice: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} loss={:.6} val_miou={:.6} val_mdice={:.6}",
            self.epoch, self.loss, self.val_miou, self.val_mdice
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochLog>,
    /// Epoch (1-based) with the highest validation mIoU; earliest on ties.
    pub best_epoch: usize,
    pub best_miou: f64,
    /// Snapshot of the model at `best_epoch`.
    pub best: StmUNet<f32>,
}

/// Stacks images and masks of `samples` into `(B,3,H,W)` and `(B,1,H,W)`.
pub fn collate<S: Borrow<SegmentationSample>>(samples: &[S]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = samples.first().ok_or(Error::EmptyDataset)?.borrow();
    let (h, w) = first.size();
    let mut images = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut masks = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        let s = s.borrow();
        if s.size() != (h, w) {
            return Err(Error::shape("collate", s.image.shape(), first.image.shape()));
        }
        images.extend_from_slice(s.image.data());
        masks.extend_from_slice(s.mask.data());
    }
    let n = samples.len();
    Ok((Tensor::new(&[n, 3, h, w], images)?, Tensor::new(&[n, 1, h, w], masks)?))
}

/// Loss value and one gradient per parameter, in store order.
pub fn loss_and_grads(model: &StmUNet<f32>, images: &Tensor<f32>, masks: &Tensor<f32>) -> Result<(f64, Vec<Tensor<f32>>)> {
    let tape = Tape::new();
    let g = model.params().bind(&tape);
    let logits = model.forward(&g, g.input(images.clone()))?;
    let loss = logits.bce_dice_loss(masks)?;
    let value = f64::from(loss.value().item()?);
    let grads = tape.backward(loss)?;
    Ok((value, g.vars().iter().map(|&v| grads.get_or_zeros(v)).collect()))
}

pub fn train<S: Borrow<SegmentationSample> + Sync>(
    model: &mut StmUNet<f32>,
    train_set: &[S],
    val_set: &[S],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(model, train_set, val_set, cfg, |_| {})
}

/// Trains in place, calling `on_epoch` after each epoch's validation.
///
/// Batches are drawn from a seeded per-run shuffle. A non-finite batch loss
/// aborts with [`Error::Divergence`].
pub fn train_with<S, F>(
    model: &mut StmUNet<f32>,
    train_set: &[S],
    val_set: &[S],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    S: Borrow<SegmentationSample> + Sync,
    F: FnMut(&EpochLog),
{
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = SeededRng::new(cfg.seed, Stream::Shuffle);
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, StmUNet<f32>)> = None;

    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size_train) {
            let batch: Vec<&SegmentationSample> = chunk.iter().map(|&i| train_set[i].borrow()).collect();
            let (images, masks) = collate(&batch)?;
            let (loss, grads) = loss_and_grads(model, &images, &masks)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            opt.step(model.params_mut(), &grads)?;
            total += loss;
            batches += 1;
        }
        let report = evaluate(model, val_set)?;
        let log = EpochLog {
            epoch,
            loss: total / batches as f64,
            val_miou: report.miou,
            val_mdice: report.mdice,
        };
        on_epoch(&log);
        epochs.push(log);
        if best.as_ref().is_none_or(|(_, m, _)| report.miou > *m) {
            best = Some((epoch, report.miou, model.clone()));
        }
    }

    let (best_epoch, best_miou, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        epochs,
        best_epoch,
        best_miou,
        best,
    })
}

/// Scores every image on its own at threshold 0.5; report order follows
/// `samples`.
pub fn evaluate<S: Borrow<SegmentationSample> + Sync>(model: &StmUNet<f32>, samples: &[S]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let scores = samples
        .par_iter()
        .map(|s| {
            let s = s.borrow();
            let (h, w) = s.size();
            let logits = model.predict(&s.image.reshape(&[1, 3, h, w])?)?;
            let c = MaskCounts::from_masks(&binarize_logits(&logits), &binarize_probs(&s.mask))?;
            Ok(ImageScore {
                id: s.id.clone(),
                iou: c.iou(),
                dice: c.dice(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_scores(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::model::ModelConfig;

    fn small_model() -> StmUNet<f32> {
        let mut cfg = ModelConfig::tiny();
        cfg.input_size = (32, 32);
        StmUNet::build(cfg).unwrap()
    }

    #[test]
    fn defaults_follow_recipe() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.lr, c.batch_size_train, c.batch_size_eval), (300, 1e-4, 8, 1));
        assert!(c.validate().is_ok());
        assert!(TrainConfig { batch_size_eval: 2, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { lr: -1.0, ..c }.validate().is_err());
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let data = synth_blobs(6, 32, 1).unwrap();
        let mut model = small_model();
        let before = model.params().checksum();
        let cfg = TrainConfig {
            epochs: 2,
            lr: 0.0,
            batch_size_train: 4,
            ..TrainConfig::default()
        };
        let out = train(&mut model, &data[..4], &data[4..], &cfg).unwrap();
        assert_eq!(model.params().checksum(), before);
        assert_eq!(out.epochs.len(), 2);
        assert!(out.epochs.iter().all(|e| e.loss.is_finite()));
    }

    #[test]
    fn empty_sets_rejected() {
        let model = small_model();
        let none: &[SegmentationSample] = &[];
        assert!(matches!(evaluate(&model, none), Err(Error::EmptyDataset)));
    }

    #[test]
    fn duplicated_images_score_equally() {
        let data = synth_blobs(1, 32, 5).unwrap();
        let model = small_model();
        let twice = [&data[0], &data[0]];
        let r = evaluate(&model, &twice).unwrap();
        assert_eq!(r.per_image[0], r.per_image[1]);
    }

    #[test]
    fn log_line_format() {
        let l = EpochLog {
            epoch: 3,
            loss: 0.5,
            val_miou: 0.25,
            val_mdice: 0.4,
        };
        assert_eq!(l.to_string(), "epoch=3 loss=0.500000 val_miou=0.250000 val_mdice=0.400000");
    }
}
