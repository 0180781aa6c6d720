//! Training loops for every method family.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::RunSection;
use super::model::{Model, StepOutcome};
use super::registry::{Category, Method};
use crate::data::{sample_episode, ClassChips, ImageChip};
use crate::error::{Error, Result};
use crate::finetune::{pretrain, HeadKind, PretrainConfig};
use crate::nn::Adam;

/// One optimization step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f32,
    pub accuracy: f32,
}

/// Summary handed to the progress callback after each epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epoch_seconds: Vec<f64>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f32> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// Mean wall-clock minutes per training epoch; zero without epochs.
    pub fn minutes_per_epoch(&self) -> f64 {
        if self.epoch_seconds.is_empty() {
            return 0.0;
        }
        self.epoch_seconds.iter().sum::<f64>() / self.epoch_seconds.len() as f64 / 60.0
    }

    fn summary(&self, epoch: usize) -> EpochSummary {
        let steps: Vec<&StepLog> = self.steps.iter().filter(|s| s.epoch == epoch).collect();
        let n = steps.len().max(1) as f64;
        EpochSummary {
            epoch,
            mean_loss: steps.iter().map(|s| s.loss as f64).sum::<f64>() / n,
            mean_accuracy: steps.iter().map(|s| s.accuracy as f64).sum::<f64>() / n,
            seconds: self.epoch_seconds.get(epoch).copied().unwrap_or(0.0),
        }
    }
}

/// All chips of a part with dense labels `0..classes` in class-id order.
pub fn dense_labels(part: &ClassChips) -> Vec<(Arc<ImageChip>, usize)> {
    part.values()
        .enumerate()
        .flat_map(|(label, chips)| chips.iter().map(move |c| (c.clone(), label)))
        .collect()
}

/// Train `model` on the base classes. `on_epoch` is called after every epoch.
pub fn train(
    model: &mut Model,
    part: &ClassChips,
    run: &RunSection,
    rng: &mut impl Rng,
    on_epoch: &mut dyn FnMut(&EpochSummary),
) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    if model.method.category() == Category::FineTuning {
        let data = dense_labels(part);
        let cfg = PretrainConfig {
            epochs: run.epochs,
            batch_size: model.hyper.batch_size,
            lr: run.lr,
            scale: model.hyper.cosine_scale,
        };
        let kind = if model.method == Method::BaselinePlusPlus {
            HeadKind::Cosine
        } else {
            HeadKind::Linear
        };
        let epochs = pretrain(&mut model.backbone, &mut model.head, kind, &data, &cfg, rng)?;
        for (epoch, e) in epochs.iter().enumerate() {
            for (step, (&loss, &accuracy)) in e.losses.iter().zip(&e.batch_accuracy).enumerate() {
                log.steps.push(StepLog {
                    epoch,
                    step,
                    loss,
                    accuracy,
                });
            }
            log.epoch_seconds.push(e.seconds);
            on_epoch(&log.summary(epoch));
        }
        return Ok(log);
    }

    let mut adam = Adam::new(run.lr);
    let mut apply = |params: &mut [&mut crate::tensor::Tensor<f32>], grads: &[crate::tensor::Tensor<f32>]| {
        adam.step_tensors(params, grads)
    };
    let spec = run.train_episode;
    let batch = if model.method == Method::Maml {
        model.hyper.meta_batch
    } else {
        1
    };
    let mut global = 0;
    for epoch in 0..run.epochs {
        let started = Instant::now();
        let mut done = 0;
        let mut step = 0;
        while done < run.episodes_per_epoch {
            let take = batch.min(run.episodes_per_epoch - done);
            let episodes = (0..take)
                .map(|_| sample_episode(part, &spec, rng))
                .collect::<Result<Vec<_>>>()?;
            let outcome: Result<StepOutcome> = if model.method == Method::Maml {
                model.maml_step(&episodes, &mut apply)
            } else {
                model.episode_step(&episodes[0], &mut apply)
            };
            let outcome = outcome.map_err(|e| match e {
                Error::DivergedTraining { detail, .. } => Error::DivergedTraining { step: global, detail },
                Error::DivergedInnerLoop { step } => Error::DivergedTraining {
                    step: global,
                    detail: format!("inner loop diverged at inner step {step}"),
                },
                Error::DivergedOuterLoop => Error::DivergedTraining {
                    step: global,
                    detail: "meta-gradient is not finite".into(),
                },
                other => other,
            })?;
            log.steps.push(StepLog {
                epoch,
                step,
                loss: outcome.loss,
                accuracy: outcome.accuracy,
            });
            done += take;
            step += 1;
            global += 1;
        }
        log.epoch_seconds.push(started.elapsed().as_secs_f64());
        on_epoch(&log.summary(epoch));
    }
    Ok(log)
}
