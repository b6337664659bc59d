//! AdamW with a per-step cosine schedule, the training and evaluation
//! loops, and checkpoints.

mod checkpoint;
mod optim;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{adamw_step, cosine_lr, grad_norm, OptimizerState, TrainConfig};

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TypedTensor};
use crate::error::{Error, Result};
use crate::losses::segmentation_loss;
use crate::mask::LabelMask;
use crate::metrics::MetricsReport;
use crate::net::{MedVkan, ModelConfig};
use crate::params::{apply_updates, Graph};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-step record of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Global index of the first logged step.
    pub start_step: usize,
    pub total_steps: usize,
    pub losses: Vec<f64>,
    /// Learning rate used at each logged step.
    pub lrs: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

/// Sample order of `epoch`: a permutation drawn from stream `epoch + 1` of
/// the run seed (stream 0 initialises the weights).
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// A model with its parameters and optimiser state.
pub struct Trainer<T> {
    pub model: MedVkan,
    pub state: Checkpoint<T>,
}

impl<T: Scalar + TypedTensor> Trainer<T> {
    /// Fresh weights drawn from `train.seed`.
    pub fn new(model: &ModelConfig, train: &TrainConfig) -> Result<Self> {
        train.validate()?;
        let (net, params) = MedVkan::init::<T>(model, train.seed)?;
        let optimizer = OptimizerState::new(&params);
        Ok(Trainer {
            model: net,
            state: Checkpoint {
                model: model.clone(),
                train: train.clone(),
                params,
                optimizer,
            },
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        ckpt.train.validate()?;
        let (model, _) = MedVkan::init::<T>(&ckpt.model, 0)?;
        Ok(Trainer { model, state: ckpt })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (model, state) = Checkpoint::load(path)?;
        Ok(Trainer { model, state })
    }

    /// Completed optimiser steps.
    pub fn step_count(&self) -> usize {
        self.state.optimizer.step as usize
    }

    /// Rejects datasets the model cannot consume.
    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        let cfg = &self.state.model;
        if data.num_classes != cfg.num_classes {
            return Err(Error::InvalidArgument(format!(
                "dataset has {} classes, model predicts {}",
                data.num_classes, cfg.num_classes
            )));
        }
        let s = data.image_shape();
        if s[0] != cfg.in_channels {
            return Err(Error::InvalidArgument(format!(
                "dataset images have {} channels, model expects {}",
                s[0], cfg.in_channels
            )));
        }
        cfg.check_input_size(s[1], s[2])
    }

    /// Forward, loss, backward and one AdamW update at `lr`; returns the
    /// loss before the update.
    pub fn step(&mut self, images: Tensor<T>, mask: &LabelMask, lr: f64) -> Result<f64> {
        let cfg = &self.state.model;
        let (loss, mut grads, stats) = {
            let mut g = Graph::train(&self.state.params);
            let x = g.constant(images);
            let logits = self.model.forward(&mut g, x)?;
            let loss = segmentation_loss(&mut g, &logits, mask, &cfg.ds_weights)?;
            let value = g.value(loss).item().to_f64_lossy();
            let grads = g.backward(loss)?;
            (value, g.param_gradients(&grads), g.take_stat_updates())
        };
        if !loss.is_finite() {
            return Err(Error::InvalidArgument(format!("loss became {loss} at step {}", self.step_count())));
        }
        if let Some(max) = self.state.train.clip_norm {
            let norm = grad_norm(&grads);
            if norm > max {
                let s = T::lit(max / norm);
                for (_, g) in &mut grads {
                    *g = g.scale(s);
                }
            }
        }
        adamw_step(&mut self.state.params, &grads, &mut self.state.optimizer, lr, &self.state.train)?;
        apply_updates(&mut self.state.params, stats)?;
        Ok(loss)
    }

    /// Trains from the current step to the end of the schedule. With
    /// `out_dir`, periodic checkpoints and a final `checkpoint.vkc` are
    /// written there. `on_step` sees `(step, loss, lr)`.
    pub fn run(&mut self, data: &Dataset, out_dir: Option<&Path>, on_step: impl FnMut(usize, f64, f64)) -> Result<TrainLog> {
        let total = self.state.train.total_steps(data.len());
        self.run_until(data, total, out_dir, on_step)
    }

    /// As [`run`](Self::run), but stops once `until` steps are complete.
    /// The schedule still spans the full run.
    pub fn run_until(
        &mut self,
        data: &Dataset,
        until: usize,
        out_dir: Option<&Path>,
        mut on_step: impl FnMut(usize, f64, f64),
    ) -> Result<TrainLog> {
        self.check_dataset(data)?;
        let tc = self.state.train.clone();
        let per_epoch = tc.steps_per_epoch(data.len());
        let total = tc.total_steps(data.len());
        let start = self.step_count();
        if start > until || until > total {
            return Err(Error::InvalidArgument(format!(
                "cannot train from step {start} to {until} in a schedule of {total}"
            )));
        }
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut log = TrainLog {
            start_step: start,
            total_steps: total,
            ..Default::default()
        };
        let mut order = Vec::new();
        let mut order_epoch = usize::MAX;
        for step in start..until {
            let (epoch, pos) = (step / per_epoch, step % per_epoch);
            if epoch != order_epoch {
                order = epoch_order(tc.seed, epoch, data.len());
                order_epoch = epoch;
            }
            let lo = pos * tc.batch_size;
            let batch = &order[lo..(lo + tc.batch_size).min(data.len())];
            let (images, mask) = data.batch::<T>(batch)?;
            let lr = cosine_lr(step, total, tc.lr0, tc.lr_min)?;
            let loss = self.step(images, &mask, lr)?;
            log.losses.push(loss);
            log.lrs.push(lr);
            on_step(step, loss, lr);
            let done = step + 1;
            if let Some(dir) = out_dir {
                if tc.checkpoint_every > 0 && done % tc.checkpoint_every == 0 && done < total {
                    let path = dir.join(format!("checkpoint_{done:06}.vkc"));
                    self.state.save(&path)?;
                    log.checkpoints.push(path);
                }
            }
        }
        if let Some(dir) = out_dir {
            let path = dir.join("checkpoint.vkc");
            self.state.save(&path)?;
            log.checkpoints.push(path);
        }
        Ok(log)
    }

    /// Argmax labels of the full-resolution head for `B×C×H×W` images.
    pub fn predict(&self, images: Tensor<T>) -> Result<LabelMask> {
        let mut g = Graph::eval(&self.state.params);
        let x = g.constant(images);
        let logits = self.model.forward(&mut g, x)?;
        LabelMask::argmax(g.value(logits[0]))
    }

    /// Scores predictions on every sample of `data`, batched by the
    /// configured batch size.
    pub fn evaluate(&self, data: &Dataset, tau: f64) -> Result<MetricsReport> {
        self.check_dataset(data)?;
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for chunk in idx.chunks(self.state.train.batch_size) {
            let (images, mask) = data.batch::<T>(chunk)?;
            preds.push(self.predict(images)?);
            gts.push(mask);
        }
        let pred = LabelMask::stack(&preds.iter().collect::<Vec<_>>())?;
        let gt = LabelMask::stack(&gts.iter().collect::<Vec<_>>())?;
        MetricsReport::compute(&pred, &gt, data.num_classes, tau)
    }
}

/// Trains a fresh model; returns the final checkpoint path (when
/// `out_dir` is given) and the log.
pub fn train<T: Scalar + TypedTensor>(
    model: &ModelConfig,
    config: &TrainConfig,
    data: &Dataset,
    out_dir: Option<&Path>,
) -> Result<(Trainer<T>, TrainLog)> {
    let mut trainer = Trainer::new(model, config)?;
    let log = trainer.run(data, out_dir, |_, _, _| {})?;
    Ok((trainer, log))
}

/// Loads `checkpoint` and scores it on `data`.
pub fn evaluate<T: Scalar + TypedTensor>(checkpoint: impl AsRef<Path>, data: &Dataset, tau: f64) -> Result<MetricsReport> {
    Trainer::<T>::load(checkpoint)?.evaluate(data, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;

    fn small() -> (ModelConfig, TrainConfig, Dataset) {
        let data = Dataset::new(2, synth_dataset(5, 4, 32, 2).unwrap()).unwrap();
        let tc = TrainConfig {
            batch_size: 2,
            max_steps: Some(4),
            seed: 9,
            ..Default::default()
        };
        (ModelConfig::tiny(1, 2), tc, data)
    }

    #[test]
    fn shuffle_is_a_seeded_permutation() {
        let a = epoch_order(1, 0, 10);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(1, 0, 10));
        assert_ne!(a, epoch_order(1, 1, 10));
    }

    #[test]
    fn lr_log_follows_schedule() {
        let (m, t, d) = small();
        let (trainer, log) = train::<f32>(&m, &t, &d, None).unwrap();
        assert_eq!(trainer.step_count(), 4);
        for (s, &lr) in log.lrs.iter().enumerate() {
            assert_eq!(lr, cosine_lr(s, 4, t.lr0, t.lr_min).unwrap());
        }
        assert!(log.losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn dataset_mismatch_fails_before_training() {
        let (m, t, _) = small();
        let three = Dataset::new(3, synth_dataset(5, 2, 32, 3).unwrap()).unwrap();
        let mut tr = Trainer::<f32>::new(&m, &t).unwrap();
        assert!(tr.run(&three, None, |_, _, _| {}).is_err());
        assert_eq!(tr.step_count(), 0);
        let rgb = ModelConfig::tiny(3, 2);
        let (_, _, d) = small();
        assert!(Trainer::<f32>::new(&rgb, &t).unwrap().check_dataset(&d).is_err());
    }

    #[test]
    fn all_background_prediction_scores_zero() {
        let (m, t, d) = small();
        let mut tr = Trainer::<f32>::new(&m, &t).unwrap();
        let bias = tr.state.params.find("head.bias").unwrap();
        tr.state.params.set(bias, Tensor::new(vec![2], vec![1e6, -1e6]).unwrap()).unwrap();
        let r = tr.evaluate(&d, 1.0).unwrap();
        assert_eq!(r.dice[1], 0.0);
        assert_eq!(r.mean_foreground_dice, 0.0);
        let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
