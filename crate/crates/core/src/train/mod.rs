//! L1-loss training with Adam, linear warmup and step decay.

mod adam;

pub use adam::{Adam, AdamConfig};

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::GazeModel;
use crate::nn::{Context, Mode, Module};
use crate::tensor::TensorError;

/// Mean absolute difference over every element.
pub fn l1_loss(g: &mut Graph, pred: Var, target: Var) -> crate::tensor::Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(TensorError::ShapeMismatch {
            op: "l1_loss",
            lhs: g.shape(pred).to_vec(),
            rhs: g.shape(target).to_vec(),
        });
    }
    let d = g.sub(pred, target)?;
    let a = g.abs(d)?;
    g.mean(a)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPlan {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    /// Multiplier applied to the learning rate every `decay_step_epochs`.
    pub decay_factor: f64,
    pub decay_step_epochs: usize,
    pub warmup_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// L2 coefficient added to every gradient.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            batch_size: 512,
            epochs: 50,
            base_lr: 5e-4,
            decay_factor: 0.5,
            decay_step_epochs: 20,
            warmup_epochs: 5,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> crate::tensor::Result<()> {
        let bad = |m: String| Err(TensorError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor {} is outside (0, 1]", self.decay_factor));
        }
        if self.decay_step_epochs == 0 {
            return bad("decay_step_epochs must be at least 1".into());
        }
        // A zero-epoch plan is a no-op and carries no schedule to check.
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return bad(format!("warmup_epochs {} must be below epochs {}", self.warmup_epochs, self.epochs));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad(format!("base_lr {} must be positive", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_epsilon > 0.0) || self.weight_decay < 0.0 {
            return bad("adam_epsilon must be positive and weight_decay non-negative".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> crate::tensor::Result<f64> {
        if epoch >= self.epochs {
            return Err(TensorError::Config(format!("epoch {epoch} is outside a {}-epoch plan", self.epochs)));
        }
        if epoch < self.warmup_epochs {
            return Ok(self.base_lr * (epoch + 1) as f64 / self.warmup_epochs as f64);
        }
        let k = (epoch - self.warmup_epochs) / self.decay_step_epochs;
        Ok(self.base_lr * self.decay_factor.powi(k as i32))
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
            weight_decay: self.weight_decay,
        }
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    pub final_checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }

    /// One JSON object per epoch, newline separated.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain record") + "\n")
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(Error::io(path))
    }
}

/// Optional side outputs of a training run.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Directory receiving `final/` and, if `checkpoint_every` is set, `epoch-NNN/`.
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: Option<usize>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

pub fn train(model: &mut GazeModel, data: &Dataset, plan: &TrainPlan) -> Result<TrainReport> {
    train_with(model, data, plan, TrainOptions::default())
}

/// Trains `model` in place. Optimizer state starts fresh on every call.
pub fn train_with(model: &mut GazeModel, data: &Dataset, plan: &TrainPlan, mut opts: TrainOptions<'_>) -> Result<TrainReport> {
    plan.validate()?;
    if data.is_empty() {
        return Err(TensorError::Config("cannot train on an empty dataset".into()).into());
    }
    let mut adam = Adam::new(plan.adam());
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..plan.epochs {
        let start = Instant::now();
        let lr = plan.lr_at(epoch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch, idx) in order.chunks(plan.batch_size).enumerate() {
            let loss = step(model, data, idx, rng.next_u64(), lr, &mut adam).map_err(|e| match e {
                Error::Tensor(TensorError::NonFinite { .. }) => Error::NonFiniteLoss { epoch, batch },
                other => other,
            })?;
            total += loss * idx.len() as f64;
            report.steps += 1;
        }
        let record = EpochRecord {
            epoch,
            lr,
            mean_loss: total / data.len() as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&record);
        }
        report.epochs.push(record);
        if let (Some(dir), Some(k)) = (&opts.checkpoint_dir, opts.checkpoint_every) {
            if k > 0 && (epoch + 1) % k == 0 {
                checkpoint::save(model, &dir.join(format!("epoch-{:03}", epoch + 1)))?;
            }
        }
    }
    if let Some(dir) = &opts.checkpoint_dir {
        let path = dir.join("final");
        checkpoint::save(model, &path)?;
        report.final_checkpoint = Some(path);
    }
    Ok(report)
}

fn step(model: &mut GazeModel, data: &Dataset, idx: &[usize], seed: u64, lr: f64, adam: &mut Adam) -> Result<f64> {
    let (x, y) = data.batch(idx)?;
    let mut g = Graph::new();
    let mut cx = Context::new(&mut g, &model.params, Mode::Train, seed);
    let x = cx.graph.constant(x);
    let pred = model.forward(&mut cx, x)?;
    let updates = cx.take_updates();
    let target = g.constant(y);
    let loss = l1_loss(&mut g, pred, target)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(TensorError::NonFinite { op: "l1_loss" }.into());
    }
    let grads = g.backward(loss)?;
    model.params.zero_grad();
    model.params.accumulate(&grads)?;
    drop(grads);
    model.params.apply_updates(updates)?;
    adam.step(&mut model.params, lr)?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::models::{build_variant, ModelVariant, VariantTag};
    use crate::tensor::Tensor;

    fn plan(epochs: usize) -> TrainPlan {
        TrainPlan {
            batch_size: 16,
            epochs,
            base_lr: 1e-3,
            warmup_epochs: usize::from(epochs > 1),
            decay_step_epochs: 5,
            ..TrainPlan::default()
        }
    }

    fn data(samples: usize) -> Dataset {
        let cfg = SyntheticConfig {
            samples,
            subjects: 4,
            test_subjects: 1,
            ..SyntheticConfig::scaled_to(32)
        };
        generate_synthetic(&cfg).unwrap()
    }

    fn loss_of(pred: Vec<f64>, target: Vec<f64>) -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let n = pred.len() / 2;
        let p = g.variable(Tensor::new([n, 2], pred).unwrap());
        let t = g.constant(Tensor::new([n, 2], target).unwrap());
        let l = l1_loss(&mut g, p, t).unwrap();
        let v = g.value(l).data()[0];
        let grads = g.backward(l).unwrap();
        (v, grads.get(p).unwrap().data().to_vec())
    }

    #[test]
    fn l1_examples() {
        assert_eq!(loss_of(vec![0.3, -0.2], vec![0.3, -0.2]).0, 0.0);
        let (v, grad) = loss_of(vec![1.0, 0.0], vec![0.0, 0.0]);
        assert_eq!(v, 0.5);
        assert_eq!(grad, vec![0.5, 0.0]);
        // finite-difference oracle on the first element
        let h = 1e-6;
        let fd = (loss_of(vec![1.0 + h, 0.0], vec![0.0; 2]).0 - loss_of(vec![1.0 - h, 0.0], vec![0.0; 2]).0) / (2.0 * h);
        assert!((fd - 0.5).abs() < 1e-8);
    }

    #[test]
    fn l1_rejects_shape_mismatch() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::zeros([2, 2]).unwrap());
        let t = g.constant(Tensor::zeros([1, 2]).unwrap());
        assert!(l1_loss(&mut g, p, t).is_err());
    }

    #[test]
    fn schedule_examples() {
        let p = TrainPlan::default();
        assert!((p.lr_at(0).unwrap() - 1e-4).abs() < 1e-18);
        assert_eq!(p.lr_at(5).unwrap(), 5e-4);
        assert_eq!(p.lr_at(24).unwrap(), 5e-4);
        assert_eq!(p.lr_at(25).unwrap(), 2.5e-4);
        assert_eq!(p.lr_at(45).unwrap(), 1.25e-4);
        assert!(p.lr_at(50).is_err());
        assert_eq!(p.lr_at(p.warmup_epochs).unwrap(), p.base_lr);
    }

    #[test]
    fn schedule_without_warmup_starts_at_base() {
        let p = TrainPlan {
            warmup_epochs: 0,
            epochs: 3,
            decay_step_epochs: 1,
            ..TrainPlan::default()
        };
        assert_eq!(p.lr_at(0).unwrap(), 5e-4);
        assert_eq!(p.lr_at(2).unwrap(), 1.25e-4);
    }

    #[test]
    fn invalid_plans_are_rejected() {
        let base = TrainPlan::default();
        for p in [
            TrainPlan { batch_size: 0, ..base.clone() },
            TrainPlan { decay_factor: 0.0, ..base.clone() },
            TrainPlan { decay_factor: 1.5, ..base.clone() },
            TrainPlan { warmup_epochs: 50, ..base.clone() },
            TrainPlan { decay_step_epochs: 0, ..base.clone() },
        ] {
            assert!(p.validate().is_err(), "{p:?}");
        }
        assert!(base.validate().is_ok());
    }

    #[test]
    fn zero_epochs_changes_nothing() {
        let mut m = build_variant(&ModelVariant::toy(VariantTag::Hybrid, 32), 0).unwrap();
        let before = m.params.clone();
        let r = train(&mut m, &data(8), &plan(0)).unwrap();
        assert!(r.epochs.is_empty());
        assert_eq!(r.steps, 0);
        for ((_, a), (_, b)) in before.iter().zip(m.params.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn step_count_keeps_the_last_partial_batch() {
        let mut m = build_variant(&ModelVariant::toy(VariantTag::ConvBaseline, 32), 0).unwrap();
        let r = train(&mut m, &data(37), &plan(2)).unwrap();
        assert_eq!(r.steps, 2 * 3);
        assert_eq!(r.epochs.len(), 2);
        assert!(r.epochs.iter().all(|e| e.mean_loss >= 0.0));
    }

    #[test]
    fn runs_are_reproducible() {
        let d = data(24);
        let run = || {
            let mut m = build_variant(&ModelVariant::toy(VariantTag::Hybrid, 32), 5).unwrap();
            let r = train(&mut m, &d, &plan(2)).unwrap();
            (r.losses(), m.params)
        };
        let (la, pa) = run();
        let (lb, pb) = run();
        assert_eq!(la, lb);
        for ((_, a), (_, b)) in pa.iter().zip(pb.iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }

    #[test]
    fn batch_norm_statistics_move_during_training() {
        let mut m = build_variant(&ModelVariant::toy(VariantTag::ConvBaseline, 32), 0).unwrap();
        let id = m.params.id("stem.bn1.running_mean").unwrap();
        let before = m.params.value(id).clone();
        train(&mut m, &data(8), &plan(1)).unwrap();
        assert_ne!(m.params.value(id), &before);
    }

    #[test]
    fn loss_decreases_on_synthetic_faces() {
        let mut m = build_variant(&ModelVariant::toy(VariantTag::Hybrid, 32), 1).unwrap();
        let r = train(&mut m, &data(160), &plan(10)).unwrap();
        let l = r.losses();
        assert!(l[9] < l[0], "{l:?}");
    }

    #[test]
    fn report_lines_are_json_records() {
        let r = TrainReport {
            epochs: vec![EpochRecord { epoch: 0, lr: 1e-4, mean_loss: 0.1, seconds: 0.5 }],
            steps: 1,
            final_checkpoint: None,
        };
        let line = r.to_jsonl();
        let back: EpochRecord = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(back, r.epochs[0]);
    }

    #[test]
    fn checkpoints_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = build_variant(&ModelVariant::toy(VariantTag::Pure, 32), 0).unwrap();
        let opts = TrainOptions {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            checkpoint_every: Some(1),
            on_epoch: None,
        };
        let r = train_with(&mut m, &data(8), &plan(2), opts).unwrap();
        assert!(dir.path().join("epoch-001/manifest.json").exists());
        let back = checkpoint::load(r.final_checkpoint.as_ref().unwrap()).unwrap();
        for ((_, a), (_, b)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn divergence_names_the_batch() {
        let mut m = build_variant(&ModelVariant::toy(VariantTag::ConvBaseline, 32), 0).unwrap();
        let id = m.params.id("head.fc2.bias").unwrap();
        m.params.value_mut(id).data_mut()[0] = f64::INFINITY;
        let err = train(&mut m, &data(8), &plan(1)).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 0, batch: 0 }), "{err}");
        assert!(err.is_numerical());
    }
}
