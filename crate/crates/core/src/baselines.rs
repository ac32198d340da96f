//! Reference procedures: cross-entropy training (also used for the
//! teacher) and fixed-α distillation.

use crate::autodiff::Tape;
use crate::data::LabeledDataset;
use crate::error::Result;
use crate::losses::{fixed_alpha_kd_loss, val_loss, KdConfig};
use crate::nn::{Model, ModelState};
use crate::optim::SgdMomentum;
use crate::scalar::Real;
use crate::seed::SeedStreams;
use crate::tensor::Tensor;
use crate::train::{make_batch, run_epochs, teacher_logits, Learner, RunLog, Splits, StepStats, TrainConfig};

fn sgd(cfg: &TrainConfig) -> SgdMomentum {
    SgdMomentum {
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    }
}

struct CeLearner<'a, T: Real> {
    model: Model<T>,
    train: &'a LabeledDataset,
    opt: SgdMomentum,
}

impl<T: Real> Learner<T> for CeLearner<'_, T> {
    fn step(&mut self, batch: &[usize], _val: &[usize], lr: f64) -> Result<StepStats> {
        let b = make_batch::<T>(self.train, batch, None)?;
        let mut tape = Tape::new();
        let params = self.model.state.load(&mut tape, true);
        let x = tape.constant(b.x);
        let logits = self.model.arch.forward(&mut tape, &params, x)?;
        let loss = val_loss(&mut tape, logits, &b.onehot)?;
        tape.backward(loss)?;
        let grads = self.model.state.grads_from(&tape, &params);
        self.opt.step(&mut self.model.state, &grads, lr)?;
        Ok(StepStats {
            loss: tape.value(loss).item()?.f64(),
            mean_w_hard: None,
            mean_w_soft: None,
        })
    }

    fn student(&self) -> &ModelState<T> {
        &self.model.state
    }
}

/// Plain cross-entropy training on the training split.
pub fn train_ce<T: Real>(cfg: &TrainConfig, seeds: &SeedStreams, splits: Splits<'_>, model: Model<T>) -> Result<(Model<T>, RunLog)> {
    let arch = model.arch.clone();
    let mut l = CeLearner {
        model,
        train: splits.train,
        opt: sgd(cfg),
    };
    let log = run_epochs(cfg, seeds, &splits, &arch, &mut l)?;
    Ok((l.model, log))
}

/// The teacher is a cross-entropy model trained on the (imbalanced)
/// training split only; the validation split is never seen.
pub fn train_teacher<T: Real>(cfg: &TrainConfig, seeds: &SeedStreams, splits: Splits<'_>, model: Model<T>) -> Result<(Model<T>, RunLog)> {
    train_ce(cfg, seeds, splits, model)
}

/// One fixed-α distillation step; shared with the equivalence checks.
pub fn kd_step<T: Real>(
    model: &mut Model<T>,
    opt: &SgdMomentum,
    batch: &crate::bilevel::DistillBatch<T>,
    kd: &KdConfig,
    lr: f64,
) -> Result<T> {
    let teacher = batch
        .teacher_logits
        .as_ref()
        .ok_or_else(|| crate::error::Error::Contract("distillation batch has no teacher logits".into()))?;
    let mut tape = Tape::new();
    let params = model.state.load(&mut tape, true);
    let x = tape.constant(batch.x.clone());
    let logits = model.arch.forward(&mut tape, &params, x)?;
    let loss = fixed_alpha_kd_loss(&mut tape, teacher, logits, &batch.onehot, kd)?;
    tape.backward(loss)?;
    let grads = model.state.grads_from(&tape, &params);
    opt.step(&mut model.state, &grads, lr)?;
    tape.value(loss).item()
}

struct KdLearner<'a, T: Real> {
    model: Model<T>,
    train: &'a LabeledDataset,
    teacher_logits: Tensor<T>,
    opt: SgdMomentum,
    kd: KdConfig,
}

impl<T: Real> Learner<T> for KdLearner<'_, T> {
    fn step(&mut self, batch: &[usize], _val: &[usize], lr: f64) -> Result<StepStats> {
        let b = make_batch(self.train, batch, Some(&self.teacher_logits))?;
        let loss = kd_step(&mut self.model, &self.opt, &b, &self.kd, lr)?;
        Ok(StepStats {
            loss: loss.f64(),
            mean_w_hard: Some(1.0 - self.kd.alpha),
            mean_w_soft: Some(self.kd.alpha),
        })
    }

    fn student(&self) -> &ModelState<T> {
        &self.model.state
    }
}

/// Fixed-α distillation with `cfg.alpha` and `cfg.tau`.
pub fn train_vanilla_kd<T: Real>(
    cfg: &TrainConfig,
    seeds: &SeedStreams,
    splits: Splits<'_>,
    teacher: &Model<T>,
    student: Model<T>,
) -> Result<(Model<T>, RunLog)> {
    let kd = KdConfig {
        tau: cfg.tau,
        alpha: cfg.alpha,
    };
    kd.validate()?;
    let arch = student.arch.clone();
    let mut l = KdLearner {
        model: student,
        train: splits.train,
        teacher_logits: teacher_logits(teacher, splits.train)?,
        opt: sgd(cfg),
        kd,
    };
    let log = run_epochs(cfg, seeds, &splits, &arch, &mut l)?;
    Ok((l.model, log))
}
