//! Epoch-level training: configuration, the shared epoch loop, the bilevel
//! `fit`, and the per-epoch run log.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bilevel::{Bilevel, BilevelConfig, DistillBatch, DistillObjective, HypergradPath, MetaNet};
use crate::data::{BatchOrder, CyclingSampler, LabeledDataset};
use crate::error::{Error, Result};
use crate::losses::per_sample_ce;
use crate::metrics;
use crate::nn::{Architecture, Model, ModelState};
use crate::optim::{MetaOptimizerKind, MultiStepLr};
use crate::scalar::Real;
use crate::seed::SeedStreams;
use crate::tensor::{one_hot, Tensor};

/// All optimization hyperparameters of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub eta_theta: f64,
    pub eta_phi: f64,
    pub k: usize,
    pub tau: f64,
    /// Fixed mixing weight of the vanilla KD baseline.
    pub alpha: f64,
    pub epochs: usize,
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub val_batch_size: usize,
    pub strict_window: bool,
    pub virtual_momentum: bool,
    pub meta_lr_per_step: bool,
    pub meta_optimizer: MetaOptimizerKind,
    pub clip_meta_inputs: Option<f64>,
    pub hypergrad_path: HypergradPath,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta_theta: 0.1,
            eta_phi: 1e-3,
            k: 5,
            tau: 4.0,
            alpha: 0.5,
            epochs: 120,
            milestones: vec![80, 100],
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            val_batch_size: 128,
            strict_window: false,
            virtual_momentum: false,
            meta_lr_per_step: false,
            meta_optimizer: MetaOptimizerKind::Adam,
            clip_meta_inputs: None,
            hypergrad_path: HypergradPath::Autodiff,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("eta_theta", self.eta_theta),
            ("tau", self.tau),
            ("lr_decay", self.lr_decay),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        for (name, v) in [("momentum", self.momentum), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.batch_size == 0 || self.val_batch_size == 0 {
            return Err(Error::Parameter("batch sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Parameter(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        self.bilevel().validate()
    }

    pub fn bilevel(&self) -> BilevelConfig {
        BilevelConfig {
            eta_phi: self.eta_phi,
            k: self.k,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            strict_window: self.strict_window,
            virtual_momentum: self.virtual_momentum,
            meta_lr_per_step: self.meta_lr_per_step,
            meta_optimizer: self.meta_optimizer,
            clip_meta_inputs: self.clip_meta_inputs,
            hypergrad_path: self.hypergrad_path,
        }
    }

    pub fn schedule(&self) -> MultiStepLr {
        MultiStepLr {
            base: self.eta_theta,
            milestones: self.milestones.clone(),
            gamma: self.lr_decay,
        }
    }
}

/// Training, balanced validation, and evaluation splits.
#[derive(Debug, Clone, Copy)]
pub struct Splits<'a> {
    pub train: &'a LabeledDataset,
    pub val: &'a LabeledDataset,
    pub test: &'a LabeledDataset,
}

/// One RunLog row. Row 0 describes the untrained model and has no
/// training statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    /// Mean cross-entropy over the whole validation split.
    pub val_loss: f64,
    /// Per-class accuracy on the evaluation split.
    pub class_accuracy: Vec<f64>,
    pub mean_w_hard: Option<f64>,
    pub mean_w_soft: Option<f64>,
    pub meta_updates: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
}

impl RunLog {
    pub fn to_csv(&self) -> String {
        let classes = self.records.first().map_or(0, |r| r.class_accuracy.len());
        let mut s = String::from("epoch,train_loss,val_loss");
        for c in 0..classes {
            let _ = write!(s, ",acc_{c}");
        }
        s.push_str(",mean_w_hard,mean_w_soft,meta_updates\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            let _ = write!(s, "{},{},{}", r.epoch, opt(r.train_loss), r.val_loss);
            for a in &r.class_accuracy {
                let _ = write!(s, ",{a}");
            }
            let _ = writeln!(s, ",{},{},{}", opt(r.mean_w_hard), opt(r.mean_w_soft), r.meta_updates);
        }
        s
    }
}

/// Statistics of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub mean_w_hard: Option<f64>,
    pub mean_w_soft: Option<f64>,
}

/// Something that takes one optimization step per training batch.
pub trait Learner<T: Real> {
    /// `batch` and `val` are index lists into the training and validation splits.
    fn step(&mut self, batch: &[usize], val: &[usize], lr: f64) -> Result<StepStats>;

    fn student(&self) -> &ModelState<T>;

    fn meta_updates(&self) -> u64 {
        0
    }
}

/// Assembles a minibatch, attaching cached teacher logits when given.
pub fn make_batch<T: Real>(
    data: &LabeledDataset,
    idx: &[usize],
    teacher_logits: Option<&Tensor<T>>,
) -> Result<DistillBatch<T>> {
    let labels = data.labels_of(idx);
    Ok(DistillBatch {
        x: data.features_tensor(idx),
        onehot: one_hot(&labels, data.classes())?,
        labels,
        teacher_logits: teacher_logits.map(|t| t.select_rows(idx)).transpose()?,
    })
}

fn epoch_record<T: Real>(
    arch: &Architecture,
    state: &ModelState<T>,
    splits: &Splits<'_>,
    epoch: usize,
    meta_updates: u64,
) -> Result<EpochRecord> {
    let model = Model {
        arch: arch.clone(),
        state: state.clone_state(),
    };
    let vl = per_sample_ce(&model.predict(&splits.val.all_features::<T>())?, splits.val.labels())?;
    let val_loss = vl.iter().map(|v| v.f64()).sum::<f64>() / vl.len().max(1) as f64;
    let m = metrics::evaluate(&model, splits.test, &splits.train.counts())?;
    Ok(EpochRecord {
        epoch,
        train_loss: None,
        val_loss,
        class_accuracy: m.per_class,
        mean_w_hard: None,
        mean_w_soft: None,
        meta_updates,
    })
}

/// Shuffled epochs over the training split with a cycling validation
/// sampler; logs one record per epoch plus the initial state.
pub fn run_epochs<T: Real, L: Learner<T>>(
    cfg: &TrainConfig,
    seeds: &SeedStreams,
    splits: &Splits<'_>,
    arch: &Architecture,
    learner: &mut L,
) -> Result<RunLog> {
    cfg.validate()?;
    let schedule = cfg.schedule();
    let mut order = BatchOrder::new(splits.train.len(), cfg.batch_size, seeds.shuffle);
    let mut val_sampler = CyclingSampler::new(splits.val.len(), cfg.val_batch_size, seeds.val_sampler);
    let mut log = RunLog::default();
    log.records.push(epoch_record(arch, learner.student(), splits, 0, 0)?);
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at(epoch);
        let (mut loss, mut wh, mut ws, mut n) = (0.0, 0.0, 0.0, 0usize);
        let mut weighted = false;
        for batch in order.epoch() {
            let val = val_sampler.next_batch();
            let st = learner.step(&batch, &val, lr)?;
            loss += st.loss;
            if let (Some(h), Some(s)) = (st.mean_w_hard, st.mean_w_soft) {
                wh += h;
                ws += s;
                weighted = true;
            }
            n += 1;
        }
        let mut rec = epoch_record(arch, learner.student(), splits, epoch + 1, learner.meta_updates())?;
        let nf = n.max(1) as f64;
        rec.train_loss = Some(loss / nf);
        if weighted {
            rec.mean_w_hard = Some(wh / nf);
            rec.mean_w_soft = Some(ws / nf);
        }
        log.records.push(rec);
    }
    Ok(log)
}

/// Teacher logits for every training sample, computed once.
pub fn teacher_logits<T: Real>(teacher: &Model<T>, train: &LabeledDataset) -> Result<Tensor<T>> {
    teacher.predict(&train.all_features::<T>())
}

struct BilevelLearner<'a, T: Real> {
    engine: Bilevel<T, DistillObjective, MetaNet>,
    splits: Splits<'a>,
    teacher_logits: Tensor<T>,
}

impl<T: Real> Learner<T> for BilevelLearner<'_, T> {
    fn step(&mut self, batch: &[usize], val: &[usize], lr: f64) -> Result<StepStats> {
        let b = make_batch(self.splits.train, batch, Some(&self.teacher_logits))?;
        let v = make_batch::<T>(self.splits.val, val, None)?;
        let r = self.engine.run_batch(&b, &v, lr)?;
        Ok(StepStats {
            loss: r.train_loss,
            mean_w_hard: Some(r.mean_w_hard),
            mean_w_soft: Some(r.mean_w_soft),
        })
    }

    fn student(&self) -> &ModelState<T> {
        &self.engine.student
    }

    fn meta_updates(&self) -> u64 {
        self.engine.meta_updates()
    }
}

#[derive(Debug, Clone)]
pub struct FitOutput<T> {
    pub student: Model<T>,
    pub meta: Model<T>,
    pub log: RunLog,
}

/// Bilevel distillation of `student` from the frozen `teacher`.
pub fn fit<T: Real>(
    cfg: &TrainConfig,
    seeds: &SeedStreams,
    splits: Splits<'_>,
    teacher: &Model<T>,
    student: Model<T>,
    meta: Model<T>,
) -> Result<FitOutput<T>> {
    let Architecture::MetaNet(spec) = &meta.arch else {
        return Err(Error::Contract("fit needs a meta network".into()));
    };
    let objective = DistillObjective {
        student: student.arch.clone(),
        tau: cfg.tau,
    };
    let engine = Bilevel::new(objective, MetaNet::new(spec.clone()), student.state, meta.state, cfg.bilevel())?;
    let mut learner = BilevelLearner {
        engine,
        splits,
        teacher_logits: teacher_logits(teacher, splits.train)?,
    };
    let log = run_epochs(cfg, seeds, &splits, &student.arch, &mut learner)?;
    Ok(FitOutput {
        student: Model {
            arch: student.arch,
            state: learner.engine.student,
        },
        meta: Model {
            arch: meta.arch,
            state: learner.engine.meta,
        },
        log,
    })
}
