use serde::{Deserialize, Serialize};

use super::hypergrad::{
    explicit_hypergrad, one_step_hypergrad, record_inner_step, virtual_step, InnerStepRecord, SampleGrads,
};
use super::objective::{eval_weights, flatten, InnerObjective, WeightGenerator};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::losses::weighted_train_loss;
use crate::nn::{ModelState, OptimizerState};
use crate::optim::{MetaOptimizerKind, SgdMomentum};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HypergradPath {
    /// Backpropagate through the recorded virtual step.
    #[default]
    Autodiff,
    /// Assemble alignments and per-sample weighting-network gradients.
    Explicit,
}

/// Knobs of the bilevel inner body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BilevelConfig {
    pub eta_phi: f64,
    pub k: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// First meta update after `k` accumulations instead of after one.
    pub strict_window: bool,
    /// Include the student's momentum and weight decay in the virtual step.
    pub virtual_momentum: bool,
    /// Use `η_φ / k` for each meta update.
    pub meta_lr_per_step: bool,
    pub meta_optimizer: MetaOptimizerKind,
    /// Clamp each loss-pair entry to at most this value before weighting.
    pub clip_meta_inputs: Option<f64>,
    pub hypergrad_path: HypergradPath,
}

impl Default for BilevelConfig {
    fn default() -> Self {
        Self {
            eta_phi: 1e-3,
            k: 5,
            momentum: 0.9,
            weight_decay: 5e-4,
            strict_window: false,
            virtual_momentum: false,
            meta_lr_per_step: false,
            meta_optimizer: MetaOptimizerKind::Adam,
            clip_meta_inputs: None,
            hypergrad_path: HypergradPath::Autodiff,
        }
    }
}

impl BilevelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Parameter("k must be at least 1".into()));
        }
        if !(self.eta_phi >= 0.0) || !self.eta_phi.is_finite() {
            return Err(Error::Parameter(format!("eta_phi must be finite and >= 0, got {}", self.eta_phi)));
        }
        if let Some(c) = self.clip_meta_inputs {
            if !(c > 0.0) {
                return Err(Error::Parameter(format!("clip_meta_inputs must be > 0, got {c}")));
            }
        }
        Ok(())
    }

    /// Whether the batch with zero-based counter `count` closes a window.
    pub fn updates_at(&self, count: u64) -> bool {
        let k = self.k as u64;
        if self.strict_window {
            (count + 1).is_multiple_of(k)
        } else {
            count.is_multiple_of(k)
        }
    }

    fn meta_lr(&self) -> f64 {
        if self.meta_lr_per_step {
            self.eta_phi / self.k as f64
        } else {
            self.eta_phi
        }
    }
}

/// Running sum of one-step hypergradients since the last meta update.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HypergradAccumulator<T> {
    sum: Option<Vec<Vec<T>>>,
    steps: usize,
}

impl<T: Real> HypergradAccumulator<T> {
    pub fn new() -> Self {
        Self { sum: None, steps: 0 }
    }

    /// Adds a window's worth of `steps` contributions.
    pub fn add_window(&mut self, g: Vec<Vec<T>>, steps: usize) {
        match &mut self.sum {
            None => self.sum = Some(g),
            Some(acc) => {
                for (a, gi) in acc.iter_mut().zip(&g) {
                    a.iter_mut().zip(gi).for_each(|(x, &y)| *x += y);
                }
            }
        }
        self.steps += steps;
    }

    pub fn add(&mut self, g: Vec<Vec<T>>) {
        self.add_window(g, 1);
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn sum(&self) -> Option<&[Vec<T>]> {
        self.sum.as_deref()
    }

    /// Removes and returns the sum, leaving the accumulator empty.
    pub fn take(&mut self) -> Result<Vec<Vec<T>>> {
        if self.steps == 0 {
            return Err(Error::Contract("meta update with an empty hypergradient accumulator".into()));
        }
        self.steps = 0;
        Ok(self.sum.take().unwrap_or_default())
    }
}

/// Steps φ along the accumulated (summed) hypergradient and resets the
/// accumulator.
pub fn meta_update<T: Real>(
    acc: &mut HypergradAccumulator<T>,
    meta: &mut ModelState<T>,
    kind: MetaOptimizerKind,
    lr: f64,
) -> Result<()> {
    let g = acc.take()?;
    kind.step(meta, &g, lr)
}

/// One real step on `mean_j(w_h,j·l_h,j + w_s,j·l_s,j)` with the weights
/// held constant. Returns the loss value.
pub fn student_update<T: Real, O: InnerObjective<T>>(
    obj: &O,
    student: &mut ModelState<T>,
    opt: &SgdMomentum,
    w_hard: &Tensor<T>,
    w_soft: &Tensor<T>,
    batch: &O::Batch,
    lr: f64,
) -> Result<T> {
    let mut tape = Tape::new();
    let params = student.load(&mut tape, true);
    let (lh, ls) = obj.train_losses(&mut tape, &params, batch)?;
    let wh = tape.constant(w_hard.clone());
    let ws = tape.constant(w_soft.clone());
    let loss = weighted_train_loss(&mut tape, wh, ws, lh, ls)?;
    tape.backward(loss)?;
    let grads = student.grads_from(&tape, &params);
    opt.step(student, &grads, lr)?;
    tape.value(loss).item()
}

/// Per-batch diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchReport {
    pub train_loss: f64,
    /// Validation loss at the virtual student.
    pub val_loss: f64,
    pub mean_w_hard: f64,
    pub mean_w_soft: f64,
    pub meta_updated: bool,
}

/// Live state of a bilevel run: student, weighting network, accumulator
/// and the global batch counter.
pub struct Bilevel<T: Real, O: InnerObjective<T>, G> {
    pub objective: O,
    pub generator: G,
    pub student: ModelState<T>,
    pub meta: ModelState<T>,
    pub config: BilevelConfig,
    pub accumulator: HypergradAccumulator<T>,
    records: Vec<InnerStepRecord<T, O::Batch>>,
    count: u64,
    meta_updates: u64,
}

impl<T: Real, O: InnerObjective<T>, G: WeightGenerator<T>> Bilevel<T, O, G> {
    pub fn new(objective: O, generator: G, student: ModelState<T>, meta: ModelState<T>, config: BilevelConfig) -> Result<Self> {
        config.validate()?;
        let want = generator.param_shapes();
        let have: Vec<Vec<usize>> = meta.params.iter().map(|p| p.tensor.shape().to_vec()).collect();
        if want != have {
            return Err(Error::Contract(format!("meta parameters {have:?} do not match generator {want:?}")));
        }
        Ok(Self {
            objective,
            generator,
            student,
            meta,
            config,
            accumulator: HypergradAccumulator::new(),
            records: Vec::new(),
            count: 0,
            meta_updates: 0,
        })
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn meta_updates(&self) -> u64 {
        self.meta_updates
    }

    /// Loss pairs at `theta`, clipped if configured.
    pub fn loss_pairs(&self, theta: &[Tensor<T>], batch: &O::Batch) -> Result<Tensor<T>> {
        let inputs = self.objective.meta_inputs(theta, batch)?;
        Ok(match self.config.clip_meta_inputs {
            Some(c) => inputs.map(|v| v.min(T::of(c))),
            None => inputs,
        })
    }

    /// Current weights for the given loss pairs.
    pub fn weights_for(&self, inputs: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        eval_weights(&self.generator, &self.meta.tensors(), inputs)
    }

    /// `η·(wd·θ + μ·buf)`, the φ-independent part of a momentum step.
    fn drift(&self, theta: &[Tensor<T>], lr: f64) -> Option<Vec<T>> {
        if !self.config.virtual_momentum {
            return None;
        }
        let flat = flatten(theta);
        let (mu, wd, lr) = (T::of(self.config.momentum), T::of(self.config.weight_decay), T::of(lr));
        let buf: Vec<T> = match &self.student.optimizer {
            Some(OptimizerState::SgdMomentum { buffers }) => buffers.concat(),
            _ => vec![T::zero(); flat.len()],
        };
        Some(flat.iter().zip(&buf).map(|(&t, &b)| lr * (wd * t + mu * b)).collect())
    }

    /// The full inner body for one training batch: clone, weights, virtual
    /// step, validation loss, accumulate, conditional meta update, fresh
    /// weights, real step, counter increment. `lr` is the scheduled student
    /// rate, used by both the virtual and the real step.
    pub fn run_batch(&mut self, batch: &O::Batch, val_batch: &O::Batch, lr: f64) -> Result<BatchReport> {
        let theta = self.student.clone_state().tensors();
        let inputs = self.loss_pairs(&theta, batch)?;
        let grads = SampleGrads::compute(&self.objective, &theta, batch)?;
        let drift = self.drift(&theta, lr);
        let phi = self.meta.tensors();
        let val_loss = match self.config.hypergrad_path {
            HypergradPath::Autodiff => {
                let vs = virtual_step(&self.generator, &phi, &theta, &inputs, &grads, lr, drift.as_deref())?;
                let (g, v) = one_step_hypergrad(vs, &self.objective, val_batch)?;
                self.accumulator.add(g);
                v
            }
            HypergradPath::Explicit => {
                let r = record_inner_step(
                    &self.objective,
                    &self.generator,
                    &phi,
                    theta,
                    batch.clone(),
                    val_batch.clone(),
                    inputs.clone(),
                    grads,
                    lr,
                    drift,
                )?;
                let v = r.val_loss;
                self.records.push(r);
                v
            }
        };
        let meta_updated = self.config.updates_at(self.count);
        if meta_updated {
            if !self.records.is_empty() {
                let g = explicit_hypergrad(&self.generator, &phi, &self.records)?;
                self.accumulator.add_window(g, self.records.len());
                self.records.clear();
            }
            meta_update(&mut self.accumulator, &mut self.meta, self.config.meta_optimizer, self.config.meta_lr())?;
            self.meta_updates += 1;
        }
        let (wh, ws) = self.weights_for(&inputs)?;
        let opt = SgdMomentum {
            momentum: self.config.momentum,
            weight_decay: self.config.weight_decay,
        };
        let train_loss = student_update(&self.objective, &mut self.student, &opt, &wh, &ws, batch, lr)?;
        self.count += 1;
        let mean = |t: &Tensor<T>| t.data().iter().map(|v| v.f64()).sum::<f64>() / t.len().max(1) as f64;
        Ok(BatchReport {
            train_loss: train_loss.f64(),
            val_loss: val_loss.f64(),
            mean_w_hard: mean(&wh),
            mean_w_soft: mean(&ws),
            meta_updated,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bilevel::objective::{QuadraticToy, SigmoidGate};
    use crate::nn::NamedTensor;

    fn gate_state(h: f64, s: f64) -> ModelState<f64> {
        ModelState {
            params: vec![NamedTensor {
                name: "phi".into(),
                tensor: Tensor::matrix(1, 2, vec![h, s]).unwrap(),
            }],
            optimizer: None,
        }
    }

    fn scalar_state(v: f64) -> ModelState<f64> {
        ModelState {
            params: vec![NamedTensor {
                name: "theta".into(),
                tensor: Tensor::matrix(1, 1, vec![v]).unwrap(),
            }],
            optimizer: None,
        }
    }

    fn toy_run(cfg: BilevelConfig, batches: usize) -> Vec<bool> {
        let toy = QuadraticToy {
            a: 0.0,
            b: 1.0,
            c: 0.5,
            soft_enabled: true,
        };
        let mut bl = Bilevel::new(toy, SigmoidGate, scalar_state(1.0), gate_state(0.1, -0.2), cfg).unwrap();
        (0..batches).map(|_| bl.run_batch(&1, &1, 0.1).unwrap().meta_updated).collect()
    }

    #[test]
    fn counter_semantics() {
        let cfg = BilevelConfig {
            k: 5,
            ..Default::default()
        };
        let ups = toy_run(cfg.clone(), 12);
        let at: Vec<usize> = ups.iter().enumerate().filter(|(_, &u)| u).map(|(i, _)| i).collect();
        assert_eq!(at, vec![0, 5, 10]);
        let strict = toy_run(
            BilevelConfig {
                strict_window: true,
                ..cfg
            },
            12,
        );
        let at: Vec<usize> = strict.iter().enumerate().filter(|(_, &u)| u).map(|(i, _)| i).collect();
        assert_eq!(at, vec![4, 9]);
    }

    #[test]
    fn k1_updates_every_batch() {
        let ups = toy_run(
            BilevelConfig {
                k: 1,
                ..Default::default()
            },
            7,
        );
        assert!(ups.iter().all(|&u| u));
    }

    #[test]
    fn empty_accumulator_is_a_contract_error() {
        let mut acc = HypergradAccumulator::<f64>::new();
        let mut m = gate_state(0.0, 0.0);
        assert!(matches!(
            meta_update(&mut acc, &mut m, MetaOptimizerKind::Sgd, 0.1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn accumulator_sums_and_resets() {
        let mut acc = HypergradAccumulator::<f64>::new();
        acc.add(vec![vec![1.0, 2.0]]);
        acc.add(vec![vec![0.5, -1.0]]);
        assert_eq!(acc.steps(), 2);
        let mut m = gate_state(0.0, 0.0);
        meta_update(&mut acc, &mut m, MetaOptimizerKind::Sgd, 0.1).unwrap();
        assert_eq!(m.params[0].tensor.data(), &[0.0 - 0.1 * 1.5, 0.0 - 0.1 * 1.0]);
        assert_eq!(acc.steps(), 0);
        assert!(acc.sum().is_none());
    }

    #[test]
    fn paths_agree_inside_run_batch() {
        let run = |path| {
            let cfg = BilevelConfig {
                k: 3,
                strict_window: true,
                meta_optimizer: MetaOptimizerKind::Sgd,
                eta_phi: 0.5,
                hypergrad_path: path,
                ..Default::default()
            };
            let toy = QuadraticToy {
                a: 0.0,
                b: 1.0,
                c: 0.5,
                soft_enabled: true,
            };
            let mut bl = Bilevel::new(toy, SigmoidGate, scalar_state(1.0), gate_state(0.1, -0.2), cfg).unwrap();
            for _ in 0..6 {
                bl.run_batch(&2, &1, 0.1).unwrap();
            }
            assert_eq!(bl.meta_updates(), 2);
            bl.meta.params[0].tensor.data().to_vec()
        };
        let a = run(HypergradPath::Autodiff);
        let b = run(HypergradPath::Explicit);
        assert!(a != vec![0.1, -0.2]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{x} vs {y}");
        }
    }
}
