//! Student and meta optimizers plus the step learning-rate schedule.
//!
//! Optimizer slots live in [`ModelState::optimizer`] so they travel with
//! checkpoints. Gradients are given per parameter tensor, in parameter order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ModelState, OptimizerState};
use crate::scalar::Real;

fn check_grads<T: Real>(state: &ModelState<T>, grads: &[Vec<T>]) -> Result<()> {
    if grads.len() != state.params.len() {
        return Err(Error::shape("optimizer step", &[state.params.len()], &[grads.len()]));
    }
    for (p, g) in state.params.iter().zip(grads) {
        if p.tensor.len() != g.len() {
            return Err(Error::shape("optimizer step", p.tensor.shape(), &[g.len()]));
        }
    }
    Ok(())
}

/// SGD with heavy-ball momentum and coupled weight decay:
/// `d = g + wd·θ`, `b = μ·b + d` (`b = d` on the first step), `θ −= lr·b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdMomentum {
    pub fn step<T: Real>(&self, state: &mut ModelState<T>, grads: &[Vec<T>], lr: f64) -> Result<()> {
        check_grads(state, grads)?;
        let (mu, wd, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        let fresh = !matches!(state.optimizer, Some(OptimizerState::SgdMomentum { .. }));
        if fresh {
            state.optimizer = Some(OptimizerState::SgdMomentum {
                buffers: state.params.iter().map(|p| vec![T::zero(); p.tensor.len()]).collect(),
            });
        }
        let Some(OptimizerState::SgdMomentum { buffers }) = &mut state.optimizer else {
            unreachable!("buffers installed above")
        };
        for ((p, g), buf) in state.params.iter_mut().zip(grads).zip(buffers.iter_mut()) {
            for ((w, &gi), b) in p.tensor.data_mut().iter_mut().zip(g).zip(buf.iter_mut()) {
                let d = gi + wd * *w;
                *b = if fresh { d } else { mu * *b + d };
                *w -= lr * *b;
            }
        }
        Ok(())
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn step<T: Real>(&self, state: &mut ModelState<T>, grads: &[Vec<T>], lr: f64) -> Result<()> {
        check_grads(state, grads)?;
        if !matches!(state.optimizer, Some(OptimizerState::Adam { .. })) {
            let zeros: Vec<Vec<T>> = state.params.iter().map(|p| vec![T::zero(); p.tensor.len()]).collect();
            state.optimizer = Some(OptimizerState::Adam {
                m: zeros.clone(),
                v: zeros,
                step: 0,
            });
        }
        let Some(OptimizerState::Adam { m, v, step }) = &mut state.optimizer else {
            unreachable!("moments installed above")
        };
        *step += 1;
        let t = *step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        for (((p, g), mp), vp) in state.params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
            for (((w, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(g).zip(mp.iter_mut()).zip(vp.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `θ −= lr·g`, no state.
pub fn plain_sgd_step<T: Real>(state: &mut ModelState<T>, grads: &[Vec<T>], lr: f64) -> Result<()> {
    check_grads(state, grads)?;
    let lr = T::of(lr);
    for (p, g) in state.params.iter_mut().zip(grads) {
        for (w, &gi) in p.tensor.data_mut().iter_mut().zip(g) {
            *w -= lr * gi;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaOptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl MetaOptimizerKind {
    pub fn step<T: Real>(self, state: &mut ModelState<T>, grads: &[Vec<T>], lr: f64) -> Result<()> {
        match self {
            MetaOptimizerKind::Adam => Adam::default().step(state, grads, lr),
            MetaOptimizerKind::Sgd => plain_sgd_step(state, grads, lr),
        }
    }
}

/// Multiplies the base rate by `gamma` once for every milestone epoch
/// already reached (epochs counted from 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiStepLr {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl MultiStepLr {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base * self.gamma.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NamedTensor;
    use crate::tensor::Tensor;

    fn state(v: Vec<f64>) -> ModelState<f64> {
        ModelState {
            params: vec![NamedTensor {
                name: "w".into(),
                tensor: Tensor::vector(v),
            }],
            optimizer: None,
        }
    }

    #[test]
    fn sgd_zero_grad_moves_by_weight_decay_only() {
        let mut s = state(vec![2.0, -1.0]);
        let opt = SgdMomentum {
            momentum: 0.9,
            weight_decay: 0.1,
        };
        opt.step(&mut s, &[vec![0.0, 0.0]], 0.5).unwrap();
        assert_eq!(s.params[0].tensor.data(), &[2.0 - 0.5 * 0.2, -1.0 + 0.5 * 0.1]);
    }

    #[test]
    fn sgd_momentum_two_steps_by_hand() {
        let mut s = state(vec![1.0]);
        let opt = SgdMomentum {
            momentum: 0.9,
            weight_decay: 0.0,
        };
        opt.step(&mut s, &[vec![1.0]], 0.1).unwrap();
        opt.step(&mut s, &[vec![1.0]], 0.1).unwrap();
        // buffers 1.0 then 1.9
        assert!((s.params[0].tensor.data()[0] - (1.0 - 0.1 - 0.19)).abs() < 1e-15);
    }

    #[test]
    fn sgd_without_momentum_or_decay_is_plain() {
        let opt = SgdMomentum {
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut a = state(vec![0.3, 0.7]);
        let mut b = a.clone();
        for g in [[0.1, -0.2], [0.5, 0.25]] {
            opt.step(&mut a, &[g.to_vec()], 0.1).unwrap();
            plain_sgd_step(&mut b, &[g.to_vec()], 0.1).unwrap();
        }
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut s = state(vec![0.0; 3]);
        Adam::default().step(&mut s, &[vec![1.0; 3]], 1e-3).unwrap();
        for &w in s.params[0].tensor.data() {
            assert!((w.abs() - 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_zero_grad_from_zero_moments_is_exact_noop() {
        let mut s = state(vec![0.25, -4.0]);
        Adam::default().step(&mut s, &[vec![0.0, 0.0]], 1e-3).unwrap();
        assert_eq!(s.params[0].tensor.data(), &[0.25, -4.0]);
    }

    #[test]
    fn plain_sgd_exact() {
        let mut s = state(vec![1.0]);
        plain_sgd_step(&mut s, &[vec![0.5]], 1e-4).unwrap();
        assert_eq!(s.params[0].tensor.data()[0], 1.0 - 1e-4 * 0.5);
    }

    #[test]
    fn schedule_decays_at_milestones() {
        let s = MultiStepLr {
            base: 0.1,
            milestones: vec![80, 100],
            gamma: 0.1,
        };
        assert_eq!(s.lr_at(0), 0.1);
        assert_eq!(s.lr_at(79), 0.1);
        assert!((s.lr_at(80) - 0.01).abs() < 1e-15);
        assert!((s.lr_at(100) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn grad_shape_mismatch() {
        let mut s = state(vec![1.0, 2.0]);
        assert!(plain_sgd_step(&mut s, &[vec![1.0]], 0.1).is_err());
    }
}
