//! Hard, soft and combined distillation losses on the tape.
//!
//! Per-sample losses are length-`B` vectors; reductions happen in
//! [`weighted_train_loss`], [`fixed_alpha_kd_loss`] and [`val_loss`].
//! The teacher side of the soft loss is always a constant.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{log_softmax_rows, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdConfig {
    pub tau: f64,
    /// Mixing weight for the fixed-α baseline only.
    pub alpha: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self { tau: 4.0, alpha: 0.5 }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Parameter(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Parameter(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// The per-sample input pair of the weighting network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPair {
    pub ce_teacher: f64,
    pub ce_student: f64,
}

impl LossPair {
    pub fn new(ce_teacher: f64, ce_student: f64) -> Result<Self> {
        for v in [ce_teacher, ce_student] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Input(format!("loss pair entries must be finite and >= 0, got {v}")));
            }
        }
        Ok(Self { ce_teacher, ce_student })
    }
}

fn check_one_hot<T: Real>(labels: &Tensor<T>, logits_shape: &[usize]) -> Result<()> {
    if labels.shape() != logits_shape {
        return Err(Error::shape("hard_loss", logits_shape, labels.shape()));
    }
    let c = logits_shape[1];
    for (r, row) in labels.data().chunks(c).enumerate() {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || zeros != c - 1 {
            return Err(Error::Input(format!("label row {r} is not one-hot")));
        }
    }
    Ok(())
}

/// Per-sample cross-entropy against one-hot labels at temperature 1.
pub fn hard_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &Tensor<T>) -> Result<Var> {
    tape.value(logits).dims2("hard_loss")?;
    check_one_hot(labels, tape.value(logits).shape())?;
    let lp = tape.log_softmax(logits, T::one())?;
    let y = tape.constant(labels.clone());
    let picked = tape.mul(lp, y)?;
    let s = tape.sum_rows(picked)?;
    Ok(tape.scale(s, -T::one()))
}

/// Per-sample `τ²·KL(p_T^τ ‖ p_S^τ)`, computed in log space. No gradient
/// reaches the teacher.
pub fn soft_loss<T: Real>(tape: &mut Tape<T>, teacher_logits: &Tensor<T>, student_logits: Var, tau: T) -> Result<Var> {
    if teacher_logits.shape() != tape.value(student_logits).shape() {
        return Err(Error::shape("soft_loss", teacher_logits.shape(), tape.value(student_logits).shape()));
    }
    let lt = log_softmax_rows(teacher_logits, tau)?;
    let pt = lt.map(|v| v.exp());
    let ls = tape.log_softmax(student_logits, tau)?;
    let ltv = tape.constant(lt);
    let ptv = tape.constant(pt);
    let diff = tape.sub(ltv, ls)?;
    let terms = tape.mul(ptv, diff)?;
    let kl = tape.sum_rows(terms)?;
    Ok(tape.scale(kl, tau * tau))
}

/// Per-sample `τ²·CE(p_T^τ, p_S^τ)`: cross-entropy with the teacher's soft
/// targets. Differs from [`soft_loss`] by a student-independent constant.
pub fn soft_target_ce<T: Real>(tape: &mut Tape<T>, teacher_logits: &Tensor<T>, student_logits: Var, tau: T) -> Result<Var> {
    if teacher_logits.shape() != tape.value(student_logits).shape() {
        return Err(Error::shape("soft_target_ce", teacher_logits.shape(), tape.value(student_logits).shape()));
    }
    let pt = log_softmax_rows(teacher_logits, tau)?.map(|v| v.exp());
    let ls = tape.log_softmax(student_logits, tau)?;
    let ptv = tape.constant(pt);
    let cross = tape.mul(ptv, ls)?;
    let cross = tape.sum_rows(cross)?;
    Ok(tape.scale(cross, -(tau * tau)))
}

/// Batch mean of `w_hard·l_hard + w_soft·l_soft`.
pub fn weighted_train_loss<T: Real>(tape: &mut Tape<T>, w_hard: Var, w_soft: Var, l_hard: Var, l_soft: Var) -> Result<Var> {
    let n = tape.value(l_hard).len();
    for v in [w_hard, w_soft, l_soft] {
        if tape.value(v).shape() != [n] {
            return Err(Error::shape("weighted_train_loss", &[n], tape.value(v).shape()));
        }
    }
    let a = tape.mul(w_hard, l_hard)?;
    let b = tape.mul(w_soft, l_soft)?;
    let s = tape.add(a, b)?;
    tape.mean(s)
}

/// Batch mean of `(1−α)·l_hard + α·l_soft`.
pub fn fixed_alpha_kd_loss<T: Real>(
    tape: &mut Tape<T>,
    teacher_logits: &Tensor<T>,
    student_logits: Var,
    labels: &Tensor<T>,
    cfg: &KdConfig,
) -> Result<Var> {
    cfg.validate()?;
    let lh = hard_loss(tape, student_logits, labels)?;
    let ls = soft_loss(tape, teacher_logits, student_logits, T::of(cfg.tau))?;
    let alpha = T::of(cfg.alpha);
    let a = tape.scale(lh, T::one() - alpha);
    let b = tape.scale(ls, alpha);
    let s = tape.add(a, b)?;
    tape.mean(s)
}

/// Mean hard loss over a validation minibatch.
pub fn val_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &Tensor<T>) -> Result<Var> {
    let l = hard_loss(tape, logits, labels)?;
    tape.mean(l)
}

/// Per-sample cross-entropy of plain logits against class indices, off-tape.
pub fn per_sample_ce<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<Vec<T>> {
    let (b, c) = logits.dims2("per_sample_ce")?;
    if labels.len() != b {
        return Err(Error::shape("per_sample_ce", &[b], &[labels.len()]));
    }
    let lp = log_softmax_rows(logits, T::one())?;
    labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            if y >= c {
                Err(Error::Input(format!("label {y} out of range for {c} classes")))
            } else {
                Ok(-lp.row(r)[y])
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::one_hot;

    fn logits(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    fn hard(l: &Tensor<f64>, y: &[usize]) -> Vec<f64> {
        let mut tape = Tape::new();
        let z = tape.constant(l.clone());
        let oh = one_hot(y, l.shape()[1]).unwrap();
        let h = hard_loss(&mut tape, z, &oh).unwrap();
        tape.value(h).data().to_vec()
    }

    fn soft(t: &Tensor<f64>, s: &Tensor<f64>, tau: f64) -> Vec<f64> {
        let mut tape = Tape::new();
        let z = tape.constant(s.clone());
        let v = soft_loss(&mut tape, t, z, tau).unwrap();
        tape.value(v).data().to_vec()
    }

    #[test]
    fn hard_loss_hand_values() {
        assert!((hard(&logits(1, 2, &[0.0, 0.0]), &[0])[0] - 2f64.ln()).abs() < 1e-12);
        let v = hard(&logits(1, 2, &[1e3, -1e3]), &[0])[0];
        assert!(v.is_finite() && v.abs() < 1e-12);
        // −log(e³ / (e + e² + e³))
        let e = std::f64::consts::E;
        let expected = -(e.powi(3) / (e + e * e + e.powi(3))).ln();
        assert!((expected - 0.40761).abs() < 1e-5);
        assert!((hard(&logits(1, 3, &[1.0, 2.0, 3.0]), &[2])[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn hard_loss_rejects_non_one_hot() {
        let mut tape = Tape::new();
        let z = tape.constant(logits(1, 2, &[0.0, 0.0]));
        let bad = logits(1, 2, &[0.5, 0.5]);
        assert!(matches!(hard_loss(&mut tape, z, &bad), Err(Error::Input(_))));
        let bad = logits(1, 2, &[1.0, 1.0]);
        assert!(matches!(hard_loss(&mut tape, z, &bad), Err(Error::Input(_))));
    }

    #[test]
    fn soft_loss_zero_on_identical_logits() {
        let l = logits(2, 3, &[0.3, -1.0, 2.0, 5.0, 5.0, -3.0]);
        for tau in [1.0, 4.0, 0.5] {
            for v in soft(&l, &l, tau) {
                assert!(v.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn soft_loss_hand_value() {
        // teacher probs (0.8, 0.2) via logits (ln 4, 0); student uniform
        let t = logits(1, 2, &[4f64.ln(), 0.0]);
        let s = logits(1, 2, &[0.0, 0.0]);
        let expected = 0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln();
        assert!((expected - 0.19274).abs() < 1e-5);
        assert!((soft(&t, &s, 1.0)[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn soft_loss_temperature_scaling() {
        let t = logits(1, 3, &[2.0, -1.0, 0.5]);
        let s = logits(1, 3, &[0.2, 0.9, -2.0]);
        let at4 = soft(&t, &s, 4.0)[0];
        let at1 = soft(&t.map(|v| v / 4.0), &s.map(|v| v / 4.0), 1.0)[0];
        assert!((at4 - 16.0 * at1).abs() < 1e-12);
    }

    #[test]
    fn soft_loss_shape_mismatch() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
        let t = Tensor::zeros(&[2, 4]);
        assert!(matches!(soft_loss(&mut tape, &t, z, 1.0), Err(Error::Shape { .. })));
    }

    fn train_loss(wh: &[f64], ws: &[f64], lh: &[f64], ls: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let v = |tape: &mut Tape<f64>, x: &[f64]| tape.constant(Tensor::vector(x.to_vec()));
        let (a, b, c, d) = (v(&mut tape, wh), v(&mut tape, ws), v(&mut tape, lh), v(&mut tape, ls));
        let l = weighted_train_loss(&mut tape, a, b, c, d).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn weighted_loss_reductions() {
        let lh = [0.3, 1.7, 2.2];
        let ls = [4.0, 0.1, 0.9];
        assert_eq!(train_loss(&[0.0; 3], &[0.0; 3], &lh, &ls), 0.0);
        let mean_h = lh.iter().sum::<f64>() / 3.0;
        let mean_s = ls.iter().sum::<f64>() / 3.0;
        assert!((train_loss(&[1.0; 3], &[0.0; 3], &lh, &ls) - mean_h).abs() < 1e-15);
        assert!((train_loss(&[0.5; 3], &[0.5; 3], &lh, &ls) - 0.5 * (mean_h + mean_s)).abs() < 1e-15);
    }

    #[test]
    fn weighted_loss_length_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::zeros(&[3]));
        let b = tape.constant(Tensor::<f64>::zeros(&[2]));
        assert!(matches!(weighted_train_loss(&mut tape, a, a, a, b), Err(Error::Shape { .. })));
    }

    fn kd(alpha: f64, t: &Tensor<f64>, s: &Tensor<f64>, y: &[usize]) -> f64 {
        let mut tape = Tape::new();
        let z = tape.constant(s.clone());
        let oh = one_hot(y, s.shape()[1]).unwrap();
        let l = fixed_alpha_kd_loss(&mut tape, t, z, &oh, &KdConfig { tau: 4.0, alpha }).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn fixed_alpha_endpoints_and_midpoint() {
        let t = logits(2, 3, &[1.0, 0.0, -1.0, 0.5, 2.0, 0.1]);
        let s = logits(2, 3, &[0.2, 0.4, 0.0, -1.0, 1.0, 3.0]);
        let y = [0, 2];
        let mh = hard(&s, &y).iter().sum::<f64>() / 2.0;
        let ms = soft(&t, &s, 4.0).iter().sum::<f64>() / 2.0;
        assert!((kd(0.0, &t, &s, &y) - mh).abs() < 1e-12);
        assert!((kd(1.0, &t, &s, &y) - ms).abs() < 1e-12);
        assert!((kd(0.5, &t, &s, &y) - 0.5 * (mh + ms)).abs() < 1e-12);
    }

    #[test]
    fn fixed_alpha_rejects_out_of_range() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::<f64>::zeros(&[1, 2]));
        let oh = one_hot(&[0], 2).unwrap();
        let t = Tensor::zeros(&[1, 2]);
        for alpha in [-0.1, 1.5] {
            let r = fixed_alpha_kd_loss(&mut tape, &t, z, &oh, &KdConfig { tau: 4.0, alpha });
            assert!(matches!(r, Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn val_loss_uniform_and_perfect() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::<f64>::zeros(&[4, 10]));
        let oh = one_hot(&[0, 3, 9, 5], 10).unwrap();
        let l = val_loss(&mut tape, z, &oh).unwrap();
        assert!((tape.value(l).item().unwrap() - 10f64.ln()).abs() < 1e-12);
        let z = tape.constant(oh.map(|v| 100.0 * v));
        let l = val_loss(&mut tape, z, &oh).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-40);
    }

    #[test]
    fn val_loss_is_mean_of_hard_loss() {
        let s = logits(3, 4, &[0.1, 0.2, 0.3, 0.4, -1.0, 2.0, 0.0, 1.0, 3.0, 3.0, 3.0, -3.0]);
        let y = [1, 3, 0];
        let mut tape = Tape::new();
        let z = tape.constant(s.clone());
        let oh = one_hot(&y, 4).unwrap();
        let l = val_loss(&mut tape, z, &oh).unwrap();
        let m = hard(&s, &y).iter().sum::<f64>() / 3.0;
        assert!((tape.value(l).item().unwrap() - m).abs() < 1e-15);
    }

    #[test]
    fn per_sample_ce_matches_tape() {
        let s = logits(2, 3, &[0.1, 0.2, 0.3, -1.0, 2.0, 0.0]);
        let a = per_sample_ce(&s, &[2, 0]).unwrap();
        let b = hard(&s, &[2, 0]);
        assert_eq!(a, b);
    }

    #[test]
    fn loss_pair_validation() {
        assert!(LossPair::new(0.1, 0.0).is_ok());
        assert!(LossPair::new(-0.1, 0.0).is_err());
        assert!(LossPair::new(f64::NAN, 0.0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn soft_loss_nonnegative(t in proptest::collection::vec(-1e4f64..1e4, 6),
                                     s in proptest::collection::vec(-1e4f64..1e4, 6),
                                     tau in 0.25f64..8.0) {
                let v = soft(&logits(2, 3, &t), &logits(2, 3, &s), tau);
                for x in v {
                    prop_assert!(x.is_finite());
                    prop_assert!(x >= -1e-12 * (1.0 + x.abs()));
                }
            }

            #[test]
            fn hard_loss_finite_and_nonnegative(s in proptest::collection::vec(-1e4f64..1e4, 6), y0 in 0usize..3, y1 in 0usize..3) {
                for v in hard(&logits(2, 3, &s), &[y0, y1]) {
                    prop_assert!(v.is_finite() && v >= 0.0);
                }
            }
        }
    }
}
