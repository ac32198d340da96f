//! One-step hypergradients of the validation loss with respect to the
//! weighting network's parameters φ.
//!
//! Student snapshots and per-sample student gradients are constants with
//! respect to φ; the only live path is `φ → w → θ'(φ) → L_val`. With
//! `J_h`, `J_s` the `B×P` per-sample gradient rows,
//! `θ'(φ) = θ − drift − (η/B)·(w_hᵀ·J_h + w_sᵀ·J_s)`, which is linear in `w`.

use std::collections::HashMap;

use super::objective::{flat_grads, flatten, num_params, unflatten, InnerObjective, WeightGenerator};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::losses::weighted_train_loss;
use crate::scalar::{Dtype, Real};
use crate::tensor::Tensor;

/// Rows of per-sample gradients at one student snapshot, each `B×P`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrads<T> {
    pub hard: Tensor<T>,
    pub soft: Tensor<T>,
}

impl<T: Real> SampleGrads<T> {
    pub fn compute<O: InnerObjective<T>>(obj: &O, theta: &[Tensor<T>], batch: &O::Batch) -> Result<Self> {
        let (hard, soft) = obj.per_sample_grads(theta, batch)?;
        Ok(Self { hard, soft })
    }

    fn rows(&self) -> usize {
        self.hard.shape()[0]
    }
}

/// A virtual student recorded on a live tape as a function of φ.
pub struct VirtualStep<T: Real> {
    pub tape: Tape<T>,
    pub phi: Vec<Var>,
    pub theta_prime: Vec<Var>,
    pub w_hard: Var,
    pub w_soft: Var,
}

fn check_grads<T: Real>(grads: &SampleGrads<T>, b: usize, p: usize) -> Result<()> {
    for m in [&grads.hard, &grads.soft] {
        if m.shape() != [b, p] {
            return Err(Error::Contract(format!(
                "per-sample gradients have shape {:?}, expected [{b}, {p}]",
                m.shape()
            )));
        }
    }
    Ok(())
}

/// Builds `θ'(φ)` on a fresh recording tape.
///
/// `drift` is an extra φ-independent displacement subtracted from θ (used
/// when the virtual step imitates momentum and weight decay).
pub fn virtual_step<T: Real, G: WeightGenerator<T> + ?Sized>(
    generator: &G,
    phi: &[Tensor<T>],
    theta: &[Tensor<T>],
    inputs: &Tensor<T>,
    grads: &SampleGrads<T>,
    eta: f64,
    drift: Option<&[T]>,
) -> Result<VirtualStep<T>> {
    let shapes: Vec<Vec<usize>> = theta.iter().map(|t| t.shape().to_vec()).collect();
    let p = num_params(&shapes);
    let (b, _) = inputs.dims2("virtual_step")?;
    check_grads(grads, b, p)?;
    let mut tape = Tape::new();
    let phi_vars: Vec<Var> = phi.iter().map(|t| tape.param(t.clone())).collect();
    let (w_hard, w_soft) = generator.weights(&mut tape, &phi_vars, inputs)?;
    let wh = tape.reshape(w_hard, &[1, b])?;
    let ws = tape.reshape(w_soft, &[1, b])?;
    let jh = tape.constant(grads.hard.clone());
    let js = tape.constant(grads.soft.clone());
    let dh = tape.matmul(wh, jh)?;
    let ds = tape.matmul(ws, js)?;
    let d = tape.add(dh, ds)?;
    let step = tape.scale(d, T::of(-eta / b as f64));
    let mut base = flatten(theta);
    if let Some(dr) = drift {
        if dr.len() != p {
            return Err(Error::shape("virtual_step drift", &[p], &[dr.len()]));
        }
        base.iter_mut().zip(dr).for_each(|(t, &d)| *t -= d);
    }
    let base = tape.constant(Tensor::new(vec![1, p], base)?);
    let flat = tape.add(base, step)?;
    let mut theta_prime = Vec::with_capacity(shapes.len());
    let mut off = 0;
    for s in &shapes {
        theta_prime.push(tape.slice(flat, off, s)?);
        off += s.iter().product::<usize>();
    }
    Ok(VirtualStep {
        tape,
        phi: phi_vars,
        theta_prime,
        w_hard,
        w_soft,
    })
}

/// `∇_φ L_val(θ'(φ))` per φ tensor, and the validation loss value.
pub fn one_step_hypergrad<T: Real, O: InnerObjective<T>>(
    mut vs: VirtualStep<T>,
    obj: &O,
    val_batch: &O::Batch,
) -> Result<(Vec<Vec<T>>, T)> {
    if !vs.tape.is_recording() {
        return Err(Error::Contract("hypergradient needs a recording tape".into()));
    }
    let loss = obj.val_loss(&mut vs.tape, &vs.theta_prime, val_batch)?;
    vs.tape.backward(loss)?;
    let grads = vs
        .phi
        .iter()
        .map(|&v| vs.tape.grad_tensor(v).into_data())
        .collect();
    Ok((grads, vs.tape.value(loss).item()?))
}

/// Everything the explicit and finite-difference paths need about one
/// inner step. The snapshot is a plain value with no tape attached.
#[derive(Debug, Clone)]
pub struct InnerStepRecord<T, B> {
    pub theta: Vec<Tensor<T>>,
    pub batch: B,
    pub val_batch: B,
    /// `B×2` loss pairs fed to the weighting network.
    pub inputs: Tensor<T>,
    pub grads: SampleGrads<T>,
    pub eta: f64,
    pub drift: Option<Vec<T>>,
    /// `∇_θ L_val` at the virtual student built with the window's φ.
    pub g_val: Vec<T>,
    pub val_loss: T,
}

/// `θ'` as plain values for the given weights.
fn virtual_theta<T: Real>(
    theta: &[Tensor<T>],
    w_hard: &[T],
    w_soft: &[T],
    grads: &SampleGrads<T>,
    eta: f64,
    drift: Option<&[T]>,
) -> Vec<T> {
    let b = grads.rows();
    let p = grads.hard.shape()[1];
    let mut d = vec![T::zero(); p];
    for j in 0..b {
        let (rh, rs) = (grads.hard.row(j), grads.soft.row(j));
        for k in 0..p {
            d[k] += w_hard[j] * rh[k] + w_soft[j] * rs[k];
        }
    }
    let c = T::of(-eta / b as f64);
    let mut out = flatten(theta);
    for k in 0..p {
        if let Some(dr) = drift {
            out[k] -= dr[k];
        }
        out[k] += c * d[k];
    }
    out
}

fn val_grad<T: Real, O: InnerObjective<T>>(obj: &O, theta: &[Tensor<T>], val_batch: &O::Batch) -> Result<(Vec<T>, T)> {
    let mut tape = Tape::new();
    let params: Vec<Var> = theta.iter().map(|t| tape.param(t.clone())).collect();
    let l = obj.val_loss(&mut tape, &params, val_batch)?;
    tape.backward(l)?;
    Ok((flat_grads(&tape, &params), tape.value(l).item()?))
}

/// Captures one inner step for the explicit path: per-sample gradients at
/// the snapshot, and the validation gradient at the virtual student.
#[allow(clippy::too_many_arguments)]
pub fn record_inner_step<T: Real, O: InnerObjective<T>, G: WeightGenerator<T> + ?Sized>(
    obj: &O,
    generator: &G,
    phi: &[Tensor<T>],
    theta: Vec<Tensor<T>>,
    batch: O::Batch,
    val_batch: O::Batch,
    inputs: Tensor<T>,
    grads: SampleGrads<T>,
    eta: f64,
    drift: Option<Vec<T>>,
) -> Result<InnerStepRecord<T, O::Batch>> {
    let p = num_params(&obj.param_shapes());
    check_grads(&grads, obj.batch_len(&batch), p)?;
    let (wh, ws) = super::objective::eval_weights(generator, phi, &inputs)?;
    let tp = virtual_theta(&theta, wh.data(), ws.data(), &grads, eta, drift.as_deref());
    let tp = unflatten(&tp, &obj.param_shapes())?;
    let (g_val, val_loss) = val_grad(obj, &tp, &val_batch)?;
    Ok(InnerStepRecord {
        theta,
        batch,
        val_batch,
        inputs,
        grads,
        eta,
        drift,
        g_val,
        val_loss,
    })
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Assembles
/// `−Σ_i (η_i/B_i)·Σ_j [(g_val^(i)·g_hard^(i)(x_j))·∂w_j^hard/∂φ + (g_val^(i)·g_soft^(i)(x_j))·∂w_j^soft/∂φ]`.
///
/// Samples whose loss pairs are bit-identical share `∂w/∂φ`, so their
/// alignment coefficients are summed before one pair of weighting-network
/// backward passes.
pub fn explicit_hypergrad<T: Real, B, G: WeightGenerator<T> + ?Sized>(
    generator: &G,
    phi: &[Tensor<T>],
    records: &[InnerStepRecord<T, B>],
) -> Result<Vec<Vec<T>>> {
    struct Group<T> {
        input: [T; 2],
        coef_hard: T,
        coef_soft: T,
    }
    let mut groups: Vec<Group<T>> = Vec::new();
    let mut index: HashMap<[u64; 2], usize> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        let (b, cols) = r.inputs.dims2("explicit_hypergrad")?;
        let p = r.g_val.len();
        if cols != 2 || r.grads.hard.shape() != [b, p] || r.grads.soft.shape() != [b, p] {
            return Err(Error::Contract(format!(
                "record {i}: inputs {:?}, gradients {:?}/{:?} and validation gradient [{p}] disagree",
                r.inputs.shape(),
                r.grads.hard.shape(),
                r.grads.soft.shape()
            )));
        }
        let scale = T::of(-r.eta / b as f64);
        for j in 0..b {
            let a_h = dot(&r.g_val, r.grads.hard.row(j));
            let a_s = dot(&r.g_val, r.grads.soft.row(j));
            let row = r.inputs.row(j);
            let key = [row[0].f64().to_bits(), row[1].f64().to_bits()];
            let g = *index.entry(key).or_insert_with(|| {
                groups.push(Group {
                    input: [row[0], row[1]],
                    coef_hard: T::zero(),
                    coef_soft: T::zero(),
                });
                groups.len() - 1
            });
            groups[g].coef_hard += scale * a_h;
            groups[g].coef_soft += scale * a_s;
        }
    }
    let mut out: Vec<Vec<T>> = phi.iter().map(|t| vec![T::zero(); t.len()]).collect();
    for g in &groups {
        let mut tape = Tape::new();
        let vars: Vec<Var> = phi.iter().map(|t| tape.param(t.clone())).collect();
        let input = Tensor::new(vec![1, 2], g.input.to_vec())?;
        let (wh, ws) = generator.weights(&mut tape, &vars, &input)?;
        let wh = tape.sum(wh);
        let ws = tape.sum(ws);
        for (w, coef) in [(wh, g.coef_hard), (ws, g.coef_soft)] {
            tape.zero_grad();
            tape.backward(w)?;
            for (acc, &v) in out.iter_mut().zip(&vars) {
                if let Some(dw) = tape.grad(v) {
                    for (a, &d) in acc.iter_mut().zip(dw) {
                        *a += coef * d;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Central finite differences of
/// `J(φ) = Σ_i L_val(θ_i − drift_i − η_i·∇_θ L_train(θ_i; w(φ)))`
/// with every snapshot `θ_i` held fixed. Double precision only.
pub fn fd_hypergrad<T: Real, O: InnerObjective<T>, G: WeightGenerator<T> + ?Sized>(
    obj: &O,
    generator: &G,
    phi: &[Tensor<T>],
    records: &[InnerStepRecord<T, O::Batch>],
    step: f64,
) -> Result<Vec<Vec<T>>> {
    if T::DTYPE != Dtype::F64 {
        return Err(Error::Contract("finite-difference hypergradients require double precision".into()));
    }
    let objective = |phi: &[Tensor<T>]| -> Result<f64> {
        let mut total = 0.0;
        for r in records {
            let (wh, ws) = super::objective::eval_weights(generator, phi, &r.inputs)?;
            let mut tape = Tape::new();
            let params: Vec<Var> = r.theta.iter().map(|t| tape.param(t.clone())).collect();
            let (lh, ls) = obj.train_losses(&mut tape, &params, &r.batch)?;
            let wh = tape.constant(wh);
            let ws = tape.constant(ws);
            let l = weighted_train_loss(&mut tape, wh, ws, lh, ls)?;
            tape.backward(l)?;
            let g = flat_grads(&tape, &params);
            let mut tp = flatten(&r.theta);
            for (k, t) in tp.iter_mut().enumerate() {
                if let Some(d) = &r.drift {
                    *t -= d[k];
                }
                *t -= T::of(r.eta) * g[k];
            }
            let tp = unflatten(&tp, &obj.param_shapes())?;
            let mut vt = Tape::frozen();
            let vars: Vec<Var> = tp.into_iter().map(|t| vt.constant(t)).collect();
            let lv = obj.val_loss(&mut vt, &vars, &r.val_batch)?;
            total += vt.value(lv).item()?.f64();
        }
        Ok(total)
    };
    let mut out = Vec::with_capacity(phi.len());
    let mut probe = phi.to_vec();
    for t in 0..phi.len() {
        let mut g = Vec::with_capacity(phi[t].len());
        for k in 0..phi[t].len() {
            let orig = phi[t].data()[k];
            probe[t].data_mut()[k] = T::of(orig.f64() + step);
            let up = objective(&probe)?;
            probe[t].data_mut()[k] = T::of(orig.f64() - step);
            let down = objective(&probe)?;
            probe[t].data_mut()[k] = orig;
            g.push(T::of((up - down) / (2.0 * step)));
        }
        out.push(g);
    }
    Ok(out)
}
