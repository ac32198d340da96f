use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{hard_loss, per_sample_ce, soft_loss, val_loss};
use crate::nn::{Architecture, LinearTrace, MetaNetSpec};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// The student side of the bilevel problem.
///
/// Parameters are handled as a list of tensors; "flat" vectors concatenate
/// them in list order.
pub trait InnerObjective<T: Real> {
    type Batch: Clone;

    fn param_shapes(&self) -> Vec<Vec<usize>>;

    fn batch_len(&self, batch: &Self::Batch) -> usize;

    /// Sub-batch of the given rows.
    fn select(&self, batch: &Self::Batch, rows: &[usize]) -> Result<Self::Batch>;

    /// Per-sample `(l_hard, l_soft)`, each of shape `[B]`.
    fn train_losses(&self, tape: &mut Tape<T>, params: &[Var], batch: &Self::Batch) -> Result<(Var, Var)>;

    /// Scalar validation loss.
    fn val_loss(&self, tape: &mut Tape<T>, params: &[Var], batch: &Self::Batch) -> Result<Var>;

    /// `B×2` weighting-network inputs at `theta`; never carries gradient.
    fn meta_inputs(&self, theta: &[Tensor<T>], batch: &Self::Batch) -> Result<Tensor<T>>;

    /// Rows of `∂l_hard,j/∂θ` and `∂l_soft,j/∂θ`, each `B×P`.
    fn per_sample_grads(&self, theta: &[Tensor<T>], batch: &Self::Batch) -> Result<(Tensor<T>, Tensor<T>)> {
        per_sample_grads_loop(self, theta, batch)
    }
}

pub(crate) fn num_params(shapes: &[Vec<usize>]) -> usize {
    shapes.iter().map(|s| s.iter().product::<usize>()).sum()
}

/// Concatenated gradients of `vars`, zero where nothing arrived.
pub(crate) fn flat_grads<T: Real>(tape: &Tape<T>, vars: &[Var]) -> Vec<T> {
    let mut out = Vec::new();
    for &v in vars {
        match tape.grad(v) {
            Some(g) => out.extend_from_slice(g),
            None => out.extend(std::iter::repeat_n(T::zero(), tape.value(v).len())),
        }
    }
    out
}

pub(crate) fn flatten<T: Real>(tensors: &[Tensor<T>]) -> Vec<T> {
    tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
}

pub(crate) fn unflatten<T: Real>(flat: &[T], shapes: &[Vec<usize>]) -> Result<Vec<Tensor<T>>> {
    if flat.len() != num_params(shapes) {
        return Err(Error::shape("unflatten", &[num_params(shapes)], &[flat.len()]));
    }
    let mut off = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            off += n;
            Tensor::new(s.clone(), flat[off - n..off].to_vec())
        })
        .collect()
}

/// One backward pass per sample and loss. Reference implementation.
pub fn per_sample_grads_loop<T: Real, O: InnerObjective<T> + ?Sized>(
    obj: &O,
    theta: &[Tensor<T>],
    batch: &O::Batch,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let b = obj.batch_len(batch);
    let p = num_params(&obj.param_shapes());
    let mut jh = Vec::with_capacity(b * p);
    let mut js = Vec::with_capacity(b * p);
    for j in 0..b {
        let sub = obj.select(batch, &[j])?;
        let mut tape = Tape::new();
        let params: Vec<Var> = theta.iter().map(|t| tape.param(t.clone())).collect();
        let (lh, ls) = obj.train_losses(&mut tape, &params, &sub)?;
        let lh = tape.sum(lh);
        let ls = tape.sum(ls);
        tape.backward(lh)?;
        jh.extend(flat_grads(&tape, &params));
        tape.zero_grad();
        tape.backward(ls)?;
        js.extend(flat_grads(&tape, &params));
    }
    Ok((Tensor::new(vec![b, p], jh)?, Tensor::new(vec![b, p], js)?))
}

/// Maps `B×2` loss pairs to per-sample `(w_hard, w_soft)`.
pub trait WeightGenerator<T: Real> {
    fn param_shapes(&self) -> Vec<Vec<usize>>;

    fn weights(&self, tape: &mut Tape<T>, phi: &[Var], inputs: &Tensor<T>) -> Result<(Var, Var)>;
}

/// The learned weighting network.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaNet {
    arch: Architecture,
}

impl MetaNet {
    pub fn new(spec: MetaNetSpec) -> Self {
        Self {
            arch: Architecture::MetaNet(spec),
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }
}

impl<T: Real> WeightGenerator<T> for MetaNet {
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.arch.param_specs().into_iter().map(|s| s.shape).collect()
    }

    fn weights(&self, tape: &mut Tape<T>, phi: &[Var], inputs: &Tensor<T>) -> Result<(Var, Var)> {
        let x = tape.constant(inputs.clone());
        let w = self.arch.forward(tape, phi, x)?;
        Ok((tape.column(w, 0)?, tape.column(w, 1)?))
    }
}

/// Constant weights with no parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinnedWeights {
    pub w_hard: f64,
    pub w_soft: f64,
}

impl PinnedWeights {
    /// The fixed-α mixture `(1−α, α)`.
    pub fn alpha(alpha: f64) -> Self {
        Self {
            w_hard: 1.0 - alpha,
            w_soft: alpha,
        }
    }
}

impl<T: Real> WeightGenerator<T> for PinnedWeights {
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        Vec::new()
    }

    fn weights(&self, tape: &mut Tape<T>, _phi: &[Var], inputs: &Tensor<T>) -> Result<(Var, Var)> {
        let (b, _) = inputs.dims2("pinned weights")?;
        let h = tape.constant(Tensor::full(&[b], T::of(self.w_hard)));
        let s = tape.constant(Tensor::full(&[b], T::of(self.w_soft)));
        Ok((h, s))
    }
}

/// `w = (σ(φ_h), σ(φ_s))` for every sample, ignoring the inputs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SigmoidGate;

impl<T: Real> WeightGenerator<T> for SigmoidGate {
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![1, 2]]
    }

    fn weights(&self, tape: &mut Tape<T>, phi: &[Var], inputs: &Tensor<T>) -> Result<(Var, Var)> {
        let (b, _) = inputs.dims2("sigmoid gate")?;
        let ones = tape.constant(Tensor::full(&[b, 1], T::one()));
        let z = tape.matmul(ones, phi[0])?;
        let w = tape.sigmoid(z);
        Ok((tape.column(w, 0)?, tape.column(w, 1)?))
    }
}

/// Evaluates the inner generator, then cuts every path back to φ.
#[derive(Debug, Clone, PartialEq)]
pub struct Detached<G>(pub G);

impl<T: Real, G: WeightGenerator<T>> WeightGenerator<T> for Detached<G> {
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.0.param_shapes()
    }

    fn weights(&self, tape: &mut Tape<T>, phi: &[Var], inputs: &Tensor<T>) -> Result<(Var, Var)> {
        let (h, s) = self.0.weights(tape, phi, inputs)?;
        Ok((tape.detach(h), tape.detach(s)))
    }
}

/// Weights as plain tensors, computed without recording.
pub fn eval_weights<T: Real, G: WeightGenerator<T> + ?Sized>(
    generator: &G,
    phi: &[Tensor<T>],
    inputs: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::frozen();
    let vars: Vec<Var> = phi.iter().map(|t| tape.constant(t.clone())).collect();
    let (h, s) = generator.weights(&mut tape, &vars, inputs)?;
    Ok((tape.value(h).clone(), tape.value(s).clone()))
}

/// A distillation minibatch. Validation batches carry no teacher logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillBatch<T> {
    pub x: Tensor<T>,
    pub onehot: Tensor<T>,
    pub labels: Vec<usize>,
    pub teacher_logits: Option<Tensor<T>>,
}

/// Student network trained against a frozen teacher's logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillObjective {
    pub student: Architecture,
    pub tau: f64,
}

impl DistillObjective {
    fn logits<T: Real>(&self, tape: &mut Tape<T>, params: &[Var], batch: &DistillBatch<T>) -> Result<Var> {
        let x = tape.constant(batch.x.clone());
        self.student.forward(tape, params, x)
    }

    fn teacher<T>(batch: &DistillBatch<T>) -> Result<&Tensor<T>> {
        batch
            .teacher_logits
            .as_ref()
            .ok_or_else(|| Error::Contract("training batch has no teacher logits".into()))
    }
}

/// Batched backward of `Σ_j l_j`, then per-sample outer products of each
/// dense layer's input row with its pre-activation gradient row. Valid
/// because `l_j` depends on row `j` only.
fn dense_per_sample<T: Real>(
    obj: &DistillObjective,
    theta: &[Tensor<T>],
    batch: &DistillBatch<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let teacher = DistillObjective::teacher(batch)?;
    let p = num_params(&obj.param_shapes_of());
    let mut tape = Tape::new();
    let params: Vec<Var> = theta.iter().map(|t| tape.param(t.clone())).collect();
    let x = tape.constant(batch.x.clone());
    let mut trace: Vec<LinearTrace> = Vec::new();
    let logits = obj.student.forward_traced(&mut tape, &params, x, &mut trace)?;
    let b = tape.value(logits).shape()[0];
    let lh = hard_loss(&mut tape, logits, &batch.onehot)?;
    let ls = soft_loss(&mut tape, teacher, logits, T::of(obj.tau))?;
    let mut out = Vec::with_capacity(2);
    for l in [lh, ls] {
        tape.zero_grad();
        let total = tape.sum(l);
        tape.backward(total)?;
        let mut rows = vec![T::zero(); b * p];
        let mut off = 0;
        for tr in &trace {
            let xin = tape.value(tr.input);
            let (_, fan_in) = xin.dims2("per-sample grads")?;
            let (_, fan_out) = tape.value(tr.preact).dims2("per-sample grads")?;
            if let Some(dz) = tape.grad(tr.preact) {
                for j in 0..b {
                    let row = &mut rows[j * p + off..j * p + off + fan_in * fan_out + fan_out];
                    let dzj = &dz[j * fan_out..(j + 1) * fan_out];
                    for (a, &xa) in xin.row(j).iter().enumerate() {
                        for (c, &d) in dzj.iter().enumerate() {
                            row[a * fan_out + c] = xa * d;
                        }
                    }
                    row[fan_in * fan_out..].copy_from_slice(dzj);
                }
            }
            off += fan_in * fan_out + fan_out;
        }
        out.push(Tensor::new(vec![b, p], rows)?);
    }
    let js = out.pop().expect("two losses");
    let jh = out.pop().expect("two losses");
    Ok((jh, js))
}

impl DistillObjective {
    fn param_shapes_of(&self) -> Vec<Vec<usize>> {
        self.student.param_specs().into_iter().map(|s| s.shape).collect()
    }
}

impl<T: Real> InnerObjective<T> for DistillObjective {
    type Batch = DistillBatch<T>;

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.param_shapes_of()
    }

    fn batch_len(&self, batch: &DistillBatch<T>) -> usize {
        batch.labels.len()
    }

    fn select(&self, batch: &DistillBatch<T>, rows: &[usize]) -> Result<DistillBatch<T>> {
        Ok(DistillBatch {
            x: batch.x.select_rows(rows)?,
            onehot: batch.onehot.select_rows(rows)?,
            labels: rows.iter().map(|&r| batch.labels[r]).collect(),
            teacher_logits: batch.teacher_logits.as_ref().map(|t| t.select_rows(rows)).transpose()?,
        })
    }

    fn train_losses(&self, tape: &mut Tape<T>, params: &[Var], batch: &DistillBatch<T>) -> Result<(Var, Var)> {
        let teacher = Self::teacher(batch)?;
        let logits = self.logits(tape, params, batch)?;
        let lh = hard_loss(tape, logits, &batch.onehot)?;
        let ls = soft_loss(tape, teacher, logits, T::of(self.tau))?;
        Ok((lh, ls))
    }

    fn val_loss(&self, tape: &mut Tape<T>, params: &[Var], batch: &DistillBatch<T>) -> Result<Var> {
        let logits = self.logits(tape, params, batch)?;
        val_loss(tape, logits, &batch.onehot)
    }

    fn meta_inputs(&self, theta: &[Tensor<T>], batch: &DistillBatch<T>) -> Result<Tensor<T>> {
        let teacher = Self::teacher(batch)?;
        let mut tape = Tape::frozen();
        let params: Vec<Var> = theta.iter().map(|t| tape.constant(t.clone())).collect();
        let logits = self.logits(&mut tape, &params, batch)?;
        let ct = per_sample_ce(teacher, &batch.labels)?;
        let cs = per_sample_ce(tape.value(logits), &batch.labels)?;
        let data = ct.into_iter().zip(cs).flat_map(|(t, s)| [t, s]).collect();
        Tensor::new(vec![batch.labels.len(), 2], data)
    }

    fn per_sample_grads(&self, theta: &[Tensor<T>], batch: &DistillBatch<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        match self.student {
            Architecture::Mlp(_) => dense_per_sample(self, theta, batch),
            _ => per_sample_grads_loop(self, theta, batch),
        }
    }
}

/// Scalar student with `l_hard = (θ−a)²`, `l_soft = (θ−b)²` and validation
/// loss `(θ−c)²`. Batches are sample counts; every sample is identical.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticToy {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Drops the soft term entirely, so `∂l_soft/∂θ ≡ 0`.
    pub soft_enabled: bool,
}

impl QuadraticToy {
    fn sq<T: Real>(tape: &mut Tape<T>, theta: Var, target: f64, n: usize) -> Result<Var> {
        let ones = tape.constant(Tensor::full(&[n, 1], T::one()));
        let rep = tape.matmul(ones, theta)?;
        let rep = tape.reshape(rep, &[n])?;
        let t = tape.constant(Tensor::full(&[n], T::of(target)));
        let d = tape.sub(rep, t)?;
        tape.mul(d, d)
    }
}

impl<T: Real> InnerObjective<T> for QuadraticToy {
    type Batch = usize;

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![1, 1]]
    }

    fn batch_len(&self, batch: &usize) -> usize {
        *batch
    }

    fn select(&self, _batch: &usize, rows: &[usize]) -> Result<usize> {
        Ok(rows.len())
    }

    fn train_losses(&self, tape: &mut Tape<T>, params: &[Var], batch: &usize) -> Result<(Var, Var)> {
        let lh = Self::sq(tape, params[0], self.a, *batch)?;
        let ls = if self.soft_enabled {
            Self::sq(tape, params[0], self.b, *batch)?
        } else {
            tape.constant(Tensor::zeros(&[*batch]))
        };
        Ok((lh, ls))
    }

    fn val_loss(&self, tape: &mut Tape<T>, params: &[Var], batch: &usize) -> Result<Var> {
        let l = Self::sq(tape, params[0], self.c, *batch)?;
        tape.mean(l)
    }

    fn meta_inputs(&self, theta: &[Tensor<T>], batch: &usize) -> Result<Tensor<T>> {
        let t = theta[0].data()[0].f64();
        let soft = if self.soft_enabled { (t - self.b).powi(2) } else { 0.0 };
        let pair = [T::of(soft), T::of((t - self.a).powi(2))];
        Tensor::new(vec![*batch, 2], pair.iter().copied().cycle().take(2 * batch).collect())
    }
}
