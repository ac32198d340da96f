//! Double-precision oracle suites: central-difference gradient checks,
//! three-way hypergradient agreement, trajectory equivalences, and data
//! profile audits. Each suite returns a machine-readable report.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::baselines::kd_step;
use crate::bilevel::{
    eval_weights, explicit_hypergrad, fd_hypergrad, one_step_hypergrad, record_inner_step, student_update,
    virtual_step, Bilevel, BilevelConfig, DistillBatch, DistillObjective, InnerObjective, InnerStepRecord, MetaNet,
    PinnedWeights, QuadraticToy, SampleGrads, SigmoidGate,
};
use crate::data::{carve_validation, class_counts, LabeledDataset, LongTailSpec};
use crate::error::Result;
use crate::losses::{hard_loss, soft_loss, soft_target_ce, KdConfig};
use crate::nn::{init_params, Activation, Architecture, MetaNetSpec, MlpSpec, Model, ModelState, NamedTensor, TinyCnnSpec};
use crate::optim::{Adam, MetaOptimizerKind, SgdMomentum};
use crate::tensor::{one_hot, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// The measured discrepancy (or the audited quantity).
    pub value: f64,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub suite: String,
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl Report {
    fn new(suite: &str, checks: Vec<Check>) -> Self {
        Self {
            suite: suite.into(),
            passed: checks.iter().all(|c| c.passed),
            checks,
        }
    }
}

fn check_le(name: impl Into<String>, value: f64, tolerance: f64) -> Check {
    Check {
        name: name.into(),
        passed: value <= tolerance,
        value,
        tolerance,
        detail: String::new(),
    }
}

fn flag(name: impl Into<String>, ok: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        passed: ok,
        value: if ok { 1.0 } else { 0.0 },
        tolerance: 1.0,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- gradcheck

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-5;
pub const GRADCHECK_FLOOR: f64 = 1e-3;

type Body = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Largest `|a−n| / max(|a|, |n|, floor)` between the analytic gradient of
/// `Σ f(inputs) ⊙ R` (fixed random `R`) and its central differences.
pub fn gradcheck(inputs: &[Tensor<f64>], f: &Body, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let proj = Tensor::from_fn(tape.value(out).shape(), |_| rng.random_range(-1.0..1.0));
    let pv = tape.constant(proj.clone());
    let prod = tape.mul(out, pv)?;
    let loss = tape.sum(prod);
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad_tensor(v).into_data()).collect();
    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::frozen();
        let vs: Vec<Var> = probe.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
    };
    let mut probe = inputs.to_vec();
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        for (k, &ak) in a.iter().enumerate() {
            let orig = probe[i].data()[k];
            probe[i].data_mut()[k] = orig + GRADCHECK_STEP;
            let up = eval(&probe)?;
            probe[i].data_mut()[k] = orig - GRADCHECK_STEP;
            let down = eval(&probe)?;
            probe[i].data_mut()[k] = orig;
            let n = (up - down) / (2.0 * GRADCHECK_STEP);
            worst = worst.max((ak - n).abs() / ak.abs().max(n.abs()).max(GRADCHECK_FLOOR));
        }
    }
    Ok(worst)
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Uniform draws kept at least `gap` away from zero, for kinked ops.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

struct Case {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    body: Box<Body>,
}

fn mlp_arch(widths: Vec<usize>, act: Activation) -> Architecture {
    Architecture::Mlp(MlpSpec {
        layer_widths: widths,
        hidden_activation: act,
        seed: 0,
    })
}

fn cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out: Vec<Case> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($inp:expr),*], $body:expr) => {
            out.push(Case { name: $name, inputs: vec![$($inp),*], body: Box::new($body) })
        };
    }
    case!("matmul", [rand_t(r, &[3, 4], -1.0, 1.0), rand_t(r, &[4, 2], -1.0, 1.0)], |t, v| t.matmul(v[0], v[1]));
    case!("add", [rand_t(r, &[3, 4], -1.0, 1.0), rand_t(r, &[3, 4], -1.0, 1.0)], |t, v| t.add(v[0], v[1]));
    case!("sub", [rand_t(r, &[3, 4], -1.0, 1.0), rand_t(r, &[3, 4], -1.0, 1.0)], |t, v| t.sub(v[0], v[1]));
    case!("mul", [rand_t(r, &[3, 4], -1.0, 1.0), rand_t(r, &[3, 4], -1.0, 1.0)], |t, v| t.mul(v[0], v[1]));
    case!("mul_self", [rand_t(r, &[5], -1.0, 1.0)], |t, v| t.mul(v[0], v[0]));
    case!("scale", [rand_t(r, &[3, 4], -1.0, 1.0)], |t, v| Ok(t.scale(v[0], -1.7)));
    case!("add_row", [rand_t(r, &[3, 4], -1.0, 1.0), rand_t(r, &[4], -1.0, 1.0)], |t, v| t.add_row(v[0], v[1]));
    case!("relu", [away_from_zero(r, &[3, 4], 0.05)], |t, v| Ok(t.relu(v[0])));
    case!("tanh", [rand_t(r, &[3, 4], -2.0, 2.0)], |t, v| Ok(t.tanh(v[0])));
    case!("sigmoid", [rand_t(r, &[3, 4], -4.0, 4.0)], |t, v| Ok(t.sigmoid(v[0])));
    case!("exp", [rand_t(r, &[3, 4], -2.0, 2.0)], |t, v| Ok(t.exp(v[0])));
    case!("log_softmax_t1", [rand_t(r, &[3, 5], -3.0, 3.0)], |t, v| t.log_softmax(v[0], 1.0));
    case!("log_softmax_t4", [rand_t(r, &[3, 5], -8.0, 8.0)], |t, v| t.log_softmax(v[0], 4.0));
    case!("sum", [rand_t(r, &[3, 4], -1.0, 1.0)], |t, v| Ok(t.sum(v[0])));
    case!("mean", [rand_t(r, &[3, 4], -1.0, 1.0)], |t, v| t.mean(v[0]));
    case!("sum_rows", [rand_t(r, &[3, 4], -1.0, 1.0)], |t, v| t.sum_rows(v[0]));
    case!("column", [rand_t(r, &[3, 4], -1.0, 1.0)], |t, v| t.column(v[0], 2));
    case!("reshape", [rand_t(r, &[3, 4], -1.0, 1.0)], |t, v| t.reshape(v[0], &[2, 6]));
    case!("slice", [rand_t(r, &[1, 12], -1.0, 1.0)], |t, v| t.slice(v[0], 3, &[2, 3]));
    case!(
        "conv2d",
        [rand_t(r, &[2, 2, 5, 5], -1.0, 1.0), rand_t(r, &[3, 2, 3, 3], -1.0, 1.0), rand_t(r, &[3], -1.0, 1.0)],
        |t, v| t.conv2d(v[0], v[1], v[2], 1)
    );
    {
        // Distinct values spaced well beyond the probe step keep every pooling window's argmax stable.
        let mut vals: Vec<f64> = (0..32).map(|i| i as f64 * 0.05).collect();
        for i in (1..vals.len()).rev() {
            vals.swap(i, r.random_range(0..=i));
        }
        case!("max_pool2", [Tensor::new(vec![1, 2, 4, 4], vals)?], |t, v| t.max_pool2(v[0]));
    }
    let onehot = |r: &mut ChaCha8Rng, b: usize, c: usize| -> Result<Tensor<f64>> {
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
        one_hot(&labels, c)
    };
    {
        let arch = mlp_arch(vec![4, 6, 3], Activation::Tanh);
        let params = init_params::<f64>(&arch, seed)?.tensors();
        let x = rand_t(r, &[3, 4], -1.0, 1.0);
        let y = onehot(r, 3, 3)?;
        let mut inputs = params.clone();
        inputs.push(x);
        out.push(Case {
            name: "mlp_hard_loss",
            inputs,
            body: Box::new(move |t, v| {
                let n = v.len() - 1;
                let logits = arch.forward(t, &v[..n], v[n])?;
                let l = hard_loss(t, logits, &y)?;
                t.mean(l)
            }),
        });
    }
    {
        let arch = mlp_arch(vec![4, 6, 3], Activation::Relu);
        let params = init_params::<f64>(&arch, seed + 1)?.tensors();
        let x = rand_t(r, &[3, 4], -1.0, 1.0);
        let teacher = rand_t(r, &[3, 3], -4.0, 4.0);
        out.push(Case {
            name: "mlp_soft_loss_tau4",
            inputs: params,
            body: Box::new(move |t, v| {
                let xv = t.constant(x.clone());
                let logits = arch.forward(t, v, xv)?;
                let l = soft_loss(t, &teacher, logits, 4.0)?;
                t.mean(l)
            }),
        });
    }
    {
        let arch = Architecture::MetaNet(MetaNetSpec { hidden: 6, seed: 0 });
        let params = init_params::<f64>(&arch, seed + 2)?.tensors();
        let inputs_pairs = rand_t(r, &[3, 2], 0.0, 5.0);
        out.push(Case {
            name: "meta_net",
            inputs: params,
            body: Box::new(move |t, v| {
                let x = t.constant(inputs_pairs.clone());
                arch.forward(t, v, x)
            }),
        });
    }
    {
        let arch = Architecture::TinyCnn(TinyCnnSpec {
            in_channels: 1,
            height: 4,
            width: 4,
            channels: vec![2],
            kernel_sizes: vec![3],
            pool_after: vec![true],
            classifier_width: 5,
            classes: 3,
            seed: 0,
        });
        let params = init_params::<f64>(&arch, seed + 3)?.tensors();
        let x = rand_t(r, &[2, 16], -1.0, 1.0);
        let y = onehot(r, 2, 3)?;
        out.push(Case {
            name: "tiny_cnn_hard_loss",
            inputs: params,
            body: Box::new(move |t, v| {
                let xv = t.constant(x.clone());
                let logits = arch.forward(t, v, xv)?;
                let l = hard_loss(t, logits, &y)?;
                t.mean(l)
            }),
        });
    }
    Ok(out)
}

/// Every primitive and composition, each at `seeds` seeds; one check per
/// case reporting the worst relative error over all seeds.
pub fn gradcheck_suite(seeds: u64) -> Result<Report> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for s in 0..seeds {
        for (i, c) in cases(s)?.into_iter().enumerate() {
            let e = gradcheck(&c.inputs, c.body.as_ref(), s)?;
            if worst.len() <= i {
                worst.push((c.name, e));
            } else {
                worst[i].1 = worst[i].1.max(e);
            }
        }
    }
    let checks = worst.into_iter().map(|(n, e)| check_le(n, e, GRADCHECK_TOL)).collect();
    Ok(Report::new("gradcheck", checks))
}

// ---------------------------------------------------------------- hypergrad

pub const HYPERGRAD_AB_TOL: f64 = 1e-8;
pub const HYPERGRAD_FD_TOL: f64 = 1e-4;
pub const HYPERGRAD_FD_STEP: f64 = 1e-4;
pub const HYPERGRAD_FD_MIN: f64 = 1e-6;

/// A recorded window with the summed autodiff hypergradient.
pub struct Window {
    pub objective: DistillObjective,
    pub generator: MetaNet,
    pub phi: Vec<Tensor<f64>>,
    pub records: Vec<InnerStepRecord<f64, DistillBatch<f64>>>,
    pub autodiff: Vec<Vec<f64>>,
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize, d: usize, c: usize, with_teacher: bool) -> Result<DistillBatch<f64>> {
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
    Ok(DistillBatch {
        x: rand_t(rng, &[b, d], -1.5, 1.5),
        onehot: one_hot(&labels, c)?,
        labels,
        teacher_logits: if with_teacher {
            Some(rand_t(rng, &[b, c], -3.0, 3.0))
        } else {
            None
        },
    })
}

/// Random student `[10, 32, 5]` (tanh) and weighting network of width 10;
/// `k` inner steps with real momentum updates between snapshots.
pub fn random_window(k: usize, seed: u64) -> Result<Window> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, c) = (10, 5);
    let student = mlp_arch(vec![d, 32, c], Activation::Tanh);
    let objective = DistillObjective {
        student: student.clone(),
        tau: 4.0,
    };
    let meta_spec = MetaNetSpec { hidden: 10, seed: 0 };
    let generator = MetaNet::new(meta_spec.clone());
    let phi = init_params::<f64>(&Architecture::MetaNet(meta_spec), seed ^ 0xa5)?.tensors();
    let mut theta = init_params::<f64>(&student, seed ^ 0x3c)?;
    let opt = SgdMomentum {
        momentum: 0.9,
        weight_decay: 5e-4,
    };
    let eta = 0.1;
    let mut records = Vec::with_capacity(k);
    let mut autodiff: Vec<Vec<f64>> = phi.iter().map(|t| vec![0.0; t.len()]).collect();
    for _ in 0..k {
        let batch = random_batch(&mut rng, 6, d, c, true)?;
        let val = random_batch(&mut rng, 8, d, c, false)?;
        let snap = theta.clone_state().tensors();
        let inputs = objective.meta_inputs(&snap, &batch)?;
        let grads = SampleGrads::compute(&objective, &snap, &batch)?;
        let vs = virtual_step(&generator, &phi, &snap, &inputs, &grads, eta, None)?;
        let (g, _) = one_step_hypergrad(vs, &objective, &val)?;
        for (a, gi) in autodiff.iter_mut().zip(&g) {
            a.iter_mut().zip(gi).for_each(|(x, y)| *x += y);
        }
        let (wh, ws) = eval_weights(&generator, &phi, &inputs)?;
        records.push(record_inner_step(
            &objective,
            &generator,
            &phi,
            snap,
            batch.clone(),
            val,
            inputs,
            grads,
            eta,
            None,
        )?);
        student_update(&objective, &mut theta, &opt, &wh, &ws, &batch, eta)?;
    }
    Ok(Window {
        objective,
        generator,
        phi,
        records,
        autodiff,
    })
}

/// Worst `|a−b| / max(|a|, |b|, floor)` over all coordinates.
pub fn max_rel(a: &[Vec<f64>], b: &[Vec<f64>], floor: f64) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Worst relative error against the finite-difference estimate over
/// coordinates with magnitude above [`HYPERGRAD_FD_MIN`], and how many
/// coordinates qualified.
pub fn fd_rel(x: &[Vec<f64>], fd: &[Vec<f64>]) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut n = 0;
    for (a, c) in x.iter().flatten().zip(fd.iter().flatten()) {
        let m = a.abs().max(c.abs());
        if m > HYPERGRAD_FD_MIN {
            worst = worst.max((a - c).abs() / m);
            n += 1;
        }
    }
    (worst, n)
}

/// Closed form for the scalar toy with `w = σ(φ)`:
/// `∂/∂φ_h = 2(θ'−c)·(−2η(θ−a))·σ'(φ_h)` and likewise for `φ_s` with `b`.
pub fn toy_closed_form(toy: &QuadraticToy, theta: f64, phi: [f64; 2], eta: f64) -> [f64; 2] {
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let (wh, ws) = (sig(phi[0]), sig(phi[1]));
    let gh = 2.0 * (theta - toy.a);
    let gs = if toy.soft_enabled { 2.0 * (theta - toy.b) } else { 0.0 };
    let tp = theta - eta * (wh * gh + ws * gs);
    [
        2.0 * (tp - toy.c) * (-eta * gh) * wh * (1.0 - wh),
        2.0 * (tp - toy.c) * (-eta * gs) * ws * (1.0 - ws),
    ]
}

/// All three paths on the scalar toy, as `[autodiff, explicit, fd]`.
pub fn toy_paths(toy: &QuadraticToy, theta: f64, phi: [f64; 2], eta: f64) -> Result<[[f64; 2]; 3]> {
    let th = vec![Tensor::matrix(1, 1, vec![theta])?];
    let ph = vec![Tensor::matrix(1, 2, phi.to_vec())?];
    let inputs = toy.meta_inputs(&th, &1)?;
    let grads = SampleGrads::compute(toy, &th, &1)?;
    let vs = virtual_step(&SigmoidGate, &ph, &th, &inputs, &grads, eta, None)?;
    let (a, _) = one_step_hypergrad(vs, toy, &1)?;
    let rec = record_inner_step(toy, &SigmoidGate, &ph, th, 1, 1, inputs, grads, eta, None)?;
    let b = explicit_hypergrad(&SigmoidGate, &ph, std::slice::from_ref(&rec))?;
    let c = fd_hypergrad(toy, &SigmoidGate, &ph, &[rec], HYPERGRAD_FD_STEP)?;
    let two = |v: &[Vec<f64>]| [v[0][0], v[0][1]];
    Ok([two(&a), two(&b), two(&c)])
}

pub fn toy_check() -> Result<Check> {
    let toy = QuadraticToy {
        a: 0.0,
        b: 2.0,
        c: -0.5,
        soft_enabled: true,
    };
    let (theta, phi, eta) = (1.0, [0.3, -0.4], 0.1);
    let want = toy_closed_form(&toy, theta, phi, eta);
    let got = toy_paths(&toy, theta, phi, eta)?;
    let worst = got
        .iter()
        .flat_map(|g| g.iter().zip(&want).map(|(x, y)| (x - y).abs() / y.abs()))
        .fold(0.0, f64::max);
    Ok(check_le("toy_closed_form", worst, 1e-6))
}

/// Three-way agreement on random windows for each `k`.
pub fn hypergrad_suite(ks: &[usize], seeds: u64) -> Result<Report> {
    let mut checks = vec![toy_check()?];
    for &k in ks {
        let (mut ab, mut ac, mut bc, mut n) = (0.0f64, 0.0f64, 0.0f64, usize::MAX);
        for s in 0..seeds {
            let w = random_window(k, 1000 * k as u64 + s)?;
            let b = explicit_hypergrad(&w.generator, &w.phi, &w.records)?;
            let c = fd_hypergrad(&w.objective, &w.generator, &w.phi, &w.records, HYPERGRAD_FD_STEP)?;
            ab = ab.max(max_rel(&w.autodiff, &b, HYPERGRAD_FD_MIN));
            let (e1, n1) = fd_rel(&w.autodiff, &c);
            let (e2, _) = fd_rel(&b, &c);
            ac = ac.max(e1);
            bc = bc.max(e2);
            n = n.min(n1);
        }
        checks.push(check_le(format!("k{k}_autodiff_vs_explicit"), ab, HYPERGRAD_AB_TOL));
        let mut c = check_le(format!("k{k}_autodiff_vs_fd"), ac, HYPERGRAD_FD_TOL);
        c.detail = format!("min coordinates compared per window: {n}");
        checks.push(c);
        checks.push(check_le(format!("k{k}_explicit_vs_fd"), bc, HYPERGRAD_FD_TOL));
    }
    Ok(Report::new("hypergrad", checks))
}

// ------------------------------------------------------------- equivalence

/// Largest gap between student-logit gradients of the KL and soft-target
/// cross-entropy forms over `instances` random problems.
pub fn kl_ce_gap(instances: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for s in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (b, c) = (rng.random_range(1..6), rng.random_range(2..8));
        let tau = rng.random_range(0.5..6.0);
        let teacher = rand_t(&mut rng, &[b, c], -10.0, 10.0);
        let student = rand_t(&mut rng, &[b, c], -10.0, 10.0);
        let grad = |kl: bool| -> Result<Vec<f64>> {
            let mut t = Tape::new();
            let z = t.param(student.clone());
            let l = if kl {
                soft_loss(&mut t, &teacher, z, tau)?
            } else {
                soft_target_ce(&mut t, &teacher, z, tau)?
            };
            let l = t.sum(l);
            t.backward(l)?;
            Ok(t.grad_tensor(z).into_data())
        };
        let (a, b) = (grad(true)?, grad(false)?);
        worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
    }
    Ok(worst)
}

type BatchPairs = (Vec<DistillBatch<f64>>, Vec<DistillBatch<f64>>);

/// `n` training batches and `n` validation batches.
fn desk_batches(n: usize, seed: u64) -> Result<BatchPairs> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(n);
    let mut val = Vec::with_capacity(n);
    for _ in 0..n {
        train.push(random_batch(&mut rng, 8, 6, 4, true)?);
        val.push(random_batch(&mut rng, 8, 6, 4, false)?);
    }
    Ok((train, val))
}

/// Bitwise comparison of a pinned-weight bilevel run against fixed-α
/// distillation over `batches` batches.
pub fn fixed_alpha_reproduction(alpha: f64, batches: usize, seed: u64) -> Result<(bool, usize)> {
    let arch = mlp_arch(vec![6, 12, 4], Activation::Relu);
    let (train, val) = desk_batches(batches, seed)?;
    let student = Model::<f64>::init(arch.clone(), seed)?;
    let mut kd_model = student.clone();
    let cfg = BilevelConfig {
        eta_phi: 0.0,
        k: 1,
        ..Default::default()
    };
    let objective = DistillObjective { student: arch, tau: 4.0 };
    let empty = ModelState {
        params: Vec::new(),
        optimizer: None,
    };
    let mut engine = Bilevel::new(objective, PinnedWeights::alpha(alpha), student.state, empty, cfg.clone())?;
    let opt = SgdMomentum {
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let kd = KdConfig { tau: 4.0, alpha };
    for (i, (b, v)) in train.iter().zip(&val).enumerate() {
        engine.run_batch(b, v, 0.1)?;
        kd_step(&mut kd_model, &opt, b, &kd, 0.1)?;
        let same = engine
            .student
            .params
            .iter()
            .zip(&kd_model.state.params)
            .all(|(x, y)| x.tensor.data().iter().zip(y.tensor.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        if !same {
            return Ok((false, i));
        }
    }
    Ok((true, batches))
}

/// Bitwise comparison of `k = 1` against an online loop that updates φ
/// right after every one-step hypergradient, with no accumulator.
pub fn online_reduction(batches: usize, seed: u64) -> Result<(bool, usize)> {
    let arch = mlp_arch(vec![6, 12, 4], Activation::Relu);
    let (train, val) = desk_batches(batches, seed)?;
    let meta_spec = MetaNetSpec { hidden: 8, seed: 0 };
    let meta = init_params::<f64>(&Architecture::MetaNet(meta_spec.clone()), seed ^ 1)?;
    let student = init_params::<f64>(&arch, seed)?;
    let objective = DistillObjective { student: arch, tau: 4.0 };
    let cfg = BilevelConfig {
        k: 1,
        ..Default::default()
    };
    let mut engine = Bilevel::new(
        objective.clone(),
        MetaNet::new(meta_spec.clone()),
        student.clone(),
        meta.clone(),
        cfg.clone(),
    )?;
    let generator = MetaNet::new(meta_spec);
    let (mut theta, mut phi) = (student, meta);
    let opt = SgdMomentum {
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    for (i, (b, v)) in train.iter().zip(&val).enumerate() {
        engine.run_batch(b, v, 0.1)?;
        let snap = theta.clone_state().tensors();
        let inputs = objective.meta_inputs(&snap, b)?;
        let grads = SampleGrads::compute(&objective, &snap, b)?;
        let vs = virtual_step(&generator, &phi.tensors(), &snap, &inputs, &grads, 0.1, None)?;
        let (g, _) = one_step_hypergrad(vs, &objective, v)?;
        Adam::default().step(&mut phi, &g, cfg.eta_phi)?;
        let (wh, ws) = eval_weights(&generator, &phi.tensors(), &inputs)?;
        student_update(&objective, &mut theta, &opt, &wh, &ws, b, 0.1)?;
        let same = engine.meta.params == phi.params && engine.meta.optimizer == phi.optimizer;
        if !same {
            return Ok((false, i));
        }
    }
    Ok((true, batches))
}

/// Single-sample window with zero soft gradient and positive alignment;
/// returns `(alignment, w_hard before, w_hard after)` one plain-SGD meta step later.
pub fn alignment_sign(eta_phi: f64, seed: u64) -> Result<(f64, f64, f64)> {
    let toy = QuadraticToy {
        a: 0.0,
        b: 0.0,
        c: -1.0,
        soft_enabled: false,
    };
    let meta_spec = MetaNetSpec { hidden: 8, seed: 0 };
    let meta = init_params::<f64>(&Architecture::MetaNet(meta_spec.clone()), seed)?;
    let theta = ModelState {
        params: vec![NamedTensor {
            name: "theta".into(),
            tensor: Tensor::matrix(1, 1, vec![1.0])?,
        }],
        optimizer: None,
    };
    let cfg = BilevelConfig {
        k: 1,
        eta_phi,
        meta_optimizer: MetaOptimizerKind::Sgd,
        ..Default::default()
    };
    let generator = MetaNet::new(meta_spec);
    let snap = theta.tensors();
    let inputs = toy.meta_inputs(&snap, &1)?;
    let grads = SampleGrads::compute(&toy, &snap, &1)?;
    let rec = record_inner_step(&toy, &generator, &meta.tensors(), snap, 1, 1, inputs.clone(), grads, 0.1, None)?;
    let alignment: f64 = rec.g_val.iter().zip(rec.grads.hard.row(0)).map(|(a, b)| a * b).sum();
    let before = eval_weights(&generator, &meta.tensors(), &inputs)?.0.data()[0];
    let mut engine = Bilevel::new(toy, generator.clone(), theta, meta, cfg)?;
    engine.run_batch(&1, &1, 0.1)?;
    let after = eval_weights(&generator, &engine.meta.tensors(), &inputs)?.0.data()[0];
    Ok((alignment, before, after))
}

pub fn equivalence_suite() -> Result<Report> {
    let mut checks = vec![check_le("kl_ce_soft_target_gradients", kl_ce_gap(20)?, 1e-9)];
    for alpha in [0.0, 0.5, 0.9] {
        let (ok, at) = fixed_alpha_reproduction(alpha, 20, 7)?;
        checks.push(flag(
            format!("fixed_alpha_{alpha}_bitwise_20_batches"),
            ok,
            if ok { String::new() } else { format!("diverged at batch {at}") },
        ));
    }
    let (ok, at) = online_reduction(50, 11)?;
    checks.push(flag(
        "k1_online_bitwise_50_batches",
        ok,
        if ok { String::new() } else { format!("diverged at batch {at}") },
    ));
    let (a, before, after) = alignment_sign(1e-4, 3)?;
    checks.push(flag(
        "alignment_sign_plain_sgd",
        a > 0.0 && after > before,
        format!("alignment {a:.6e}, w_hard {before:.12} -> {after:.12}"),
    ));
    checks.push(toy_check()?);
    Ok(Report::new("equivalence", checks))
}

// ---------------------------------------------------------------------- data

/// Profile audit for `(classes, n_max, rho)` plus a balanced-carve audit.
pub fn data_suite(classes: usize, n_max: usize, rho: f64) -> Result<Report> {
    let spec = LongTailSpec {
        classes,
        n_max,
        rho,
        seed: 0,
    };
    let counts = class_counts(&spec)?;
    let first = counts[0];
    let last = *counts.last().expect("at least two classes");
    let expected_last = ((n_max as f64 / rho).round() as usize).max(1);
    let mut checks = vec![
        flag("first_count", first == n_max, format!("{first} (expected {n_max})")),
        flag("last_count", last == expected_last, format!("{last} (expected {expected_last})")),
        flag(
            "nonincreasing",
            counts.windows(2).all(|w| w[0] >= w[1]),
            format!("{counts:?}"),
        ),
    ];
    let ratio = first as f64 / last as f64;
    checks.push(check_le("imbalance_ratio_rel_error", (ratio - rho).abs() / rho, 0.02));
    let per = 100usize;
    let labels: Vec<usize> = (0..classes * (per + 1)).map(|i| i % classes).collect();
    let pool = LabeledDataset::new((0..labels.len()).map(|i| i as f32).collect(), 1, labels, classes)?;
    let (val, rest) = carve_validation(&pool, per * classes)?;
    checks.push(flag("carve_balanced", val.counts().iter().all(|&c| c == per), ""));
    let mut ids: Vec<u32> = val.features().iter().chain(rest.features()).map(|&v| v as u32).collect();
    ids.sort_unstable();
    ids.dedup();
    checks.push(flag("carve_disjoint", ids.len() == pool.len(), ""));
    Ok(Report::new("data", checks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bilevel::WeightGenerator;

    #[test]
    fn gradcheck_detects_a_wrong_gradient() {
        // exp with its value scaled by 2 in the forward only: gradient check must fail.
        let x = Tensor::vector(vec![0.3, -0.2]);
        let body: Box<Body> = Box::new(|t, v| {
            let e = t.exp(v[0]);
            let c = t.detach(e);
            t.add(e, c)
        });
        assert!(gradcheck(&[x], body.as_ref(), 0).unwrap() > 0.1);
    }

    #[test]
    fn soft_loss_gradient_matches_closed_form() {
        // d/dz of τ²·KL(p_T ‖ p_S) is τ·(softmax(z/τ) − softmax(t/τ)), evaluated directly.
        let softmax = |row: &[f64], tau: f64| -> Vec<f64> {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| ((v - m) / tau).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (b, c, tau) = (3, 5, 4.0);
        let t = rand_t(&mut rng, &[b, c], -6.0, 6.0);
        let z = rand_t(&mut rng, &[b, c], -6.0, 6.0);
        let mut tape = Tape::new();
        let zv = tape.param(z.clone());
        let l = soft_loss(&mut tape, &t, zv, tau).unwrap();
        let l = tape.sum(l);
        tape.backward(l).unwrap();
        let g = tape.grad_tensor(zv).into_data();
        for i in 0..b {
            let ps = softmax(&z.data()[i * c..(i + 1) * c], tau);
            let pt = softmax(&t.data()[i * c..(i + 1) * c], tau);
            for j in 0..c {
                assert!((g[i * c + j] - tau * (ps[j] - pt[j])).abs() < 1e-12);
            }
        }
        assert!(kl_ce_gap(20).unwrap() <= 1e-9);
    }

    #[test]
    fn weight_generators_have_expected_arity() {
        assert_eq!(WeightGenerator::<f64>::param_shapes(&SigmoidGate).len(), 1);
        assert!(WeightGenerator::<f64>::param_shapes(&PinnedWeights::alpha(0.3)).is_empty());
    }
}
