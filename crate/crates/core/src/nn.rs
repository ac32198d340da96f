//! Student/teacher backbones and the loss-pair weighting network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply<T: Real>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Identity => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub hidden_activation: Activation,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TinyCnnSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of each conv layer.
    pub channels: Vec<usize>,
    /// Odd square kernel size per conv layer; padding keeps spatial size.
    pub kernel_sizes: Vec<usize>,
    /// Whether a 2×2 max pool follows each conv layer.
    pub pool_after: Vec<bool>,
    pub classifier_width: usize,
    pub classes: usize,
    #[serde(default)]
    pub seed: u64,
}

/// The weighting network: `2 → h → h → 2`, tanh hidden layers, sigmoid outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaNetSpec {
    #[serde(default = "default_meta_hidden")]
    pub hidden: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_meta_hidden() -> usize {
    64
}

impl Default for MetaNetSpec {
    fn default() -> Self {
        Self {
            hidden: default_meta_hidden(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Mlp(MlpSpec),
    TinyCnn(TinyCnnSpec),
    MetaNet(MetaNetSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    He { fan_in: usize },
    Xavier { fan_in: usize, fan_out: usize },
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

/// Per-layer handles recorded by [`Architecture::forward_traced`].
#[derive(Debug, Clone, Copy)]
pub struct LinearTrace {
    pub input: Var,
    pub preact: Var,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::Mlp(s) => {
                if s.layer_widths.len() < 2 {
                    return Err(Error::Parameter("an MLP needs at least 2 layer widths".into()));
                }
                if s.layer_widths.contains(&0) {
                    return Err(Error::Parameter("MLP layer widths must be positive".into()));
                }
                if !matches!(s.hidden_activation, Activation::Relu | Activation::Tanh) {
                    return Err(Error::Parameter("MLP hidden activation must be relu or tanh".into()));
                }
            }
            Architecture::TinyCnn(s) => {
                let n = s.channels.len();
                if n == 0 || s.kernel_sizes.len() != n || s.pool_after.len() != n {
                    return Err(Error::Parameter(
                        "tiny CNN channel, kernel and pooling plans must have equal nonzero length".into(),
                    ));
                }
                if s.kernel_sizes.iter().any(|k| k % 2 == 0) {
                    return Err(Error::Parameter("tiny CNN kernel sizes must be odd".into()));
                }
                if [s.in_channels, s.height, s.width, s.classifier_width, s.classes].contains(&0)
                    || s.channels.contains(&0)
                {
                    return Err(Error::Parameter("tiny CNN dimensions must be positive".into()));
                }
                let (mut h, mut w) = (s.height, s.width);
                for &p in &s.pool_after {
                    if p {
                        if h < 2 || w < 2 {
                            return Err(Error::Parameter("tiny CNN pools below 2×2".into()));
                        }
                        h /= 2;
                        w /= 2;
                    }
                }
            }
            Architecture::MetaNet(s) => {
                if s.hidden == 0 {
                    return Err(Error::Parameter("meta net hidden width must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        match self {
            Architecture::Mlp(s) => s.seed,
            Architecture::TinyCnn(s) => s.seed,
            Architecture::MetaNet(s) => s.seed,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Architecture::Mlp(s) => s.layer_widths[0],
            Architecture::TinyCnn(s) => s.in_channels * s.height * s.width,
            Architecture::MetaNet(_) => 2,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Architecture::Mlp(s) => *s.layer_widths.last().expect("validated"),
            Architecture::TinyCnn(s) => s.classes,
            Architecture::MetaNet(_) => 2,
        }
    }

    /// Widths and activations of the dense stack, if this is a pure dense network.
    fn dense_plan(&self) -> Option<(Vec<usize>, Activation, Activation)> {
        match self {
            Architecture::Mlp(s) => Some((s.layer_widths.clone(), s.hidden_activation, Activation::Identity)),
            Architecture::MetaNet(s) => Some((vec![2, s.hidden, s.hidden, 2], Activation::Tanh, Activation::Sigmoid)),
            Architecture::TinyCnn(_) => None,
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let dense = |out: &mut Vec<ParamSpec>, prefix: &str, widths: &[usize], hidden: Activation| {
            for (l, pair) in widths.windows(2).enumerate() {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let last = l + 2 == widths.len();
                let init = if !last && hidden == Activation::Relu {
                    Init::He { fan_in }
                } else {
                    Init::Xavier { fan_in, fan_out }
                };
                out.push(ParamSpec {
                    name: format!("{prefix}{l}.weight"),
                    shape: vec![fan_in, fan_out],
                    init,
                });
                out.push(ParamSpec {
                    name: format!("{prefix}{l}.bias"),
                    shape: vec![fan_out],
                    init: Init::Zero,
                });
            }
        };
        match self {
            Architecture::TinyCnn(s) => {
                let (mut c, mut h, mut w) = (s.in_channels, s.height, s.width);
                for (l, ((&co, &k), &pool)) in s.channels.iter().zip(&s.kernel_sizes).zip(&s.pool_after).enumerate() {
                    out.push(ParamSpec {
                        name: format!("conv{l}.weight"),
                        shape: vec![co, c, k, k],
                        init: Init::He { fan_in: c * k * k },
                    });
                    out.push(ParamSpec {
                        name: format!("conv{l}.bias"),
                        shape: vec![co],
                        init: Init::Zero,
                    });
                    c = co;
                    if pool {
                        h /= 2;
                        w /= 2;
                    }
                }
                dense(&mut out, "fc", &[c * h * w, s.classifier_width, s.classes], Activation::Relu);
            }
            _ => {
                let (widths, hidden, _) = self.dense_plan().expect("dense");
                dense(&mut out, "fc", &widths, hidden);
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_specs().iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }

    /// Forward pass from `B×input_dim` features to `B×output_dim` outputs.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &[Var], x: Var) -> Result<Var> {
        self.forward_traced(tape, params, x, &mut Vec::new())
    }

    /// As [`forward`](Self::forward), additionally recording each dense
    /// layer's input and pre-activation output.
    pub fn forward_traced<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        x: Var,
        trace: &mut Vec<LinearTrace>,
    ) -> Result<Var> {
        let specs = self.param_specs();
        if params.len() != specs.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (p, s) in params.iter().zip(&specs) {
            if tape.value(*p).shape() != s.shape.as_slice() {
                return Err(Error::shape("parameter", tape.value(*p).shape(), &s.shape));
            }
        }
        let (b, d) = tape.value(x).dims2("forward")?;
        if d != self.input_dim() {
            return Err(Error::shape("forward", tape.value(x).shape(), &[b, self.input_dim()]));
        }
        match self {
            Architecture::TinyCnn(s) => {
                let mut h = tape.reshape(x, &[b, s.in_channels, s.height, s.width])?;
                let nconv = s.channels.len();
                for l in 0..nconv {
                    let pad = s.kernel_sizes[l] / 2;
                    h = tape.conv2d(h, params[2 * l], params[2 * l + 1], pad)?;
                    h = tape.relu(h);
                    if s.pool_after[l] {
                        h = tape.max_pool2(h)?;
                    }
                }
                let flat: usize = tape.value(h).shape()[1..].iter().product();
                let h = tape.reshape(h, &[b, flat])?;
                dense_forward(tape, &params[2 * nconv..], h, Activation::Relu, Activation::Identity, trace)
            }
            _ => {
                let (_, hidden, output) = self.dense_plan().expect("dense");
                dense_forward(tape, params, x, hidden, output, trace)
            }
        }
    }
}

fn dense_forward<T: Real>(
    tape: &mut Tape<T>,
    params: &[Var],
    x: Var,
    hidden: Activation,
    output: Activation,
    trace: &mut Vec<LinearTrace>,
) -> Result<Var> {
    let layers = params.len() / 2;
    let mut h = x;
    for l in 0..layers {
        let z = tape.matmul(h, params[2 * l])?;
        let z = tape.add_row(z, params[2 * l + 1])?;
        trace.push(LinearTrace { input: h, preact: z });
        let act = if l + 1 == layers { output } else { hidden };
        h = act.apply(tape, z);
    }
    Ok(h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Per-parameter optimizer slots.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState<T> {
    SgdMomentum { buffers: Vec<Vec<T>> },
    Adam { m: Vec<Vec<T>>, v: Vec<Vec<T>>, step: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub params: Vec<NamedTensor<T>>,
    pub optimizer: Option<OptimizerState<T>>,
}

impl<T: Real> ModelState<T> {
    /// Deep copy of the parameters only; optimizer slots are not carried over.
    pub fn clone_state(&self) -> Self {
        Self {
            params: self.params.clone(),
            optimizer: None,
        }
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.tensor.clone()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for p in &self.params {
            out.extend_from_slice(p.tensor.data());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape("set_flat", &[self.num_params()], &[flat.len()]));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.tensor.len();
            p.tensor.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Registers every parameter on the tape as a leaf.
    pub fn load(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone(), requires_grad))
            .collect()
    }

    /// Collects gradients of previously loaded parameter leaves, zero-filled
    /// where no gradient reached them.
    pub fn grads_from(&self, tape: &Tape<T>, vars: &[Var]) -> Vec<Vec<T>> {
        vars.iter()
            .zip(&self.params)
            .map(|(v, p)| match tape.grad(*v) {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); p.tensor.len()],
            })
            .collect()
    }
}

/// Deterministic initialization: He-normal for relu layers, Xavier-normal
/// for tanh and output layers, zero biases.
pub fn init_params<T: Real>(arch: &Architecture, seed: u64) -> Result<ModelState<T>> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    for spec in arch.param_specs() {
        let n: usize = spec.shape.iter().product();
        let std = match spec.init {
            Init::He { fan_in } => (2.0 / fan_in as f64).sqrt(),
            Init::Xavier { fan_in, fan_out } => (2.0 / (fan_in + fan_out) as f64).sqrt(),
            Init::Zero => 0.0,
        };
        let data = if std == 0.0 {
            vec![T::zero(); n]
        } else {
            let normal = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| T::of(normal.sample(&mut rng))).collect()
        };
        params.push(NamedTensor {
            name: spec.name,
            tensor: Tensor::new(spec.shape, data)?,
        });
    }
    Ok(ModelState { params, optimizer: None })
}

/// An architecture together with its parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub arch: Architecture,
    pub state: ModelState<T>,
}

impl<T: Real> Model<T> {
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let state = init_params(&arch, seed)?;
        Ok(Self { arch, state })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let params = arch
            .param_specs()
            .into_iter()
            .map(|s| NamedTensor {
                tensor: Tensor::zeros(&s.shape),
                name: s.name,
            })
            .collect();
        Ok(Self {
            arch,
            state: ModelState { params, optimizer: None },
        })
    }

    pub fn clone_state(&self) -> ModelState<T> {
        self.state.clone_state()
    }

    /// Logits for a feature matrix, evaluated without recording.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        const CHUNK: usize = 512;
        let (n, d) = x.dims2("predict")?;
        let c = self.arch.output_dim();
        let mut out = Vec::with_capacity(n * c);
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let mut tape = Tape::frozen();
            let params = self.state.load(&mut tape, false);
            let xs = Tensor::new(vec![end - start, d], x.data()[start * d..end * d].to_vec())?;
            let xv = tape.constant(xs);
            let y = self.arch.forward(&mut tape, &params, xv)?;
            out.extend_from_slice(tape.value(y).data());
            start = end;
        }
        Tensor::new(vec![n, c], out)
    }
}
