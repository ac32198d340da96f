//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every operation appends a node holding its value and the indices of its
//! inputs. Nodes are appended in creation order, so walking the node list
//! backwards is a valid reverse topological order.
//!
//! A tape is either recording or frozen. Nodes created while frozen, and
//! nodes produced by [`Tape::detach`], carry no parent links and therefore
//! route no gradient to anything upstream of them.
//!
//! Gradients accumulate additively across `backward` calls until
//! [`Tape::zero_grad`] clears them. Intermediate nodes keep their adjoints
//! too; per-sample gradient extraction relies on reading them.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{log_softmax_rows, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a stride-1 2D convolution with symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    LogSoftmax(Var, T),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Column(Var, usize),
    Reshape(Var),
    Slice(Var, usize),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

#[derive(Debug, Clone)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that records nothing; every node is a constant.
    pub fn frozen() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn set_recording(&mut self, recording: bool) {
        self.recording = recording;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.recording,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies the value of `v` into a fresh constant node.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, or `None` if no backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of `v` shaped like its value; zeros if absent.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let live = self.recording && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: if live { op } else { Op::Leaf },
            requires_grad: live,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Adds a length-`n` row vector to every row of a `B×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (b, n) = self.value(x).dims2("add_row")?;
        if self.value(row).len() != n {
            return Err(Error::shape("add_row", self.value(x).shape(), self.value(row).shape()));
        }
        let r = self.value(row).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..b {
            for (o, &v) in data[i * n..(i + 1) * n].iter_mut().zip(r) {
                *o += v;
            }
        }
        let out = Tensor::new(vec![b, n], data)?;
        Ok(self.push(out, Op::AddRow(x, row), &[x, row]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        self.push(out, Op::Exp(a), &[a])
    }

    /// Row-wise log-softmax of `logits / temperature`.
    pub fn log_softmax(&mut self, logits: Var, temperature: T) -> Result<Var> {
        let out = log_softmax_rows(self.value(logits), temperature)?;
        Ok(self.push(out, Op::LogSoftmax(logits, temperature), &[logits]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::Input("mean of an empty tensor".into()));
        }
        let s = v.data().iter().fold(T::zero(), |acc, &x| acc + x);
        let m = s / T::of(v.len() as f64);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), &[a]))
    }

    /// `B×C → B`, summing each row.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (b, c) = self.value(a).dims2("sum_rows")?;
        let d = self.value(a).data();
        let out: Vec<T> = (0..b)
            .map(|r| d[r * c..(r + 1) * c].iter().fold(T::zero(), |acc, &v| acc + v))
            .collect();
        Ok(self.push(Tensor::vector(out), Op::SumRows(a), &[a]))
    }

    /// Column `j` of a `B×C` matrix as a length-`B` vector.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let (b, c) = self.value(a).dims2("column")?;
        if j >= c {
            return Err(Error::Input(format!("column {j} out of range for {c} columns")));
        }
        let d = self.value(a).data();
        let out: Vec<T> = (0..b).map(|r| d[r * c + j]).collect();
        Ok(self.push(Tensor::vector(out), Op::Column(a, j), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let n: usize = shape.iter().product();
        if n != v.len() {
            return Err(Error::shape("reshape", v.shape(), shape));
        }
        let out = Tensor::new(shape.to_vec(), v.data().to_vec())?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Contiguous run of `product(shape)` elements starting at flat `offset`.
    pub fn slice(&mut self, a: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let n: usize = shape.iter().product();
        if offset + n > v.len() {
            return Err(Error::shape("slice", v.shape(), &[offset, n]));
        }
        let out = Tensor::new(shape.to_vec(), v.data()[offset..offset + n].to_vec())?;
        Ok(self.push(out, Op::Slice(a, offset), &[a]))
    }

    /// Stride-1 convolution, input `N×Cin×H×W`, weight `Cout×Cin×K×K`,
    /// bias `Cout`, zero padding `pad` on every side.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, pad: usize) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let (n, cin, h, w) = match xs.as_slice() {
            [n, c, h, w] => (*n, *c, *h, *w),
            _ => return Err(Error::shape("conv2d", &xs, &ws)),
        };
        let (cout, k) = match ws.as_slice() {
            [co, ci, k1, k2] if *ci == cin && k1 == k2 => (*co, *k1),
            _ => return Err(Error::shape("conv2d", &xs, &ws)),
        };
        if self.value(bias).len() != cout {
            return Err(Error::shape("conv2d", &ws, self.value(bias).shape()));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            k,
            pad,
            oh: h + 2 * pad - k + 1,
            ow: w + 2 * pad - k + 1,
        };
        let out = conv_forward(&geom, self.value(input).data(), self.value(weight).data(), self.value(bias).data());
        let out = Tensor::new(vec![n, cout, geom.oh, geom.ow], out)?;
        Ok(self.push(out, Op::Conv2d { input, weight, bias, geom }, &[input, weight, bias]))
    }

    /// 2×2 max pooling with stride 2 over `N×C×H×W` (odd trailing rows/cols dropped).
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let (n, c, h, w) = match xs.as_slice() {
            [n, c, h, w] if *h >= 2 && *w >= 2 => (*n, *c, *h, *w),
            _ => return Err(Error::shape("max_pool2", &xs, &[0, 0, 2, 2])),
        };
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(out, Op::MaxPool2 { input, argmax }, &[input]))
    }

    /// Reverse pass from a scalar `loss`, accumulating into every node that
    /// requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.recording {
            return Err(Error::Contract("backward on a frozen tape".into()));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, &v) in acc.iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let live = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2("matmul").expect("rank 2");
                let n = nodes[b.0].value.shape()[1];
                if live(*a) {
                    matmul_nt_acc(g, val(*b), slot(adj, nodes, *a), m, k, n);
                }
                if live(*b) {
                    matmul_tn_acc(val(*a), g, slot(adj, nodes, *b), m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if live(v) {
                        add_into(slot(adj, nodes, v), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if live(*a) {
                    add_into(slot(adj, nodes, *a), g);
                }
                if live(*b) {
                    for (d, &gv) in slot(adj, nodes, *b).iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if live(*a) {
                    let bv = val(*b).to_vec();
                    for ((d, &gv), &x) in slot(adj, nodes, *a).iter_mut().zip(g).zip(&bv) {
                        *d += gv * x;
                    }
                }
                if live(*b) {
                    let av = val(*a).to_vec();
                    for ((d, &gv), &x) in slot(adj, nodes, *b).iter_mut().zip(g).zip(&av) {
                        *d += gv * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                for (d, &gv) in slot(adj, nodes, *a).iter_mut().zip(g) {
                    *d += gv * *c;
                }
            }
            Op::AddRow(x, row) => {
                if live(*x) {
                    add_into(slot(adj, nodes, *x), g);
                }
                if live(*row) {
                    let n = nodes[row.0].value.len();
                    let d = slot(adj, nodes, *row);
                    for r in g.chunks(n) {
                        add_into(d, r);
                    }
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                for ((d, &gv), &xv) in slot(adj, nodes, *a).iter_mut().zip(g).zip(x) {
                    if xv > T::zero() {
                        *d += gv;
                    }
                }
            }
            Op::Tanh(a) => {
                for ((d, &gv), &y) in slot(adj, nodes, *a).iter_mut().zip(g).zip(out) {
                    *d += gv * (T::one() - y * y);
                }
            }
            Op::Sigmoid(a) => {
                for ((d, &gv), &y) in slot(adj, nodes, *a).iter_mut().zip(g).zip(out) {
                    *d += gv * y * (T::one() - y);
                }
            }
            Op::Exp(a) => {
                for ((d, &gv), &y) in slot(adj, nodes, *a).iter_mut().zip(g).zip(out) {
                    *d += gv * y;
                }
            }
            Op::LogSoftmax(a, tau) => {
                let c = *nodes[i].value.shape().last().expect("rank 2");
                let d = slot(adj, nodes, *a);
                for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                    let gs = gr.iter().fold(T::zero(), |s, &v| s + v);
                    for ((dv, &gv), &y) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv += (gv - y.exp() * gs) / *tau;
                    }
                }
            }
            Op::Sum(a) => {
                for d in slot(adj, nodes, *a).iter_mut() {
                    *d += g[0];
                }
            }
            Op::Mean(a) => {
                let n = T::of(nodes[a.0].value.len() as f64);
                for d in slot(adj, nodes, *a).iter_mut() {
                    *d += g[0] / n;
                }
            }
            Op::SumRows(a) => {
                let c = nodes[a.0].value.shape()[1];
                for (dr, &gv) in slot(adj, nodes, *a).chunks_mut(c).zip(g) {
                    for d in dr {
                        *d += gv;
                    }
                }
            }
            Op::Column(a, j) => {
                let c = nodes[a.0].value.shape()[1];
                for (dr, &gv) in slot(adj, nodes, *a).chunks_mut(c).zip(g) {
                    dr[*j] += gv;
                }
            }
            Op::Reshape(a) => add_into(slot(adj, nodes, *a), g),
            Op::Slice(a, offset) => {
                let d = slot(adj, nodes, *a);
                add_into(&mut d[*offset..*offset + g.len()], g);
            }
            Op::Conv2d { input, weight, bias, geom } => {
                if live(*input) {
                    let w = val(*weight).to_vec();
                    conv_backward_input(geom, g, &w, slot(adj, nodes, *input));
                }
                if live(*weight) {
                    let x = val(*input).to_vec();
                    conv_backward_weight(geom, g, &x, slot(adj, nodes, *weight));
                }
                if live(*bias) {
                    let d = slot(adj, nodes, *bias);
                    let plane = geom.oh * geom.ow;
                    for (ci, chunk) in g.chunks(plane).enumerate() {
                        d[ci % geom.cout] += chunk.iter().fold(T::zero(), |s, &v| s + v);
                    }
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let d = slot(adj, nodes, *input);
                for (&idx, &gv) in argmax.iter().zip(g) {
                    d[idx] += gv;
                }
            }
        }
    }
}

fn slot<'a, T: Real>(adj: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> &'a mut Vec<T> {
    adj[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn conv_forward<T: Real>(gm: &ConvGeom, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); gm.n * gm.cout * gm.oh * gm.ow];
    for n in 0..gm.n {
        for co in 0..gm.cout {
            let o = &mut out[(n * gm.cout + co) * gm.oh * gm.ow..][..gm.oh * gm.ow];
            for v in o.iter_mut() {
                *v = b[co];
            }
            for ci in 0..gm.cin {
                let xp = &x[(n * gm.cin + ci) * gm.h * gm.w..][..gm.h * gm.w];
                let wk = &w[(co * gm.cin + ci) * gm.k * gm.k..][..gm.k * gm.k];
                for ki in 0..gm.k {
                    for kj in 0..gm.k {
                        let wv = wk[ki * gm.k + kj];
                        for i in 0..gm.oh {
                            let Some(si) = (i + ki).checked_sub(gm.pad).filter(|&s| s < gm.h) else {
                                continue;
                            };
                            for j in 0..gm.ow {
                                let Some(sj) = (j + kj).checked_sub(gm.pad).filter(|&s| s < gm.w) else {
                                    continue;
                                };
                                o[i * gm.ow + j] += wv * xp[si * gm.w + sj];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward_input<T: Real>(gm: &ConvGeom, g: &[T], w: &[T], dx: &mut [T]) {
    for n in 0..gm.n {
        for co in 0..gm.cout {
            let go = &g[(n * gm.cout + co) * gm.oh * gm.ow..][..gm.oh * gm.ow];
            for ci in 0..gm.cin {
                let dxp = &mut dx[(n * gm.cin + ci) * gm.h * gm.w..][..gm.h * gm.w];
                let wk = &w[(co * gm.cin + ci) * gm.k * gm.k..][..gm.k * gm.k];
                for ki in 0..gm.k {
                    for kj in 0..gm.k {
                        let wv = wk[ki * gm.k + kj];
                        for i in 0..gm.oh {
                            let Some(si) = (i + ki).checked_sub(gm.pad).filter(|&s| s < gm.h) else {
                                continue;
                            };
                            for j in 0..gm.ow {
                                let Some(sj) = (j + kj).checked_sub(gm.pad).filter(|&s| s < gm.w) else {
                                    continue;
                                };
                                dxp[si * gm.w + sj] += wv * go[i * gm.ow + j];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_weight<T: Real>(gm: &ConvGeom, g: &[T], x: &[T], dw: &mut [T]) {
    for n in 0..gm.n {
        for co in 0..gm.cout {
            let go = &g[(n * gm.cout + co) * gm.oh * gm.ow..][..gm.oh * gm.ow];
            for ci in 0..gm.cin {
                let xp = &x[(n * gm.cin + ci) * gm.h * gm.w..][..gm.h * gm.w];
                let dwk = &mut dw[(co * gm.cin + ci) * gm.k * gm.k..][..gm.k * gm.k];
                for ki in 0..gm.k {
                    for kj in 0..gm.k {
                        let mut s = T::zero();
                        for i in 0..gm.oh {
                            let Some(si) = (i + ki).checked_sub(gm.pad).filter(|&s| s < gm.h) else {
                                continue;
                            };
                            for j in 0..gm.ow {
                                let Some(sj) = (j + kj).checked_sub(gm.pad).filter(|&s| s < gm.w) else {
                                    continue;
                                };
                                s += go[i * gm.ow + j] * xp[si * gm.w + sj];
                            }
                        }
                        dwk[ki * gm.k + kj] += s;
                    }
                }
            }
        }
    }
}
