//! Define-by-run reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation executed on it. Values are addressed by
//! [`Var`] handles into the graph's arena; [`Graph::backward`] walks the arena
//! in exact reverse execution order and accumulates vector–Jacobian products.
//! A graph is single-use: build it, run `backward` once, read gradients, drop.
//!
//! Binary elementwise ops broadcast by repetition: the smaller operand must
//! either hold a single element or have a shape that is a suffix of the
//! larger operand's shape (e.g. a bias `[D]` against activations `[B, T, D]`).

use crate::betax;
use crate::error::{Error, Result};

/// Plain tensor value: a shape and row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Input(format!("tensor dimensions must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Input(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Relu,
    Sigmoid,
    Log,
    Exp,
    Sqrt,
    Softplus,
    Abs,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, shared_b: bool },
    Transpose(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    GatherRows { a: Var, rows: Vec<usize> },
    BetaNll { alpha: Var, beta: Var, y: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The tape of one forward/backward episode.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

const LAYERNORM_EPS: f64 = 1e-5;

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `out[m×n] += a[m×k] · b[k×n]`
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += s * bv;
            }
        }
    }
}

/// `out[m×k] += d[m×n] · b[k×n]ᵀ`
fn gemm_nt(d: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &d[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += drow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · d[m×n]`
fn gemm_tn(a: &[f64], d: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &d[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            for (o, &dv) in out[p * n..(p + 1) * n].iter_mut().zip(drow) {
                *o += s * dv;
            }
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` as `max(x, 0) + ln(1 + e^{−|x|})`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor { shape: self.nodes[v.0].value.shape.clone(), data: g.clone() })
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if let Some(bad) = value.data.iter().find(|x| !x.is_finite()) {
            return Err(Error::Numeric { op: name, detail: format!("produced {bad}") });
        }
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    fn broadcast(&self, name: &str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        let (long, short, ls) = if la >= lb { (sa, sb, lb) } else { (sb, sa, la) };
        let suffix = short.len() <= long.len() && long[long.len() - short.len()..] == *short;
        if suffix || ls == 1 {
            Ok(long.to_vec())
        } else {
            Err(Error::Input(format!("{name}: shapes {sa:?} and {sb:?} do not broadcast")))
        }
    }

    fn binary(&mut self, kind: Binary, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast(name, a, b)?;
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        let (la, lb) = (av.len(), bv.len());
        let n: usize = shape.iter().product();
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
            Binary::Max => x.max(y),
            Binary::Min => x.min(y),
        };
        let data = (0..n).map(|i| f(av[i % la], bv[i % lb])).collect();
        self.record(name, Tensor { shape, data }, Op::Binary(kind, a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, "div", a, b)
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Max, "maximum", a, b)
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Min, "minimum", a, b)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.map(a, |x| x + c);
        self.record("add_scalar", value, Op::AddScalar(a), &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.map(a, |x| x * c);
        self.record("mul_scalar", value, Op::MulScalar(a, c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.mul_scalar(a, -1.0)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&x| f(x)).collect() }
    }

    fn unary(&mut self, kind: Unary, name: &'static str, a: Var) -> Result<Var> {
        let value = self.map(a, |x| match kind {
            Unary::Relu => x.max(0.0),
            Unary::Sigmoid => stable_sigmoid(x),
            Unary::Log => x.ln(),
            Unary::Exp => x.exp(),
            Unary::Sqrt => x.sqrt(),
            Unary::Softplus => softplus(x),
            Unary::Abs => x.abs(),
        });
        self.record(name, value, Op::Unary(kind, a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, "relu", a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, "sigmoid", a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, "log", a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, "exp", a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, "sqrt", a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Softplus, "softplus", a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Abs, "abs", a)
    }

    /// `[..., m, k] × [k, n]` (shared right operand) or
    /// `[..., m, k] × [..., k, n]` (matching leading dimensions).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Input(format!("matmul needs rank ≥ 2 operands, got {sa:?} × {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::Input(format!("matmul inner dimensions differ: {sa:?} × {sb:?}")));
        }
        let lead = &sa[..sa.len() - 2];
        let shared_b = sb.len() == 2;
        if !shared_b && sb[..sb.len() - 2] != *lead {
            return Err(Error::Input(format!("matmul batch dimensions differ: {sa:?} × {sb:?}")));
        }
        let batch: usize = lead.iter().product();
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        if shared_b {
            gemm_nn(av, bv, &mut out, batch * m, k, n);
        } else {
            for i in 0..batch {
                gemm_nn(
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let op = Op::MatMul { a, b, batch, m, k, n, shared_b };
        self.record("matmul", Tensor { shape, data: out }, op, &[a, b])
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::Input(format!("transpose needs rank ≥ 2, got {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = self.value(a).len() / (r * c);
        let av = &self.value(a).data;
        let mut out = vec![0.0; av.len()];
        for bi in 0..batch {
            let (src, dst) = (&av[bi * r * c..], &mut out[bi * r * c..]);
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut shape = s.clone();
        shape.swap(s.len() - 2, s.len() - 1);
        self.record("transpose", Tensor { shape, data: out }, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape.to_vec(), self.value(a).data.clone())
            .map_err(|e| Error::Input(format!("reshape: {e}")))?;
        self.record("reshape", value, Op::Reshape(a), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::Input("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::Input(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::Input(format!("concat shapes {first:?} and {s:?} differ off axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&first, axis);
        let mut shape = first.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let d = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data[o * d..(o + 1) * d]);
            }
        }
        self.record("concat", Tensor { shape, data: out }, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::Input(format!("slice [{start}, {}) on axis {axis} of {s:?}", start + len)));
        }
        let (outer, dim, inner) = split_at_axis(&s, axis);
        let av = &self.value(a).data;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&av[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.record("slice", Tensor { shape, data: out }, Op::Slice { a, axis, start }, &[a])
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        self.record("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean of all entries, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        self.record("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Sums over the last dimension, dropping it (rank-1 inputs give `[1]`).
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = *s.last().expect("tensors have rank ≥ 1");
        let data: Vec<f64> = self.value(a).data.chunks(d).map(|c| c.iter().sum()).collect();
        let shape = if s.len() == 1 { vec![1] } else { s[..s.len() - 1].to_vec() };
        self.record("sum_last", Tensor { shape, data }, Op::SumLast(a), &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = *t.shape.last().expect("tensors have rank ≥ 1");
        let mut out = t.data.clone();
        for row in out.chunks_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let shape = t.shape.clone();
        self.record("softmax", Tensor { shape, data: out }, Op::Softmax(a), &[a])
    }

    /// Normalizes over the last dimension, then applies `gamma · x̂ + beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().expect("tensors have rank ≥ 1");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Input(format!(
                "layernorm over {d} needs scale/shift of shape [{d}], got {:?}/{:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let xv = &self.value(x).data;
        let (gv, bv) = (&self.value(gamma).data, &self.value(beta).data);
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYERNORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mu) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        let op = Op::LayerNorm { x, gamma, beta, xhat, rstd };
        self.record("layernorm", Tensor { shape: s, data: out }, op, &[x, gamma, beta])
    }

    /// Views `a` as `[R, C]` (C = last dimension) and picks the listed rows.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let c = *t.shape.last().expect("tensors have rank ≥ 1");
        let r = t.len() / c;
        if rows.is_empty() || rows.iter().any(|&i| i >= r) {
            return Err(Error::Input(format!("gather_rows {rows:?} out of range for {r} rows")));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&t.data[i * c..(i + 1) * c]);
        }
        let value = Tensor { shape: vec![rows.len(), c], data: out };
        self.record("gather_rows", value, Op::GatherRows { a, rows: rows.to_vec() }, &[a])
    }

    /// Elementwise Beta negative log-likelihood `−log p(y | α, β)` with
    /// constant targets, each clamped into `[EPS, 1 − EPS]`.
    pub fn beta_nll(&mut self, alpha: Var, beta: Var, y: &[f64]) -> Result<Var> {
        let (av, bv) = (&self.value(alpha).data, &self.value(beta).data);
        if av.len() != y.len() || bv.len() != y.len() {
            return Err(Error::Input(format!(
                "beta_nll sizes differ: alpha {}, beta {}, targets {}",
                av.len(),
                bv.len(),
                y.len()
            )));
        }
        if let Some(bad) = av.iter().chain(bv).find(|v| !(**v > 0.0)) {
            return Err(Error::Domain(format!("beta_nll shape {bad} must be positive")));
        }
        let y: Vec<f64> = y.iter().map(|&v| betax::clamp_target(v)).collect();
        let data = (0..y.len()).map(|i| -betax::log_pdf_raw(av[i], bv[i], y[i])).collect();
        let value = Tensor { shape: self.shape(alpha).to_vec(), data };
        self.record("beta_nll", value, Op::BetaNll { alpha, beta, y }, &[alpha, beta])
    }

    /// Populates gradients of the scalar `loss` with respect to every node
    /// that depends on a trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Input("backward already ran on this graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Input(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                self.grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g)?;
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numeric { op: "backward", detail: format!("gradient {bad} at node {idx}") });
            }
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64], &[Node])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let mut buf = self.grads[v.0].take().unwrap_or_else(|| vec![0.0; n]);
        f(&mut buf, &self.nodes);
        self.grads[v.0] = Some(buf);
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) -> Result<()> {
        // Move the op out temporarily so parent grads can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (a, b, kind) = (*a, *b, *kind);
                let la = self.nodes[a.0].value.len();
                let lb = self.nodes[b.0].value.len();
                let partial = |nodes: &[Node], i: usize, wrt_a: bool| {
                    let x = nodes[a.0].value.data[i % la];
                    let y = nodes[b.0].value.data[i % lb];
                    match (kind, wrt_a) {
                        (Binary::Add, _) => 1.0,
                        (Binary::Sub, true) => 1.0,
                        (Binary::Sub, false) => -1.0,
                        (Binary::Mul, true) => y,
                        (Binary::Mul, false) => x,
                        (Binary::Div, true) => 1.0 / y,
                        (Binary::Div, false) => -x / (y * y),
                        (Binary::Max, true) => f64::from(x >= y),
                        (Binary::Max, false) => f64::from(x < y),
                        (Binary::Min, true) => f64::from(x <= y),
                        (Binary::Min, false) => f64::from(x > y),
                    }
                };
                self.accumulate(a, |buf, nodes| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[i % la] += gi * partial(nodes, i, true);
                    }
                });
                self.accumulate(b, |buf, nodes| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[i % lb] += gi * partial(nodes, i, false);
                    }
                });
            }
            Op::Unary(kind, a) => {
                let (kind, a) = (*kind, *a);
                let out = std::mem::take(&mut self.nodes[idx].value.data);
                self.accumulate(a, |buf, nodes| {
                    let x = &nodes[a.0].value.data;
                    for i in 0..g.len() {
                        let d = match kind {
                            Unary::Relu => f64::from(x[i] > 0.0),
                            Unary::Sigmoid => out[i] * (1.0 - out[i]),
                            Unary::Log => 1.0 / x[i],
                            Unary::Exp => out[i],
                            Unary::Sqrt => 0.5 / out[i],
                            Unary::Softplus => stable_sigmoid(x[i]),
                            Unary::Abs => x[i].signum() * f64::from(x[i] != 0.0),
                        };
                        buf[i] += g[i] * d;
                    }
                });
                self.nodes[idx].value.data = out;
            }
            Op::AddScalar(a) => self.accumulate(*a, |buf, _| {
                buf.iter_mut().zip(g).for_each(|(b, gi)| *b += gi);
            }),
            Op::MulScalar(a, c) => {
                let c = *c;
                self.accumulate(*a, |buf, _| buf.iter_mut().zip(g).for_each(|(b, gi)| *b += c * gi));
            }
            Op::MatMul { a, b, batch, m, k, n, shared_b } => {
                let (a, b, batch, m, k, n, shared_b) = (*a, *b, *batch, *m, *k, *n, *shared_b);
                self.accumulate(a, |buf, nodes| {
                    let bv = &nodes[b.0].value.data;
                    if shared_b {
                        gemm_nt(g, bv, buf, batch * m, k, n);
                    } else {
                        for i in 0..batch {
                            gemm_nt(
                                &g[i * m * n..(i + 1) * m * n],
                                &bv[i * k * n..(i + 1) * k * n],
                                &mut buf[i * m * k..(i + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                });
                self.accumulate(b, |buf, nodes| {
                    let av = &nodes[a.0].value.data;
                    if shared_b {
                        gemm_tn(av, g, buf, batch * m, k, n);
                    } else {
                        for i in 0..batch {
                            gemm_tn(
                                &av[i * m * k..(i + 1) * m * k],
                                &g[i * m * n..(i + 1) * m * n],
                                &mut buf[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let a = *a;
                let s = self.nodes[a.0].value.shape.clone();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                self.accumulate(a, |buf, _| {
                    for bi in 0..buf.len() / (r * c) {
                        for i in 0..r {
                            for j in 0..c {
                                buf[bi * r * c + i * c + j] += g[bi * r * c + j * r + i];
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => self.accumulate(*a, |buf, _| {
                buf.iter_mut().zip(g).for_each(|(b, gi)| *b += gi);
            }),
            Op::Concat { parts, axis } => {
                let shape = self.nodes[idx].value.shape.clone();
                let (outer, total, inner) = split_at_axis(&shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let d = self.nodes[p.0].value.shape[*axis];
                    self.accumulate(p, |buf, _| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + d) * inner];
                            for (b, s) in buf[o * d * inner..(o + 1) * d * inner].iter_mut().zip(src) {
                                *b += s;
                            }
                        }
                    });
                    offset += d;
                }
            }
            Op::Slice { a, axis, start } => {
                let (a, axis, start) = (*a, *axis, *start);
                let src_shape = self.nodes[a.0].value.shape.clone();
                let len = self.nodes[idx].value.shape[axis];
                let (outer, dim, inner) = split_at_axis(&src_shape, axis);
                self.accumulate(a, |buf, _| {
                    for o in 0..outer {
                        let base = (o * dim + start) * inner;
                        for (b, s) in buf[base..base + len * inner].iter_mut().zip(&g[o * len * inner..]) {
                            *b += s;
                        }
                    }
                });
            }
            Op::Sum(a) => self.accumulate(*a, |buf, _| buf.iter_mut().for_each(|b| *b += g[0])),
            Op::Mean(a) => self.accumulate(*a, |buf, _| {
                let n = buf.len() as f64;
                buf.iter_mut().for_each(|b| *b += g[0] / n);
            }),
            Op::SumLast(a) => {
                let a = *a;
                let d = *self.nodes[a.0].value.shape.last().unwrap();
                self.accumulate(a, |buf, _| {
                    for (i, b) in buf.iter_mut().enumerate() {
                        *b += g[i / d];
                    }
                });
            }
            Op::Softmax(a) => {
                let a = *a;
                let d = *self.nodes[idx].value.shape.last().unwrap();
                let out = std::mem::take(&mut self.nodes[idx].value.data);
                self.accumulate(a, |buf, _| {
                    for ((brow, yrow), grow) in buf.chunks_mut(d).zip(out.chunks(d)).zip(g.chunks(d)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, gi)| y * gi).sum();
                        for j in 0..d {
                            brow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
                self.nodes[idx].value.data = out;
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = self.nodes[gamma.0].value.len();
                self.accumulate(gamma, |buf, _| {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            buf[j] += grow[j] * hrow[j];
                        }
                    }
                });
                self.accumulate(beta, |buf, _| {
                    for grow in g.chunks(d) {
                        for j in 0..d {
                            buf[j] += grow[j];
                        }
                    }
                });
                self.accumulate(x, |buf, nodes| {
                    let gv = &nodes[gamma.0].value.data;
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            buf[r * d + j] += rstd[r] * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::GatherRows { a, rows } => {
                let a = *a;
                let c = *self.nodes[a.0].value.shape.last().unwrap();
                self.accumulate(a, |buf, _| {
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            buf[r * c + j] += g[k * c + j];
                        }
                    }
                });
            }
            Op::BetaNll { alpha, beta, y } => {
                let (alpha, beta) = (*alpha, *beta);
                let grads: Vec<(f64, f64)> = {
                    let (av, bv) = (&self.nodes[alpha.0].value.data, &self.nodes[beta.0].value.data);
                    (0..y.len()).map(|i| betax::nll_grad_raw(av[i], bv[i], y[i])).collect()
                };
                self.accumulate(alpha, |buf, _| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * grads[i].0;
                    }
                });
                self.accumulate(beta, |buf, _| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * grads[i].1;
                    }
                });
            }
        }
        self.nodes[idx].op = op;
        Ok(())
    }
}

/// A named trainable tensor that outlives individual graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Parameter { name: name.into(), value, grad: None }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Global gradient-norm ceiling applied before each update.
pub const GRAD_CLIP_NORM: f64 = 1.0;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm(params: &[Parameter]) -> f64 {
    params
        .iter()
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|g| g.data.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// One Adam update with global gradient-norm clipping at [`GRAD_CLIP_NORM`].
pub fn adam_step(params: &mut [Parameter], state: &mut AdamState, lr: f64) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::Input(format!("parameter `{}` has no gradient", p.name)));
    }
    if state.first.is_empty() {
        state.first = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        state.second = state.first.clone();
    }
    if state.first.len() != params.len() {
        return Err(Error::Input("optimizer state does not match the parameter list".into()));
    }
    let norm = grad_norm(params);
    let scale = if norm > GRAD_CLIP_NORM { GRAD_CLIP_NORM / norm } else { 1.0 };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = p.grad.as_ref().expect("checked above");
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for j in 0..p.value.data.len() {
            let gj = g.data[j] * scale;
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p.value.data[j] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}
