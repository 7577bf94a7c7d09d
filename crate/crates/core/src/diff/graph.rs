//! Tape of tensor operations with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and backward is a single reverse sweep.

use std::collections::HashMap;

use super::fft::fft2_pairs;
use super::params::ParameterStore;
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Tanh,
    Sin,
    Cos,
    Softplus,
    Sigmoid,
    Square,
    Sqrt,
    Abs,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Tanh => "tanh",
            Unary::Sin => "sin",
            Unary::Cos => "cos",
            Unary::Softplus => "softplus",
            Unary::Sigmoid => "sigmoid",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::Abs => "abs",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// Operation tag of a node.
#[derive(Clone, Debug)]
pub enum Op<S> {
    Leaf,
    Unary(Unary, Var),
    LeakyRelu(Var, S),
    Affine(Var, S, S),
    Binary(Binary, Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var),
    SumAxis(Var, usize),
    LogSumExp(Var, usize),
    Reshape(Var),
    BroadcastTo(Var),
    Gather { x: Var, axis: usize, index: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    CircConv2 { x: Var, kernel: Vec<S>, kh: usize, kw: usize },
    Fft2 { x: Var, inverse: bool },
    TriSolve { a: Var, b: Var, lower: bool },
}

struct Node<S> {
    op: Op<S>,
    shape: Vec<usize>,
    value: Vec<S>,
    requires_grad: bool,
}

/// Computation graph. Build values with the op methods, then call
/// [`Graph::backward`] on a scalar node.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
    track_params: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    params: Vec<(String, Var)>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to `v`; zeros if `v` was not reached.
    pub fn wrt(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameter gradients in registration order.
    pub fn params(&self) -> impl Iterator<Item = (&str, Option<&[S]>)> {
        self.params
            .iter()
            .map(move |(name, v)| (name.as_str(), self.wrt(*v)))
    }

    pub fn param(&self, name: &str) -> Option<&[S]> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| self.wrt(*v))
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return None;
        };
    }
    Some(out)
}

fn bcast_strides(input: &[usize], out: &[usize]) -> Vec<usize> {
    let r = out.len();
    let off = r - input.len();
    let mut strides = vec![0; r];
    let mut s = 1;
    for i in (0..input.len()).rev() {
        strides[off + i] = if input[i] == 1 { 0 } else { s };
        s *= input[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast.
fn for_each_bcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out);
    if a == out && b == out {
        for i in 0..n {
            f(i, i, i);
        }
        return;
    }
    let sa = bcast_strides(a, out);
    let sb = bcast_strides(b, out);
    let r = out.len();
    let mut idx = vec![0usize; r];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        let mut d = r;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn softplus<S: Scalar>(x: S) -> S {
    // log(1 + e^x) without overflow
    if x > S::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Solves `a x = b` for triangular `a` (`n x n`) and `b` (`n x k`). With
/// `transpose`, solves `a^T x = b` instead.
fn tri_solve<S: Scalar>(a: &[S], b: &[S], n: usize, k: usize, lower: bool, transpose: bool) -> Vec<S> {
    let at = |i: usize, j: usize| if transpose { a[j * n + i] } else { a[i * n + j] };
    // lower XOR transpose decides forward or backward substitution
    let forward = lower != transpose;
    let mut x = b.to_vec();
    let order: Vec<usize> = if forward {
        (0..n).collect()
    } else {
        (0..n).rev().collect()
    };
    for (pos, &i) in order.iter().enumerate() {
        let diag = at(i, i);
        for c in 0..k {
            let mut s = x[i * k + c];
            for &j in &order[..pos] {
                s = s - at(i, j) * x[j * k + c];
            }
            x[i * k + c] = s / diag;
        }
    }
    x
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
            track_params: true,
        }
    }

    /// Graph whose parameters are bound as constants (evaluation only).
    pub fn no_grad() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, v: Var) -> &Op<S> {
        &self.nodes[v.0].op
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn item(&self, v: Var) -> S {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<S> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    fn push(&mut self, op: Op<S>, shape: Vec<usize>, value: Vec<S>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &str,
        op: Op<S>,
        shape: Vec<usize>,
        value: Vec<S>,
        requires_grad: bool,
    ) -> Result<Var> {
        if let Some(i) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(
                name,
                format!("non-finite output at flat index {i} (shape {shape:?})"),
            ));
        }
        Ok(self.push(op, shape, value, requires_grad))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input (never differentiated).
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        let shape = t.shape().to_vec();
        self.push(Op::Leaf, shape, t.into_data(), false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<S>) -> Result<Var> {
        Ok(self.constant(Tensor::new(shape, data)?))
    }

    pub fn scalar(&mut self, v: S) -> Var {
        self.push(Op::Leaf, vec![1], vec![v], false)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let shape = t.shape().to_vec();
        self.push(Op::Leaf, shape, t.into_data(), true)
    }

    /// Binds a named parameter from `store`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore<S>, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter '{name}'")))?;
        let rg = self.track_params && t.requires_grad();
        let v = self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), rg);
        self.param_index.insert(name.to_string(), v);
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    /// Copy of `x` cut off from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.tensor(x);
        self.constant(t)
    }

    // ---- elementwise -------------------------------------------------------

    pub fn unary(&mut self, u: Unary, x: Var) -> Result<Var> {
        let xs = self.value(x);
        if u == Unary::Log {
            if let Some(i) = xs.iter().position(|&v| v <= S::zero()) {
                return Err(Error::numeric("log", format!("non-positive input at {i}")));
            }
        }
        if u == Unary::Sqrt {
            if let Some(i) = xs.iter().position(|&v| v < S::zero()) {
                return Err(Error::numeric("sqrt", format!("negative input at {i}")));
            }
        }
        let f: fn(S) -> S = match u {
            Unary::Neg => |v| -v,
            Unary::Exp => |v| v.exp(),
            Unary::Log => |v| v.ln(),
            Unary::Tanh => |v| v.tanh(),
            Unary::Sin => |v| v.sin(),
            Unary::Cos => |v| v.cos(),
            Unary::Softplus => softplus,
            Unary::Sigmoid => sigmoid,
            Unary::Square => |v| v * v,
            Unary::Sqrt => |v| v.sqrt(),
            Unary::Abs => |v| v.abs(),
        };
        let out: Vec<S> = xs.iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push_checked(u.name(), Op::Unary(u, x), shape, out, rg)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }
    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sin, x)
    }
    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Cos, x)
    }
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Softplus, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, x)
    }
    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: S) -> Result<Var> {
        let out: Vec<S> = self
            .value(x)
            .iter()
            .map(|&v| if v > S::zero() { v } else { v * slope })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push_checked("leaky_relu", Op::LeakyRelu(x, slope), shape, out, rg)
    }

    /// `a * x + b` with constant `a`, `b`.
    pub fn affine(&mut self, x: Var, a: S, b: S) -> Result<Var> {
        let out: Vec<S> = self.value(x).iter().map(|&v| a * v + b).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push_checked("affine", Op::Affine(x, a, b), shape, out, rg)
    }

    pub fn scale(&mut self, x: Var, a: S) -> Result<Var> {
        self.affine(x, a, S::zero())
    }

    pub fn shift(&mut self, x: Var, b: S) -> Result<Var> {
        self.affine(x, S::one(), b)
    }

    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| {
            Error::config(format!("{op:?}: shapes {sa:?} and {sb:?} do not broadcast"))
        })?;
        if op == Binary::Div {
            if let Some(i) = self.value(b).iter().position(|&v| v == S::zero()) {
                return Err(Error::numeric("div", format!("division by zero at {i}")));
            }
        }
        let mut out = vec![S::zero(); numel(&out_shape)];
        {
            let (va, vb) = (self.value(a), self.value(b));
            match op {
                Binary::Add => for_each_bcast(&out_shape, &sa, &sb, |o, i, j| out[o] = va[i] + vb[j]),
                Binary::Sub => for_each_bcast(&out_shape, &sa, &sb, |o, i, j| out[o] = va[i] - vb[j]),
                Binary::Mul => for_each_bcast(&out_shape, &sa, &sb, |o, i, j| out[o] = va[i] * vb[j]),
                Binary::Div => for_each_bcast(&out_shape, &sa, &sb, |o, i, j| out[o] = va[i] / vb[j]),
            }
        }
        let rg = self.rg(&[a, b]);
        let name = match op {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        self.push_checked(name, Op::Binary(op, a, b), out_shape, out, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    // ---- linear algebra ----------------------------------------------------

    /// `[m, k] @ [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::config(format!(
                "matmul: incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            S::one(),
            self.value(a),
            k as isize,
            1,
            self.value(b),
            n as isize,
            1,
            S::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(&[a, b]);
        self.push_checked("matmul", Op::MatMul(a, b), vec![m, n], out, rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::config(format!("transpose needs rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Transpose(x), vec![c, r], out, rg))
    }

    /// Solves `a x = b` with `a` lower (or upper) triangular.
    pub fn tri_solve(&mut self, a: Var, b: Var, lower: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sa[0] != sa[1] || sb.len() != 2 || sb[0] != sa[0] {
            return Err(Error::config(format!(
                "tri_solve: incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        let n = sa[0];
        if (0..n).any(|i| self.value(a)[i * n + i] == S::zero()) {
            return Err(Error::numeric("tri_solve", "singular triangular matrix"));
        }
        let out = tri_solve(self.value(a), self.value(b), n, sb[1], lower, false);
        let rg = self.rg(&[a, b]);
        self.push_checked("tri_solve", Op::TriSolve { a, b, lower }, sb, out, rg)
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push_checked("sum", Op::Sum(x), vec![1], vec![s], rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, S::one() / S::of(n as f64))
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::config(format!("sum_axis: axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = self.value(x);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + v[base + i];
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push_checked("sum_axis", Op::SumAxis(x, axis), drop_axis(&shape, axis), out, rg)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = self.shape(x).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        self.scale(s, S::one() / S::of(len as f64))
    }

    /// `log(sum(exp(x)))` over `axis` with max-shift.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::config(format!("logsumexp: axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = self.value(x);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| v[(o * len + a) * inner + i];
                let m = (0..len).map(at).fold(S::neg_infinity(), S::max);
                let s: S = (0..len).map(|a| (at(a) - m).exp()).sum();
                out[o * inner + i] = m + s.ln();
            }
        }
        let rg = self.rg(&[x]);
        self.push_checked("logsumexp", Op::LogSumExp(x, axis), drop_axis(&shape, axis), out, rg)
    }

    // ---- shape manipulation ------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::config(format!(
                "reshape: cannot view {:?} as {shape:?}",
                self.shape(x)
            )));
        }
        let v = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Reshape(x), shape, v, rg))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        match broadcast_shape(&sx, &shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(Error::config(format!(
                    "broadcast_to: {sx:?} does not broadcast to {shape:?}"
                )))
            }
        }
        let mut out = vec![S::zero(); numel(&shape)];
        let v = self.value(x);
        for_each_bcast(&shape, &sx, &shape, |o, i, _| out[o] = v[i]);
        let rg = self.rg(&[x]);
        Ok(self.push(Op::BroadcastTo(x), shape, out, rg))
    }

    /// Selects entries `index` along `axis` (repeats allowed).
    pub fn gather(&mut self, x: Var, axis: usize, index: Vec<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::config(format!("gather: axis {axis} out of range for {shape:?}")));
        }
        if index.is_empty() || index.iter().any(|&i| i >= shape[axis]) {
            return Err(Error::config(format!(
                "gather: index out of range for axis of length {}",
                shape[axis]
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = self.value(x);
        let k = index.len();
        let mut out = Vec::with_capacity(outer * k * inner);
        for o in 0..outer {
            for &a in &index {
                let base = (o * len + a) * inner;
                out.extend_from_slice(&v[base..base + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = k;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Gather { x, axis, index }, out_shape, out, rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.gather(x, axis, (start..start + len).collect())
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::config("concat of zero tensors"))?;
        let base_shape = self.shape(*first).to_vec();
        if axis >= base_shape.len() {
            return Err(Error::config(format!("concat: axis {axis} out of range")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base_shape.len()
                || s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::config(format!(
                    "concat: shape {s:?} incompatible with {base_shape:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                let v = self.value(x);
                out.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let rg = self.rg(xs);
        Ok(self.push(
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            shape,
            out,
            rg,
        ))
    }

    // ---- imaging operators -------------------------------------------------

    /// Periodic 2-D convolution of the trailing `[h, w]` planes of `x` with a
    /// constant kernel whose origin is its center element.
    pub fn circ_conv2(&mut self, x: Var, kernel: &Tensor<S>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || kernel.rank() != 2 {
            return Err(Error::config("circ_conv2 needs a [.., h, w] input and a 2-D kernel"));
        }
        let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let out = conv2_periodic(self.value(x), h, w, kernel.data(), kh, kw, false);
        let rg = self.rg(&[x]);
        self.push_checked(
            "circ_conv2",
            Op::CircConv2 {
                x,
                kernel: kernel.data().to_vec(),
                kh,
                kw,
            },
            shape,
            out,
            rg,
        )
    }

    /// Unitary 2-D DFT of `[.., 2, h, w]` real/imaginary pairs.
    pub fn fft2(&mut self, x: Var, inverse: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 3 || shape[r - 3] != 2 {
            return Err(Error::config(format!(
                "fft2 expects [.., 2, h, w], got {shape:?}"
            )));
        }
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let mut out = self.value(x).to_vec();
        fft2_pairs(&mut out, h, w, inverse);
        let rg = self.rg(&[x]);
        self.push_checked("fft2", Op::Fft2 { x, inverse }, shape, out, rg)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![S::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn acc(&self, grads: &mut [Option<Vec<S>>], v: Var, g: Vec<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(g) {
                    *e = *e + x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Sums a gradient of shape `out` back onto `input` after broadcasting.
    fn unbroadcast(g: &[S], out: &[usize], input: &[usize]) -> Vec<S> {
        if out == input {
            return g.to_vec();
        }
        let mut r = vec![S::zero(); numel(input)];
        for_each_bcast(out, input, input, |o, i, _| r[i] = r[i] + g[o]);
        r
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Unary(u, x) => {
                let xv = self.value(*x);
                let dx: Vec<S> = match u {
                    Unary::Neg => g.iter().map(|&d| -d).collect(),
                    Unary::Exp => g.iter().zip(y).map(|(&d, &e)| d * e).collect(),
                    Unary::Log => g.iter().zip(xv).map(|(&d, &v)| d / v).collect(),
                    Unary::Tanh => g
                        .iter()
                        .zip(y)
                        .map(|(&d, &t)| d * (S::one() - t * t))
                        .collect(),
                    Unary::Sin => g.iter().zip(xv).map(|(&d, &v)| d * v.cos()).collect(),
                    Unary::Cos => g.iter().zip(xv).map(|(&d, &v)| -d * v.sin()).collect(),
                    Unary::Softplus => g.iter().zip(xv).map(|(&d, &v)| d * sigmoid(v)).collect(),
                    Unary::Sigmoid => g
                        .iter()
                        .zip(y)
                        .map(|(&d, &s)| d * s * (S::one() - s))
                        .collect(),
                    Unary::Square => g
                        .iter()
                        .zip(xv)
                        .map(|(&d, &v)| d * (v + v))
                        .collect(),
                    Unary::Sqrt => g
                        .iter()
                        .zip(y)
                        .map(|(&d, &s)| if s > S::zero() { d / (s + s) } else { S::zero() })
                        .collect(),
                    Unary::Abs => g
                        .iter()
                        .zip(xv)
                        .map(|(&d, &v)| {
                            if v > S::zero() {
                                d
                            } else if v < S::zero() {
                                -d
                            } else {
                                S::zero()
                            }
                        })
                        .collect(),
                };
                self.acc(grads, *x, dx);
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x);
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(&d, &v)| if v > S::zero() { d } else { d * *slope })
                    .collect();
                self.acc(grads, *x, dx);
            }
            Op::Affine(x, a, _) => {
                let dx = g.iter().map(|&d| d * *a).collect();
                self.acc(grads, *x, dx);
            }
            Op::Binary(op, a, b) => {
                let out = &node.shape;
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let da = match op {
                        Binary::Add | Binary::Sub => Self::unbroadcast(g, out, sa),
                        Binary::Mul => {
                            let mut r = vec![S::zero(); va.len()];
                            for_each_bcast(out, sa, sb, |o, i, j| r[i] = r[i] + g[o] * vb[j]);
                            r
                        }
                        Binary::Div => {
                            let mut r = vec![S::zero(); va.len()];
                            for_each_bcast(out, sa, sb, |o, i, j| r[i] = r[i] + g[o] / vb[j]);
                            r
                        }
                    };
                    self.acc(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut r = vec![S::zero(); vb.len()];
                    match op {
                        Binary::Add => for_each_bcast(out, sa, sb, |o, _, j| r[j] = r[j] + g[o]),
                        Binary::Sub => for_each_bcast(out, sa, sb, |o, _, j| r[j] = r[j] - g[o]),
                        Binary::Mul => {
                            for_each_bcast(out, sa, sb, |o, i, j| r[j] = r[j] + g[o] * va[i])
                        }
                        Binary::Div => for_each_bcast(out, sa, sb, |o, i, j| {
                            r[j] = r[j] - g[o] * va[i] / (vb[j] * vb[j])
                        }),
                    }
                    self.acc(grads, *b, r);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    // dA = dC @ B^T
                    let mut da = vec![S::zero(); m * k];
                    S::gemm(
                        m,
                        n,
                        k,
                        S::one(),
                        g,
                        n as isize,
                        1,
                        self.value(*b),
                        1,
                        n as isize,
                        S::zero(),
                        &mut da,
                        k as isize,
                        1,
                    );
                    self.acc(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    // dB = A^T @ dC
                    let mut db = vec![S::zero(); k * n];
                    S::gemm(
                        k,
                        m,
                        n,
                        S::one(),
                        self.value(*a),
                        1,
                        k as isize,
                        g,
                        n as isize,
                        1,
                        S::zero(),
                        &mut db,
                        n as isize,
                        1,
                    );
                    self.acc(grads, *b, db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![S::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::TriSolve { a, b, lower } => {
                let n = self.shape(*a)[0];
                let k = self.shape(*b)[1];
                // dB = A^{-T} dX ; dA = -dB X^T restricted to the triangle
                let db = tri_solve(self.value(*a), g, n, k, *lower, true);
                if self.requires_grad(*a) {
                    let mut da = vec![S::zero(); n * n];
                    for r in 0..n {
                        for c in 0..n {
                            let in_tri = if *lower { c <= r } else { c >= r };
                            if in_tri {
                                let mut s = S::zero();
                                for j in 0..k {
                                    s = s + db[r * k + j] * y[c * k + j];
                                }
                                da[r * n + c] = -s;
                            }
                        }
                    }
                    self.acc(grads, *a, da);
                }
                self.acc(grads, *b, db);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, vec![g[0]; n]);
            }
            Op::SumAxis(x, axis) => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let mut dx = vec![S::zero(); outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        dx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::LogSumExp(x, axis) => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let v = self.value(*x);
                let mut dx = vec![S::zero(); v.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let lse = y[o * inner + i];
                        let d = g[o * inner + i];
                        for a in 0..len {
                            let p = (o * len + a) * inner + i;
                            dx[p] = d * (v[p] - lse).exp();
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Reshape(x) => self.acc(grads, *x, g.to_vec()),
            Op::BroadcastTo(x) => {
                let dx = Self::unbroadcast(g, &node.shape, self.shape(*x));
                self.acc(grads, *x, dx);
            }
            Op::Gather { x, axis, index } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let k = index.len();
                let mut dx = vec![S::zero(); outer * len * inner];
                for o in 0..outer {
                    for (p, &a) in index.iter().enumerate() {
                        let src = (o * k + p) * inner;
                        let dst = (o * len + a) * inner;
                        for t in 0..inner {
                            dx[dst + t] = dx[dst + t] + g[src + t];
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if self.requires_grad(x) {
                        let mut dx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dx.extend_from_slice(&g[base..base + len * inner]);
                        }
                        self.acc(grads, x, dx);
                    }
                    offset += len;
                }
            }
            Op::CircConv2 { x, kernel, kh, kw } => {
                let s = self.shape(*x);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let dx = conv2_periodic(g, h, w, kernel, *kh, *kw, true);
                self.acc(grads, *x, dx);
            }
            Op::Fft2 { x, inverse } => {
                let s = self.shape(*x);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let mut dx = g.to_vec();
                fft2_pairs(&mut dx, h, w, !*inverse);
                self.acc(grads, *x, dx);
            }
        }
    }
}

/// Periodic convolution (or, with `adjoint`, correlation) of each `[h, w]`
/// plane with a centered kernel.
pub(crate) fn conv2_periodic<S: Scalar>(
    x: &[S],
    h: usize,
    w: usize,
    kernel: &[S],
    kh: usize,
    kw: usize,
    adjoint: bool,
) -> Vec<S> {
    let (ch, cw) = ((kh / 2) as isize, (kw / 2) as isize);
    let (hi, wi) = (h as isize, w as isize);
    let mut out = vec![S::zero(); x.len()];
    for (plane_in, plane_out) in x.chunks(h * w).zip(out.chunks_mut(h * w)) {
        for yy in 0..hi {
            for xx in 0..wi {
                let mut acc = S::zero();
                for i in 0..kh as isize {
                    for j in 0..kw as isize {
                        let kv = kernel[(i * kw as isize + j) as usize];
                        let (sy, sx) = if adjoint {
                            (yy + i - ch, xx + j - cw)
                        } else {
                            (yy - i + ch, xx - j + cw)
                        };
                        let sy = sy.rem_euclid(hi) as usize;
                        let sx = sx.rem_euclid(wi) as usize;
                        acc = acc + kv * plane_in[sy * w + sx];
                    }
                }
                plane_out[(yy * wi + xx) as usize] = acc;
            }
        }
    }
    out
}
