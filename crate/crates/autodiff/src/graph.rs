//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends a node holding its output value. Inputs always
//! precede outputs on the tape, so walking it backwards from the loss is a
//! reverse topological traversal that touches each node once.

use std::collections::HashMap;

use crate::error::{AutodiffError, Result};
use crate::store::ParameterStore;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Affine,
    Concat,
    Slice,
    Reshape,
    Transpose,
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
    Clamp,
    Softmax,
    Sum,
    Mean,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Affine => "affine",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Reshape => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Clamp => "clamp",
            OpKind::Softmax => "softmax",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        const ALL: [OpKind; 19] = [
            OpKind::Leaf,
            OpKind::MatMul,
            OpKind::Add,
            OpKind::Sub,
            OpKind::Mul,
            OpKind::Affine,
            OpKind::Concat,
            OpKind::Slice,
            OpKind::Reshape,
            OpKind::Transpose,
            OpKind::Tanh,
            OpKind::Sigmoid,
            OpKind::Relu,
            OpKind::Exp,
            OpKind::Log,
            OpKind::Clamp,
            OpKind::Softmax,
            OpKind::Sum,
            OpKind::Mean,
        ];
        ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Concat(Vec<Var>, usize),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Affine(..) => OpKind::Affine,
            Op::Concat(..) => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Relu(..) => OpKind::Relu,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Clamp(..) => OpKind::Clamp,
            Op::Softmax(..) => OpKind::Softmax,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// Shape bookkeeping for the three supported matmul layouts.
#[derive(Clone, Copy, Debug)]
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    rhs_batched: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Option<MatMulDims> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Some(MatMulDims {
            batch: 1,
            m: *m,
            k: *k,
            n: *n,
            rhs_batched: false,
        }),
        ([bt, m, k], [k2, n]) if k == k2 => Some(MatMulDims {
            batch: *bt,
            m: *m,
            k: *k,
            n: *n,
            rhs_batched: false,
        }),
        ([bt, m, k], [bt2, k2, n]) if k == k2 && bt == bt2 => Some(MatMulDims {
            batch: *bt,
            m: *m,
            k: *k,
            n: *n,
            rhs_batched: true,
        }),
        _ => None,
    }
}

/// `rhs` either matches `lhs` exactly or drops only the leading batch axis.
fn broadcast_rhs(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<()> {
    if lhs == rhs || (lhs.len() == rhs.len() + 1 && &lhs[1..] == rhs) {
        Ok(())
    } else {
        Err(AutodiffError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        })
    }
}

/// Reverse-mode tape over dense tensors.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<String, Var>,
    backward_done: bool,
    faults: Vec<(OpKind, f64)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clears the tape. Injected faults are kept.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.params.clear();
        self.backward_done = false;
    }

    /// Test hook: scales the input gradients produced by every `kind` node by `factor`.
    pub fn inject_fault(&mut self, kind: OpKind, factor: f64) {
        self.faults.push((kind, factor));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Gradient of the last backward pass with respect to `v`, if reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// Records a leaf, differentiable if the tensor is flagged `requires_grad`.
    pub fn input(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Binds a stored parameter. Repeated calls return the same handle so
    /// that gradients from every use accumulate on one node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))?;
        let mut value = t.clone();
        value.clear_grad();
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = Some(name.to_string());
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Copies `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let d = matmul_dims(sa, sb).ok_or_else(|| AutodiffError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let mut out = vec![0.0; d.batch * d.m * d.n];
        let (ad, bd) = (self.data(a), self.data(b));
        for bi in 0..d.batch {
            let ao = bi * d.m * d.k;
            let bo = if d.rhs_batched { bi * d.k * d.n } else { 0 };
            let co = bi * d.m * d.n;
            for i in 0..d.m {
                for p in 0..d.k {
                    let av = ad[ao + i * d.k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[bo + p * d.n..bo + (p + 1) * d.n];
                    let crow = &mut out[co + i * d.n..co + (i + 1) * d.n];
                    for (c, bv) in crow.iter_mut().zip(brow) {
                        *c += av * bv;
                    }
                }
            }
        }
        let shape = if self.value(a).rank() == 2 {
            vec![d.m, d.n]
        } else {
            vec![d.batch, d.m, d.n]
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        broadcast_rhs(op, self.shape(a), self.shape(b))?;
        let bd = self.data(b);
        let bn = bd.len();
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % bn]))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok((t, self.rg(&[a, b])))
    }

    /// Elementwise sum; `b` may omit the leading batch axis of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|x| scale * x + shift).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Affine(a, scale), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| AutodiffError::InvalidArgument {
            op: "concat",
            msg: "no operands".into(),
        })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for rank {}", base.len()),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let conforms = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !conforms {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(inputs.to_vec(), axis), rg))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(AutodiffError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{end} on axis {axis} of shape {s:?}"),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            out.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Slice {
                input: a,
                axis,
                start,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let t = Tensor::new(shape.to_vec(), self.data(a).to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "transpose",
                msg: format!("needs rank >= 2, got shape {s:?}"),
            });
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = self.value(a).numel() / (r * c);
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            let o = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[o + j * r + i] = src[o + i * c + j];
                }
            }
        }
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Transpose(a), rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.data(a).iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(AutodiffError::Domain {
                op: "log",
                msg: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let cols = *s.last().unwrap_or(&1);
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for (row, dst) in src.chunks(cols).zip(out.chunks_mut(cols)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - max).exp();
                z += *d;
            }
            dst.iter_mut().for_each(|d| *d /= z);
        }
        let t = Tensor::new(s.to_vec(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.data(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Runs the reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        if loss.0 >= self.nodes.len() {
            return Err(AutodiffError::UnknownVar(loss.0));
        }
        if !self.value(loss).is_scalar() {
            return Err(AutodiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let fault = self
                .faults
                .iter()
                .filter(|(k, _)| *k == node.op.kind())
                .map(|(_, f)| *f)
                .product::<f64>();
            let mut emit = |v: Var, mut delta: Vec<f64>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                if fault != 1.0 {
                    delta.iter_mut().for_each(|d| *d *= fault);
                }
                match &mut grads[v.0] {
                    Some(g) => g.iter_mut().zip(&delta).for_each(|(x, d)| *x += d),
                    slot @ None => *slot = Some(delta),
                }
            };
            backward_node(nodes, node, &gout, &mut emit);
            grads[i] = Some(gout);
        }
        Ok(())
    }

    /// Runs [`Graph::backward`] and adds parameter gradients into `store`.
    /// Parameters the loss does not reach receive a zero gradient.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        self.backward(loss)?;
        for (name, t) in store.iter_mut() {
            match self.params.get(name).and_then(|v| self.grads[v.0].as_deref()) {
                Some(g) => t.accumulate_grad(g)?,
                None => {
                    t.grad_mut();
                }
            }
        }
        Ok(())
    }
}

fn backward_node(nodes: &[Node], node: &Node, gout: &[f64], emit: &mut impl FnMut(Var, Vec<f64>)) {
    let val = |v: Var| nodes[v.0].value.data();
    let shp = |v: Var| nodes[v.0].value.shape();
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let d = matmul_dims(shp(*a), shp(*b)).expect("validated in forward");
            let (ad, bd) = (val(*a), val(*b));
            if nodes[a.0].requires_grad {
                let mut ga = vec![0.0; ad.len()];
                for bi in 0..d.batch {
                    let bo = if d.rhs_batched { bi * d.k * d.n } else { 0 };
                    for i in 0..d.m {
                        let grow = &gout[(bi * d.m + i) * d.n..(bi * d.m + i + 1) * d.n];
                        for p in 0..d.k {
                            let brow = &bd[bo + p * d.n..bo + (p + 1) * d.n];
                            ga[(bi * d.m + i) * d.k + p] =
                                grow.iter().zip(brow).map(|(g, b)| g * b).sum();
                        }
                    }
                }
                emit(*a, ga);
            }
            if nodes[b.0].requires_grad {
                let mut gb = vec![0.0; bd.len()];
                for bi in 0..d.batch {
                    let bo = if d.rhs_batched { bi * d.k * d.n } else { 0 };
                    for i in 0..d.m {
                        let grow = &gout[(bi * d.m + i) * d.n..(bi * d.m + i + 1) * d.n];
                        for p in 0..d.k {
                            let av = ad[(bi * d.m + i) * d.k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (gbv, g) in gb[bo + p * d.n..bo + (p + 1) * d.n].iter_mut().zip(grow) {
                                *gbv += av * g;
                            }
                        }
                    }
                }
                emit(*b, gb);
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            emit(*a, gout.to_vec());
            let bn = val(*b).len();
            let mut gb = vec![0.0; bn];
            for (i, g) in gout.iter().enumerate() {
                gb[i % bn] += sign * g;
            }
            emit(*b, gb);
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (val(*a), val(*b));
            let bn = bd.len();
            let ga: Vec<f64> = gout.iter().enumerate().map(|(i, g)| g * bd[i % bn]).collect();
            let mut gb = vec![0.0; bn];
            for (i, g) in gout.iter().enumerate() {
                gb[i % bn] += g * ad[i];
            }
            emit(*a, ga);
            emit(*b, gb);
        }
        Op::Affine(a, s) => emit(*a, gout.iter().map(|g| g * s).collect()),
        Op::Concat(inputs, axis) => {
            let base = node.value.shape();
            let outer: usize = base[..*axis].iter().product();
            let inner: usize = base[axis + 1..].iter().product();
            let row = base[*axis] * inner;
            let mut offset = 0;
            for v in inputs {
                let chunk = shp(*v)[*axis] * inner;
                let mut g = Vec::with_capacity(outer * chunk);
                for o in 0..outer {
                    g.extend_from_slice(&gout[o * row + offset..o * row + offset + chunk]);
                }
                offset += chunk;
                emit(*v, g);
            }
        }
        Op::Slice { input, axis, start } => {
            let s = shp(*input);
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let width = node.value.shape()[*axis] * inner;
            let mut g = vec![0.0; val(*input).len()];
            for o in 0..outer {
                let dst = o * s[*axis] * inner + start * inner;
                g[dst..dst + width].copy_from_slice(&gout[o * width..(o + 1) * width]);
            }
            emit(*input, g);
        }
        Op::Reshape(a) => emit(*a, gout.to_vec()),
        Op::Transpose(a) => {
            let s = shp(*a);
            let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
            let batch = gout.len() / (r * c);
            let mut g = vec![0.0; gout.len()];
            for b in 0..batch {
                let o = b * r * c;
                for i in 0..r {
                    for j in 0..c {
                        g[o + i * c + j] = gout[o + j * r + i];
                    }
                }
            }
            emit(*a, g);
        }
        Op::Tanh(a) => emit(*a, gout.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect()),
        Op::Sigmoid(a) => emit(*a, gout.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()),
        Op::Relu(a) => emit(
            *a,
            gout.iter()
                .zip(val(*a))
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect(),
        ),
        Op::Exp(a) => emit(*a, gout.iter().zip(y).map(|(g, y)| g * y).collect()),
        Op::Log(a) => emit(*a, gout.iter().zip(val(*a)).map(|(g, x)| g / x).collect()),
        Op::Clamp(a, lo, hi) => emit(
            *a,
            gout.iter()
                .zip(val(*a))
                .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                .collect(),
        ),
        Op::Softmax(a) => {
            let cols = *node.value.shape().last().unwrap_or(&1);
            let mut g = vec![0.0; y.len()];
            for ((yr, gr), dst) in y.chunks(cols).zip(gout.chunks(cols)).zip(g.chunks_mut(cols)) {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for ((d, y), g) in dst.iter_mut().zip(yr).zip(gr) {
                    *d = y * (g - dot);
                }
            }
            emit(*a, g);
        }
        Op::Sum(a) => emit(*a, vec![gout[0]; val(*a).len()]),
        Op::Mean(a) => {
            let n = val(*a).len();
            emit(*a, vec![gout[0] / n as f64; n]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_2x2() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::new();
        let a = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let s = g.softmax(a);
        for &v in g.data(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_axis0() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[1], &[3.0]));
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.data(c), &[1.0, 2.0, 3.0]);
        assert_eq!(g.shape(c), &[3]);
    }

    #[test]
    fn concat_last_axis_interleaves_rows() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.data(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0).with_requires_grad(true));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn tanh_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[4]).with_requires_grad(true));
        let y = g.tanh(x);
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        assert!(err.to_string().contains("[2, 3]"));
        let c = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(a, c), Err(AutodiffError::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn log_domain_error() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.log(a), Err(AutodiffError::Domain { op: "log", .. })));
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeat() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2]).with_requires_grad(true));
        assert!(matches!(g.backward(x), Err(AutodiffError::NonScalarLoss(_))));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.backward(l), Err(AutodiffError::BackwardTwice));
        g.reset();
        let x = g.input(Tensor::zeros(&[2]).with_requires_grad(true));
        let l = g.sum(x);
        assert!(g.backward(l).is_ok());
    }

    #[test]
    fn bias_broadcast_over_batch() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_requires_grad(true));
        let b = g.input(t(&[2], &[10.0, 20.0]).with_requires_grad(true));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.data(y), &[11.0, 22.0, 13.0, 24.0]);
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::scalar(2.0)).unwrap();
        store.insert("unused", Tensor::zeros(&[3])).unwrap();
        let mut g = Graph::new();
        let w1 = g.param(&store, "w").unwrap();
        let w2 = g.param(&store, "w").unwrap();
        assert_eq!(w1, w2);
        let y = g.mul(w1, w2).unwrap();
        let z = g.add(y, w1).unwrap();
        g.backward_into(z, &mut store).unwrap();
        assert_eq!(store.get("w").unwrap().grad().unwrap(), &[5.0]);
        assert_eq!(store.get("unused").unwrap().grad().unwrap(), &[0.0; 3]);
    }

    #[test]
    fn detached_branch_gets_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(2.0).with_requires_grad(true));
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
        assert!(g.grad(d).is_none());
    }

    #[test]
    fn injected_fault_scales_gradient() {
        let mut g = Graph::new();
        g.inject_fault(OpKind::Tanh, 2.0);
        let x = g.input(Tensor::zeros(&[1]).with_requires_grad(true));
        let y = g.tanh(x);
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }
}
