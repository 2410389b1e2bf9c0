//! Dynamic reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already a topological order and
//! [`Graph::backward`] simply walks it in reverse.
//!
//! [`Graph::stop_gradient`] produces a node that shares its input's value
//! but never forwards gradient to it.

use crate::error::{dim, Error, Result};
use crate::tensor::{dot, matmul_into, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operation kinds, with their attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    /// `a · bᵀ`
    MatMulNT,
    /// `x · W + b`, with `b` a `[1, out]` row broadcast over rows.
    Linear,
    Add,
    Sub,
    Mul,
    Div,
    Sigmoid,
    Tanh,
    Relu,
    /// Same function as [`OpKind::Relu`]; kept as its own kind for the
    /// hinge in the contrastive objective.
    MaxWithZero,
    Exp,
    Abs,
    Sqrt,
    SoftmaxRows,
    ConcatFeatures,
    L1NormRows,
    SqL2NormRows,
    RowDot,
    MeanAll,
    SumAll,
    Scale(f64),
    AddScalar(f64),
    GatherRows(Vec<usize>),
    Transpose,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary(OpKind, Var),
    Binary(OpKind, Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Concat(Vec<Var>),
    Stop(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// Whether any gradient can reach this node from a tracked leaf.
    tracked: bool,
    stop_grad: bool,
}

/// A dynamic tape of differentiable nodes.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    stops: Vec<Var>,
    frozen: Option<Vec<Tensor>>,
}

/// Result of a backward pass: one optional gradient per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient slot of `v`, or `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, materialized as zeros when nothing reached it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(dim(op, format!("expected a matrix, got shape {:?}", t.shape())))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// A graph in which the `i`-th `stop_gradient` call yields `values[i]`
    /// instead of its input's value. Finite-difference checks use this to
    /// evaluate the same surrogate objective that backward differentiates.
    pub fn with_frozen_stops(values: Vec<Tensor>) -> Self {
        Graph { frozen: Some(values), ..Graph::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked, stop_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_stopped(&self, v: Var) -> bool {
        self.nodes[v.0].stop_grad
    }

    /// First node (in evaluation order) holding a non-finite value, with
    /// the name of the op that produced it.
    pub fn first_non_finite(&self) -> Option<(Var, String)> {
        self.nodes.iter().enumerate().find(|(_, n)| !n.value.is_finite()).map(|(i, n)| {
            let name = match &n.op {
                Op::Leaf => "leaf".to_string(),
                Op::Unary(k, _) | Op::Binary(k, _, _) => format!("{k:?}"),
                Op::Linear { .. } => "Linear".to_string(),
                Op::Concat(_) => "ConcatFeatures".to_string(),
                Op::Stop(x) => format!("StopGradient of node {}", x.0),
            };
            (Var(i), name)
        })
    }

    /// Values of every stop-gradient node, in creation order.
    pub fn stop_values(&self) -> Vec<Tensor> {
        self.stops.iter().map(|v| self.nodes[v.0].value.clone()).collect()
    }

    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let k = self.stops.len();
        let value = match &self.frozen {
            Some(vals) if k < vals.len() => vals[k].clone(),
            _ => self.nodes[x.0].value.clone(),
        };
        self.nodes.push(Node { value, op: Op::Stop(x), tracked: false, stop_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.stops.push(v);
        v
    }

    /// Generic entry point over [`OpKind`].
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::Contract(format!("{:?} takes {} inputs, got {}", kind, n, inputs.len())))
            }
        };
        match &kind {
            OpKind::ConcatFeatures => self.concat(inputs),
            OpKind::Linear => {
                arity(3)?;
                self.linear(inputs[0], inputs[1], inputs[2])
            }
            OpKind::MatMul
            | OpKind::MatMulNT
            | OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Div
            | OpKind::RowDot => {
                arity(2)?;
                self.binary(kind.clone(), inputs[0], inputs[1])
            }
            _ => {
                arity(1)?;
                self.unary(kind.clone(), inputs[0])
            }
        }
    }

    fn binary(&mut self, kind: OpKind, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = match kind {
            OpKind::MatMul => av.matmul(bv)?,
            OpKind::MatMulNT => av.matmul_nt(bv)?,
            OpKind::Add => {
                same_shape("add", av, bv)?;
                av.zip_map(bv, |x, y| x + y)
            }
            OpKind::Sub => {
                same_shape("sub", av, bv)?;
                av.zip_map(bv, |x, y| x - y)
            }
            OpKind::Mul => {
                same_shape("mul_elementwise", av, bv)?;
                av.zip_map(bv, |x, y| x * y)
            }
            OpKind::Div => {
                same_shape("div", av, bv)?;
                av.zip_map(bv, |x, y| x / y)
            }
            OpKind::RowDot => {
                same_shape("row_dot", av, bv)?;
                require_matrix("row_dot", av)?;
                let data = (0..av.rows()).map(|r| dot(av.row(r), bv.row(r))).collect();
                Tensor::matrix(av.rows(), 1, data)?
            }
            _ => unreachable!("not a binary op: {:?}", kind),
        };
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Binary(kind, a, b), tracked))
    }

    fn unary(&mut self, kind: OpKind, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let value = match &kind {
            OpKind::Sigmoid => xv.map(sigmoid),
            OpKind::Tanh => xv.map(f64::tanh),
            OpKind::Relu | OpKind::MaxWithZero => xv.map(|v| v.max(0.0)),
            OpKind::Exp => xv.map(f64::exp),
            OpKind::Abs => xv.map(f64::abs),
            OpKind::Sqrt => {
                if let Some(bad) = xv.data().iter().find(|v| **v < 0.0) {
                    return Err(Error::Domain { op: "sqrt", detail: format!("negative input {bad}") });
                }
                xv.map(f64::sqrt)
            }
            OpKind::Scale(s) => {
                let s = *s;
                xv.map(|v| v * s)
            }
            OpKind::AddScalar(s) => {
                let s = *s;
                xv.map(|v| v + s)
            }
            OpKind::SoftmaxRows => {
                require_matrix("softmax_rows", xv)?;
                if xv.cols() == 0 {
                    return Err(Error::Domain { op: "softmax_rows", detail: "empty row".into() });
                }
                softmax_rows(xv)
            }
            OpKind::L1NormRows => {
                require_matrix("l1_norm_rows", xv)?;
                let data = (0..xv.rows()).map(|r| xv.row(r).iter().map(|v| v.abs()).sum()).collect();
                Tensor::matrix(xv.rows(), 1, data)?
            }
            OpKind::SqL2NormRows => {
                require_matrix("sq_l2_norm_rows", xv)?;
                let data = (0..xv.rows()).map(|r| dot(xv.row(r), xv.row(r))).collect();
                Tensor::matrix(xv.rows(), 1, data)?
            }
            OpKind::MeanAll => {
                if xv.is_empty() {
                    return Err(Error::Domain { op: "mean_all", detail: "empty tensor".into() });
                }
                Tensor::scalar(xv.sum() / xv.len() as f64)
            }
            OpKind::SumAll => Tensor::scalar(xv.sum()),
            OpKind::GatherRows(idx) => {
                require_matrix("gather_rows", xv)?;
                let (r, c) = (xv.rows(), xv.cols());
                let mut data = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    if i >= r {
                        return Err(Error::Contract(format!("gather index {i} out of range for {r} rows")));
                    }
                    data.extend_from_slice(xv.row(i));
                }
                Tensor::matrix(idx.len(), c, data)?
            }
            OpKind::Transpose => {
                require_matrix("transpose", xv)?;
                xv.transpose()
            }
            other => unreachable!("not a unary op: {:?}", other),
        };
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::Unary(kind, x), tracked))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::MatMul, a, b)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::MatMulNT, a, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Div, a, b)
    }

    /// Per-row inner product, `[r, c] × [r, c] -> [r, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::RowDot, a, b)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        if bv.len() != wv.cols() {
            return Err(dim("linear", format!("bias {:?} for weight {:?}", bv.shape(), wv.shape())));
        }
        let mut value = xv.matmul(wv).map_err(|_| dim("linear", format!("{:?} x {:?}", xv.shape(), wv.shape())))?;
        let n = value.cols();
        let bias = bv.data();
        for row in value.data_mut().chunks_mut(n.max(1)) {
            for (o, b) in row.iter_mut().zip(bias) {
                *o += b;
            }
        }
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        Ok(self.push(value, Op::Linear { x, w, b }, tracked))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(OpKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(OpKind::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(OpKind::Relu, x)
    }

    pub fn max_with_zero(&mut self, x: Var) -> Result<Var> {
        self.unary(OpKind::MaxWithZero, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(OpKind::Exp, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(OpKind::Abs, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(OpKind::Sqrt, x)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.unary(OpKind::SoftmaxRows, x)
    }

    pub fn l1_norm_rows(&mut self, x: Var) -> Result<Var> {
        self.unary(OpKind::L1NormRows, x)
    }

    pub fn sq_l2_norm_rows(&mut self, x: Var) -> Result<Var> {
        self.unary(OpKind::SqL2NormRows, x)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        self.unary(OpKind::MeanAll, x)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.unary(OpKind::SumAll, x)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(OpKind::Scale(s), x)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(OpKind::AddScalar(s), x)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.unary(OpKind::GatherRows(idx.to_vec()), x)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.unary(OpKind::Transpose, x)
    }

    /// Column concatenation of matrices sharing a row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| dim("concat_features", "no inputs"))?;
        let rows = self.nodes[first.0].value.rows();
        let mut cols = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            require_matrix("concat_features", v)?;
            if v.rows() != rows {
                return Err(dim("concat_features", format!("row counts {} vs {}", rows, v.rows())));
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let value = Tensor::matrix(rows, cols, data)?;
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(value, Op::Concat(parts.to_vec()), tracked))
    }

    /// Reverse-mode sweep from a scalar root. Gradient slots start at zero
    /// on every call; nothing is carried over between calls.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, contrib: Tensor| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf | Op::Stop(_) => {}
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                if self.tracked(x) {
                    send(x, g.matmul_nt(val(w)).expect("shape checked in forward"));
                }
                if self.tracked(w) {
                    send(w, val(x).matmul_tn(g).expect("shape checked in forward"));
                }
                if self.tracked(b) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for r in 0..g.rows() {
                        for (d, v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    send(b, Tensor::new(val(b).shape().to_vec(), db).expect("bias shape"));
                }
            }
            Op::Concat(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if self.tracked(p) {
                        let mut data = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            data.extend_from_slice(&g.row(r)[offset..offset + c]);
                        }
                        send(p, Tensor::matrix(rows, c, data).expect("concat shape"));
                    }
                    offset += c;
                }
            }
            Op::Binary(kind, a, b) => {
                let (a, b) = (*a, *b);
                let (av, bv) = (val(a), val(b));
                let (ta, tb) = (self.tracked(a), self.tracked(b));
                match kind {
                    OpKind::MatMul => {
                        if ta {
                            send(a, g.matmul_nt(bv).expect("shape"));
                        }
                        if tb {
                            send(b, av.matmul_tn(g).expect("shape"));
                        }
                    }
                    OpKind::MatMulNT => {
                        if ta {
                            let mut out = vec![0.0; av.len()];
                            matmul_into(g.data(), bv.data(), &mut out, g.rows(), g.cols(), bv.cols());
                            send(a, Tensor::new(av.shape().to_vec(), out).expect("shape"));
                        }
                        if tb {
                            send(b, g.matmul_tn(av).expect("shape"));
                        }
                    }
                    OpKind::Add => {
                        if ta {
                            send(a, g.clone());
                        }
                        if tb {
                            send(b, g.clone());
                        }
                    }
                    OpKind::Sub => {
                        if ta {
                            send(a, g.clone());
                        }
                        if tb {
                            send(b, g.map(|v| -v));
                        }
                    }
                    OpKind::Mul => {
                        if ta {
                            send(a, g.zip_map(bv, |x, y| x * y));
                        }
                        if tb {
                            send(b, g.zip_map(av, |x, y| x * y));
                        }
                    }
                    OpKind::Div => {
                        if ta {
                            send(a, g.zip_map(bv, |x, y| x / y));
                        }
                        if tb {
                            let data = g
                                .data()
                                .iter()
                                .zip(av.data().iter().zip(bv.data()))
                                .map(|(gv, (x, y))| -gv * x / (y * y))
                                .collect();
                            send(b, Tensor::new(bv.shape().to_vec(), data).expect("shape"));
                        }
                    }
                    OpKind::RowDot => {
                        let scale_rows = |t: &Tensor| {
                            let c = t.cols();
                            let mut out = t.clone();
                            for (r, chunk) in out.data_mut().chunks_mut(c.max(1)).enumerate() {
                                let s = g.data()[r];
                                chunk.iter_mut().for_each(|v| *v *= s);
                            }
                            out
                        };
                        if ta {
                            send(a, scale_rows(bv));
                        }
                        if tb {
                            send(b, scale_rows(av));
                        }
                    }
                    other => unreachable!("binary backward for {:?}", other),
                }
            }
            Op::Unary(kind, x) => {
                let x = *x;
                if !self.tracked(x) {
                    return;
                }
                let xv = val(x);
                let y = &node.value;
                let contrib = match kind {
                    OpKind::Sigmoid => g.zip_map(y, |gv, s| gv * s * (1.0 - s)),
                    OpKind::Tanh => g.zip_map(y, |gv, t| gv * (1.0 - t * t)),
                    OpKind::Relu | OpKind::MaxWithZero => {
                        g.zip_map(xv, |gv, v| if v > 0.0 { gv } else { 0.0 })
                    }
                    OpKind::Exp => g.zip_map(y, |gv, e| gv * e),
                    OpKind::Abs => g.zip_map(xv, |gv, v| gv * sign(v)),
                    OpKind::Sqrt => g.zip_map(y, |gv, s| if s > 0.0 { 0.5 * gv / s } else { 0.0 }),
                    OpKind::Scale(s) => g.map(|gv| gv * s),
                    OpKind::AddScalar(_) => g.clone(),
                    OpKind::SoftmaxRows => {
                        let c = y.cols();
                        let mut out = vec![0.0; y.len()];
                        for r in 0..y.rows() {
                            let (yr, gr) = (y.row(r), g.row(r));
                            let inner = dot(yr, gr);
                            for j in 0..c {
                                out[r * c + j] = yr[j] * (gr[j] - inner);
                            }
                        }
                        Tensor::new(y.shape().to_vec(), out).expect("shape")
                    }
                    OpKind::L1NormRows => row_broadcast(xv, g, sign),
                    OpKind::SqL2NormRows => row_broadcast(xv, g, |v| 2.0 * v),
                    OpKind::MeanAll => Tensor::full(xv.shape(), g.item() / xv.len() as f64),
                    OpKind::SumAll => Tensor::full(xv.shape(), g.item()),
                    OpKind::GatherRows(idx) => {
                        let mut out = Tensor::zeros(xv.shape());
                        let c = xv.cols();
                        for (k, &i) in idx.iter().enumerate() {
                            let src = g.row(k);
                            let dst = &mut out.data_mut()[i * c..(i + 1) * c];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        out
                    }
                    OpKind::Transpose => g.transpose(),
                    other => unreachable!("unary backward for {:?}", other),
                };
                send(x, contrib);
            }
        }
    }
}

/// `out[r, j] = g[r] * f(x[r, j])` for row-reduction adjoints.
fn row_broadcast(x: &Tensor, g: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let c = x.cols();
    let mut out = x.map(f);
    for (r, chunk) in out.data_mut().chunks_mut(c.max(1)).enumerate() {
        let s = g.data()[r];
        chunk.iter_mut().for_each(|v| *v *= s);
    }
    out
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c.max(1)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_row() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 4]));
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_empty_row_is_domain_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 0]));
        assert!(matches!(g.softmax_rows(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let m = g.constant(Tensor::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]));
        let y = g.matmul(i, m).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn row_norms() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[&[1.0, -2.0, 3.0]]));
        let b = g.constant(Tensor::from_rows(&[&[3.0, 4.0]]));
        let l1 = g.l1_norm_rows(a).unwrap();
        let l2 = g.sq_l2_norm_rows(b).unwrap();
        assert_eq!(g.value(l1).item(), 6.0);
        assert_eq!(g.value(l2).item(), 25.0);
    }

    #[test]
    fn matmul_shape_mismatch_names_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn mean_all_grad_is_uniform() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[&[1.0, 2.0, 3.0, 4.0]]));
        let m = g.mean_all(x).unwrap();
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.25; 4]);
    }

    #[test]
    fn sq_l2_grad_is_twice_x() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[&[3.0, 4.0]]));
        let n = g.sq_l2_norm_rows(x).unwrap();
        let grads = g.backward(n).unwrap();
        assert_eq!(grads.wrt(x).data(), &[6.0, 8.0]);
    }

    #[test]
    fn backward_needs_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn stop_gradient_blocks_everything() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[&[1.0, -2.0]]));
        let y = g.stop_gradient(x);
        assert_eq!(g.value(y), g.value(x));
        let m = g.mean_all(y).unwrap();
        let grads = g.backward(m).unwrap();
        assert!(grads.wrt(x).data().iter().all(|v| v.to_bits() == 0));
    }

    #[test]
    fn stop_gradient_freezes_one_factor() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let s = g.stop_gradient(x);
        let p = g.mul(x, s).unwrap();
        let m = g.mean_all(p).unwrap();
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2.0]);
    }

    #[test]
    fn frozen_stops_replace_values() {
        let mut g = Graph::with_frozen_stops(vec![Tensor::scalar(5.0)]);
        let x = g.param(Tensor::scalar(2.0));
        let s = g.stop_gradient(x);
        assert_eq!(g.value(s).item(), 5.0);
        let s2 = g.stop_gradient(x);
        assert_eq!(g.value(s2).item(), 2.0);
    }

    #[test]
    fn gradients_accumulate_across_paths() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.add(x, x).unwrap();
        let z = g.mul(y, x).unwrap(); // 2x^2
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.wrt(x).item(), 12.0);
    }
}
