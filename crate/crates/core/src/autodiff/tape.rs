//! Reverse-mode autodiff over dense `f64` arrays.
//!
//! A [`Tape`] is an append-only computation graph: every operation pushes a
//! node carrying its forward value and the ids of its parents. Parents always
//! precede children, so a single reverse sweep over the node vector is a valid
//! topological order for backpropagation. All arithmetic is 64-bit and the
//! graph replays bit-identically for identical inputs.

use ndarray::{ArrayD, Axis, IxDyn};

use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryKind {
    Neg,
    Abs,
    Square,
    Sqrt,
    Exp,
    Log,
    Sin,
    Cos,
    Sigmoid,
    /// `softplus(beta * x) / beta`, numerically stable for large `beta * x`.
    Softplus { beta: f64 },
    /// `max(x, c)`; at the kink the gradient flows to `x`.
    MaxConst { c: f64 },
    /// Gradient passes through where `lo <= x <= hi` (inclusive).
    Clamp { lo: f64, hi: f64 },
    Scale { c: f64 },
    AddConst { c: f64 },
}

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Bin { kind: BinKind, a: NodeId, b: NodeId },
    Unary { kind: UnaryKind, a: NodeId },
    Matmul { a: NodeId, b: NodeId },
    Sum { a: NodeId },
    Mean { a: NodeId },
    /// Row-wise dot product of two equal-shape matrices, output (n, 1).
    Dot { a: NodeId, b: NodeId },
    /// Row-wise L2 norm of a matrix, output (n, 1).
    NormLast { a: NodeId },
    Concat { parts: Vec<NodeId>, axis: usize },
    SliceCols { a: NodeId, start: usize, end: usize },
    SliceRows { a: NodeId, start: usize, end: usize },
    /// Repeat an (n, 1) column `k` times to (n, k).
    TileCol { a: NodeId, k: usize },
    Reshape { a: NodeId, from: Vec<usize> },
    /// Select rows by index, output (idx.len(), cols). Gradient scatter-adds.
    GatherRows { a: NodeId, idx: Vec<usize> },
}

#[derive(Debug, Clone)]
pub struct Node {
    pub data: ArrayD<f64>,
    pub op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward pass: `d(loss)/d(node)` for every node reachable
/// backward from the loss. Unreachable nodes are `None`.
pub struct GradTable {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl GradTable {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, or zeros of its shape when unreachable.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> ArrayD<f64> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

fn is_scalar(a: &ArrayD<f64>) -> bool {
    a.len() == 1
}

/// Row broadcast: `a` is (n, k) and `b` has exactly k elements (1-d or (1, k)).
fn row_broadcastable(a: &[usize], b_len: usize, b_shape: &[usize]) -> bool {
    a.len() == 2 && a[1] == b_len && (b_shape.len() == 1 || (b_shape.len() == 2 && b_shape[0] == 1))
}

/// Sum `grad` down to `shape` (inverse of scalar / row broadcast).
fn reduce_grad(grad: ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    if grad.shape() == shape {
        return grad;
    }
    let total: usize = shape.iter().product();
    if total == 1 {
        let s = grad.sum();
        return ArrayD::from_elem(IxDyn(shape), s);
    }
    // Row-broadcast case: grad (n, k) -> shape with k elements.
    let summed = grad.sum_axis(Axis(0));
    summed.into_shape_with_order(IxDyn(shape)).expect("reduce_grad shape")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].data.shape()
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].data.len(), 1);
        self.nodes[id].data.iter().next().copied().unwrap()
    }

    fn push(&mut self, data: ArrayD<f64>, op: Op) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { data, op });
        id
    }

    pub fn leaf(&mut self, data: ArrayD<f64>) -> NodeId {
        self.push(data, Op::Leaf)
    }

    pub fn leaf_scalar(&mut self, v: f64) -> NodeId {
        self.leaf(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    pub fn leaf_mat(&mut self, data: ndarray::Array2<f64>) -> NodeId {
        self.leaf(data.into_dyn())
    }

    fn bin_forward(
        &self,
        kind: BinKind,
        a: NodeId,
        b: NodeId,
    ) -> Result<ArrayD<f64>> {
        let (x, y) = (&self.nodes[a].data, &self.nodes[b].data);
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        };
        let apply = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        if x.shape() == y.shape() {
            let mut out = x.clone();
            out.zip_mut_with(y, |o, &v| *o = apply(*o, v));
            Ok(out)
        } else if is_scalar(y) {
            let s = y.iter().next().copied().unwrap();
            Ok(x.mapv(|v| apply(v, s)))
        } else if is_scalar(x) {
            let s = x.iter().next().copied().unwrap();
            Ok(y.mapv(|v| apply(s, v)))
        } else if row_broadcastable(x.shape(), y.len(), y.shape()) {
            let yk = y.view().into_shape_with_order(IxDyn(&[y.len()])).unwrap();
            let mut out = x.clone();
            for mut row in out.axis_iter_mut(Axis(0)) {
                row.zip_mut_with(&yk, |o, &v| *o = apply(*o, v));
            }
            Ok(out)
        } else if row_broadcastable(y.shape(), x.len(), x.shape()) {
            let xk = x.view().into_shape_with_order(IxDyn(&[x.len()])).unwrap();
            let mut out = y.clone();
            for mut row in out.axis_iter_mut(Axis(0)) {
                row.zip_mut_with(&xk, |o, &v| *o = apply(v, *o));
            }
            Ok(out)
        } else {
            Err(Error::ShapeMismatch {
                op: name,
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            })
        }
    }

    fn bin(&mut self, kind: BinKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        let data = self.bin_forward(kind, a, b)?;
        Ok(self.push(data, Op::Bin { kind, a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.bin(BinKind::Add, a, b)
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.bin(BinKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.bin(BinKind::Mul, a, b)
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.bin(BinKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, a: NodeId) -> Result<NodeId> {
        let x = &self.nodes[a].data;
        let data = match kind {
            UnaryKind::Neg => x.mapv(|v| -v),
            UnaryKind::Abs => x.mapv(f64::abs),
            UnaryKind::Square => x.mapv(|v| v * v),
            UnaryKind::Sqrt => {
                if x.iter().any(|&v| v < 0.0) {
                    return Err(Error::Domain {
                        op: "sqrt",
                        detail: "negative input".into(),
                    });
                }
                x.mapv(f64::sqrt)
            }
            UnaryKind::Exp => x.mapv(f64::exp),
            UnaryKind::Log => {
                if x.iter().any(|&v| v <= 0.0) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: "non-positive input".into(),
                    });
                }
                x.mapv(f64::ln)
            }
            UnaryKind::Sin => x.mapv(f64::sin),
            UnaryKind::Cos => x.mapv(f64::cos),
            UnaryKind::Sigmoid => x.mapv(sigmoid),
            UnaryKind::Softplus { beta } => x.mapv(|v| softplus(v, beta)),
            UnaryKind::MaxConst { c } => x.mapv(|v| v.max(c)),
            UnaryKind::Clamp { lo, hi } => x.mapv(|v| v.clamp(lo, hi)),
            UnaryKind::Scale { c } => x.mapv(|v| v * c),
            UnaryKind::AddConst { c } => x.mapv(|v| v + c),
        };
        Ok(self.push(data, Op::Unary { kind, a }))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Neg, a).unwrap()
    }
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Abs, a).unwrap()
    }
    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Square, a).unwrap()
    }
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Sqrt, a)
    }
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Exp, a).unwrap()
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Log, a)
    }
    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Sin, a).unwrap()
    }
    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Cos, a).unwrap()
    }
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Sigmoid, a).unwrap()
    }
    pub fn softplus(&mut self, a: NodeId, beta: f64) -> NodeId {
        self.unary(UnaryKind::Softplus { beta }, a).unwrap()
    }
    pub fn max_const(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(UnaryKind::MaxConst { c }, a).unwrap()
    }
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(UnaryKind::Clamp { lo, hi }, a).unwrap()
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(UnaryKind::Scale { c }, a).unwrap()
    }
    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(UnaryKind::AddConst { c }, a).unwrap()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (&self.nodes[a].data, &self.nodes[b].data);
        if x.ndim() != 2 || y.ndim() != 2 || x.shape()[1] != y.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let xm = x.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let ym = y.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let data = xm.dot(&ym).into_dyn();
        Ok(self.push(data, Op::Matmul { a, b }))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a].data.sum();
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), Op::Sum { a })
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].data;
        let m = x.sum() / x.len() as f64;
        self.push(ArrayD::from_elem(IxDyn(&[1]), m), Op::Mean { a })
    }

    /// Row-wise dot product of two (n, k) matrices -> (n, 1).
    pub fn dot_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (&self.nodes[a].data, &self.nodes[b].data);
        if x.ndim() != 2 || x.shape() != y.shape() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let n = x.shape()[0];
        let mut out = ArrayD::zeros(IxDyn(&[n, 1]));
        for i in 0..n {
            let mut s = 0.0;
            for k in 0..x.shape()[1] {
                s += x[[i, k]] * y[[i, k]];
            }
            out[[i, 0]] = s;
        }
        Ok(self.push(out, Op::Dot { a, b }))
    }

    /// Row-wise L2 norm of an (n, k) matrix -> (n, 1).
    pub fn norm_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let x = &self.nodes[a].data;
        if x.ndim() != 2 {
            return Err(Error::ShapeMismatch {
                op: "norm_rows",
                lhs: x.shape().to_vec(),
                rhs: vec![],
            });
        }
        let n = x.shape()[0];
        let mut out = ArrayD::zeros(IxDyn(&[n, 1]));
        for i in 0..n {
            let mut s = 0.0;
            for k in 0..x.shape()[1] {
                s += x[[i, k]] * x[[i, k]];
            }
            out[[i, 0]] = s.sqrt();
        }
        Ok(self.push(out, Op::NormLast { a }))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero parts".into()));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].data.view()).collect();
        let data = ndarray::concatenate(Axis(axis), &views).map_err(|_| Error::ShapeMismatch {
            op: "concat",
            lhs: self.nodes[parts[0]].data.shape().to_vec(),
            rhs: self.nodes[*parts.last().unwrap()].data.shape().to_vec(),
        })?;
        Ok(self.push(
            data,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let x = &self.nodes[a].data;
        if x.ndim() != 2 || end > x.shape()[1] || start >= end {
            return Err(Error::InvalidArgument(format!(
                "slice_cols {start}..{end} of shape {:?}",
                x.shape()
            )));
        }
        let data = x
            .slice_axis(Axis(1), ndarray::Slice::from(start..end))
            .to_owned();
        Ok(self.push(data, Op::SliceCols { a, start, end }))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let x = &self.nodes[a].data;
        if x.ndim() < 1 || end > x.shape()[0] || start >= end {
            return Err(Error::InvalidArgument(format!(
                "slice_rows {start}..{end} of shape {:?}",
                x.shape()
            )));
        }
        let data = x
            .slice_axis(Axis(0), ndarray::Slice::from(start..end))
            .to_owned();
        Ok(self.push(data, Op::SliceRows { a, start, end }))
    }

    /// Repeat an (n, 1) column `k` times -> (n, k).
    pub fn tile_col(&mut self, a: NodeId, k: usize) -> Result<NodeId> {
        let x = &self.nodes[a].data;
        if x.ndim() != 2 || x.shape()[1] != 1 {
            return Err(Error::ShapeMismatch {
                op: "tile_col",
                lhs: x.shape().to_vec(),
                rhs: vec![x.shape()[0], k],
            });
        }
        let n = x.shape()[0];
        let mut out = ArrayD::zeros(IxDyn(&[n, k]));
        for i in 0..n {
            let v = x[[i, 0]];
            for j in 0..k {
                out[[i, j]] = v;
            }
        }
        Ok(self.push(out, Op::TileCol { a, k }))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let x = &self.nodes[a].data;
        let from = x.shape().to_vec();
        if x.len() != shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: from,
                rhs: shape.to_vec(),
            });
        }
        let data = x
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        Ok(self.push(data, Op::Reshape { a, from }))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let x = &self.nodes[a].data;
        if x.ndim() != 2 {
            return Err(Error::InvalidArgument("gather_rows needs a matrix".into()));
        }
        let n = x.shape()[0];
        if idx.iter().any(|&i| i >= n) {
            return Err(Error::InvalidArgument("gather_rows index out of range".into()));
        }
        let k = x.shape()[1];
        let mut out = ArrayD::zeros(IxDyn(&[idx.len(), k]));
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..k {
                out[[r, c]] = x[[i, c]];
            }
        }
        Ok(self.push(
            out,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Backpropagate from a scalar loss node. Returns d(loss)/d(node) for
    /// every node reachable backward from the loss.
    pub fn backward(&self, loss: NodeId) -> Result<GradTable> {
        let ldata = &self.nodes[loss].data;
        if ldata.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: ldata.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(ArrayD::from_elem(ldata.raw_dim(), 1.0));

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].clone() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Bin { kind, a, b } => {
                    let (xa, xb) = (&self.nodes[*a].data, &self.nodes[*b].data);
                    let (ga, gb): (ArrayD<f64>, ArrayD<f64>) = match kind {
                        BinKind::Add => (g.clone(), g.clone()),
                        BinKind::Sub => (g.clone(), g.mapv(|v| -v)),
                        BinKind::Mul => {
                            let ga = self
                                .bin_forward_raw(BinKind::Mul, &g, xb)
                                .expect("mul grad");
                            let gb = self
                                .bin_forward_raw(BinKind::Mul, &g, xa)
                                .expect("mul grad");
                            (ga, gb)
                        }
                        BinKind::Div => {
                            // c = a / b: dc/da = 1/b, dc/db = -a/b^2
                            let ga = self
                                .bin_forward_raw(BinKind::Div, &g, xb)
                                .expect("div grad");
                            let aoverb2 = {
                                let b2 = xb.mapv(|v| v * v);
                                self.bin_forward_raw(BinKind::Div, xa, &b2)
                                    .expect("div grad")
                            };
                            let gb = self
                                .bin_forward_raw(BinKind::Mul, &g, &aoverb2)
                                .expect("div grad")
                                .mapv(|v| -v);
                            (ga, gb)
                        }
                    };
                    accumulate(&mut grads, *a, reduce_grad(ga, xa.shape()));
                    accumulate(&mut grads, *b, reduce_grad(gb, xb.shape()));
                }
                Op::Unary { kind, a } => {
                    let x = &self.nodes[*a].data;
                    let y = &self.nodes[id].data;
                    let mut ga = g.clone();
                    match kind {
                        UnaryKind::Neg => ga.mapv_inplace(|v| -v),
                        UnaryKind::Abs => ga.zip_mut_with(x, |o, &v| {
                            *o *= if v > 0.0 {
                                1.0
                            } else if v < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }),
                        UnaryKind::Square => ga.zip_mut_with(x, |o, &v| *o *= 2.0 * v),
                        UnaryKind::Sqrt => ga.zip_mut_with(y, |o, &s| {
                            *o *= 0.5 / s.max(1e-300);
                        }),
                        UnaryKind::Exp => ga.zip_mut_with(y, |o, &e| *o *= e),
                        UnaryKind::Log => ga.zip_mut_with(x, |o, &v| *o /= v),
                        UnaryKind::Sin => ga.zip_mut_with(x, |o, &v| *o *= v.cos()),
                        UnaryKind::Cos => ga.zip_mut_with(x, |o, &v| *o *= -v.sin()),
                        UnaryKind::Sigmoid => ga.zip_mut_with(y, |o, &s| *o *= s * (1.0 - s)),
                        UnaryKind::Softplus { beta } => {
                            ga.zip_mut_with(x, |o, &v| *o *= sigmoid(beta * v))
                        }
                        UnaryKind::MaxConst { c } => {
                            ga.zip_mut_with(x, |o, &v| *o *= if v >= *c { 1.0 } else { 0.0 })
                        }
                        UnaryKind::Clamp { lo, hi } => ga.zip_mut_with(x, |o, &v| {
                            *o *= if v >= *lo && v <= *hi { 1.0 } else { 0.0 }
                        }),
                        UnaryKind::Scale { c } => ga.mapv_inplace(|v| v * c),
                        UnaryKind::AddConst { .. } => {}
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Matmul { a, b } => {
                    let xa = self.nodes[*a]
                        .data
                        .view()
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    let xb = self.nodes[*b]
                        .data
                        .view()
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    let gm = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let ga = gm.dot(&xb.t()).into_dyn();
                    let gb = xa.t().dot(&gm).into_dyn();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Sum { a } => {
                    let s = g.iter().next().copied().unwrap();
                    let ga = ArrayD::from_elem(self.nodes[*a].data.raw_dim(), s);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Mean { a } => {
                    let n = self.nodes[*a].data.len() as f64;
                    let s = g.iter().next().copied().unwrap() / n;
                    let ga = ArrayD::from_elem(self.nodes[*a].data.raw_dim(), s);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Dot { a, b } => {
                    let (xa, xb) = (&self.nodes[*a].data, &self.nodes[*b].data);
                    let k = xa.shape()[1];
                    let mut ga = xb.clone();
                    let mut gb = xa.clone();
                    for i in 0..xa.shape()[0] {
                        let gi = g[[i, 0]];
                        for c in 0..k {
                            ga[[i, c]] *= gi;
                            gb[[i, c]] *= gi;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::NormLast { a } => {
                    let x = &self.nodes[*a].data;
                    let y = &self.nodes[id].data;
                    let mut ga = x.clone();
                    for i in 0..x.shape()[0] {
                        let n = y[[i, 0]];
                        let gi = g[[i, 0]];
                        let inv = if n > 1e-12 { gi / n } else { 0.0 };
                        for c in 0..x.shape()[1] {
                            ga[[i, c]] *= inv;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Concat { parts, axis } => {
                    let mut offset = 0usize;
                    for &p in parts {
                        let len = self.nodes[p].data.shape()[*axis];
                        let gp = g
                            .slice_axis(Axis(*axis), ndarray::Slice::from(offset..offset + len))
                            .to_owned();
                        accumulate(&mut grads, p, gp);
                        offset += len;
                    }
                }
                Op::SliceCols { a, start, end } => {
                    let x = &self.nodes[*a].data;
                    let mut ga = ArrayD::zeros(x.raw_dim());
                    for i in 0..x.shape()[0] {
                        for (j, c) in (*start..*end).enumerate() {
                            ga[[i, c]] = g[[i, j]];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceRows { a, start, end } => {
                    let x = &self.nodes[*a].data;
                    let mut ga = ArrayD::zeros(x.raw_dim());
                    let mut gslice =
                        ga.slice_axis_mut(Axis(0), ndarray::Slice::from(*start..*end));
                    gslice.assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::TileCol { a, k } => {
                    let n = self.nodes[*a].data.shape()[0];
                    let mut ga = ArrayD::zeros(IxDyn(&[n, 1]));
                    for i in 0..n {
                        let mut s = 0.0;
                        for j in 0..*k {
                            s += g[[i, j]];
                        }
                        ga[[i, 0]] = s;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Reshape { a, from } => {
                    let ga = g
                        .clone()
                        .into_shape_with_order(IxDyn(from))
                        .expect("reshape grad");
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows { a, idx } => {
                    let x = &self.nodes[*a].data;
                    let mut ga = ArrayD::zeros(x.raw_dim());
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..x.shape()[1] {
                            ga[[i, c]] += g[[r, c]];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        Ok(GradTable { grads })
    }

    fn bin_forward_raw(
        &self,
        kind: BinKind,
        x: &ArrayD<f64>,
        y: &ArrayD<f64>,
    ) -> Result<ArrayD<f64>> {
        // Same broadcast rules as bin_forward, on raw arrays.
        let apply = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        if x.shape() == y.shape() {
            let mut out = x.clone();
            out.zip_mut_with(y, |o, &v| *o = apply(*o, v));
            Ok(out)
        } else if is_scalar(y) {
            let s = y.iter().next().copied().unwrap();
            Ok(x.mapv(|v| apply(v, s)))
        } else if is_scalar(x) {
            let s = x.iter().next().copied().unwrap();
            Ok(y.mapv(|v| apply(s, v)))
        } else if row_broadcastable(x.shape(), y.len(), y.shape()) {
            let yk = y.view().into_shape_with_order(IxDyn(&[y.len()])).unwrap();
            let mut out = x.clone();
            for mut row in out.axis_iter_mut(Axis(0)) {
                row.zip_mut_with(&yk, |o, &v| *o = apply(*o, v));
            }
            Ok(out)
        } else if row_broadcastable(y.shape(), x.len(), x.shape()) {
            let xk = x.view().into_shape_with_order(IxDyn(&[x.len()])).unwrap();
            let mut out = y.clone();
            for mut row in out.axis_iter_mut(Axis(0)) {
                row.zip_mut_with(&xk, |o, &v| *o = apply(v, *o));
            }
            Ok(out)
        } else {
            Err(Error::ShapeMismatch {
                op: "bin",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            })
        }
    }
}

fn accumulate(grads: &mut [Option<ArrayD<f64>>], id: NodeId, g: ArrayD<f64>) {
    match &mut grads[id] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64, beta: f64) -> f64 {
    let bx = beta * x;
    if bx > 30.0 {
        x
    } else {
        bx.exp().ln_1p() / beta
    }
}
