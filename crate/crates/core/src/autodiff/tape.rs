//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every primitive evaluates eagerly, checks its output for non-finite
//! values, and appends a node to the tape. Node ids are assigned in
//! evaluation order, so the tape is topologically sorted by construction
//! and [`Tape::backward`] only has to walk it in reverse.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use super::tensor::{dot, norm, Tensor};
use crate::error::{Error, Result, Shape};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> Shape {
        Shape(self.rows, self.cols)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    Row,
    Col,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    RowSoftmax(usize),
    Log(usize),
    Exp(usize),
    Mean(usize),
    Sum(usize),
    RowSums(usize),
    L2NormalizeRows(usize, Vec<f64>),
    SelectRows(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    ConcatCols(usize, usize),
    RowMax(usize, Vec<usize>),
    Reshape(usize),
    SmoothL1(usize, usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Gradients of a scalar loss with respect to the leaves of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
    shapes: HashMap<usize, Shape>,
}

impl Gradients {
    /// Gradient for `var`; zeros for a leaf the loss never touched.
    pub fn get(&self, var: Var) -> Tensor {
        match self.grads.get(&var.id) {
            Some(g) => g.clone(),
            None => {
                let Shape(r, c) = self.shapes.get(&var.id).copied().unwrap_or(var.shape());
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn contains(&self, var: Var) -> bool {
        self.grads.contains_key(&var.id)
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let var = Var {
            id: nodes.len(),
            rows: value.rows(),
            cols: value.cols(),
        };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        var
    }

    fn record(&self, op_name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        check_finite(op_name, &value)?;
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push(value, op, requires_grad))
    }

    /// Registers an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Result<Var> {
        check_finite("leaf", &value)?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> Tensor {
        self.nodes.borrow()[var.id].value.clone()
    }

    pub fn with_value<T>(&self, var: Var, f: impl FnOnce(&Tensor) -> T) -> T {
        f(&self.nodes.borrow()[var.id].value)
    }

    pub fn scalar_value(&self, var: Var) -> f64 {
        self.with_value(var, |t| t.data()[0])
    }

    fn broadcast_kind(op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        if a.shape() == b.shape() {
            Ok(Broadcast::None)
        } else if b.rows == 1 && b.cols == a.cols {
            Ok(Broadcast::Row)
        } else if b.cols == 1 && b.rows == a.rows {
            Ok(Broadcast::Col)
        } else {
            Err(Error::Shape {
                op,
                left: a.shape(),
                right: b.shape(),
            })
        }
    }

    fn elementwise(&self, a: Var, b: Var, kind: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.id].value, &nodes[b.id].value);
        let mut out = Tensor::zeros(a.rows, a.cols);
        for r in 0..a.rows {
            for c in 0..a.cols {
                let bx = match kind {
                    Broadcast::None => bv.get(r, c),
                    Broadcast::Row => bv.get(0, c),
                    Broadcast::Col => bv.get(r, 0),
                };
                out.set(r, c, f(av.get(r, c), bx));
            }
        }
        out
    }

    /// `a + b`; `b` may also be a row vector or a column vector.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let kind = Self::broadcast_kind("add", a, b)?;
        let out = self.elementwise(a, b, kind, |x, y| x + y);
        self.record("add", out, Op::Add(a.id, b.id, kind), &[a.id, b.id])
    }

    /// `a - b`; `b` may also be a row vector or a column vector.
    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let kind = Self::broadcast_kind("sub", a, b)?;
        let out = self.elementwise(a, b, kind, |x, y| x - y);
        self.record("sub", out, Op::Sub(a.id, b.id, kind), &[a.id, b.id])
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(Error::Shape {
                op: "mul",
                left: a.shape(),
                right: b.shape(),
            });
        }
        let out = self.elementwise(a, b, Broadcast::None, |x, y| x * y);
        self.record("mul", out, Op::Mul(a.id, b.id), &[a.id, b.id])
    }

    pub fn scale(&self, a: Var, s: f64) -> Result<Var> {
        let out = self.with_value(a, |t| t.map(|v| v * s));
        self.record("scale", out, Op::Scale(a.id, s), &[a.id])
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: a.shape(),
                right: b.shape(),
            });
        }
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.id].value.matmul_raw(&nodes[b.id].value)
        };
        self.record("matmul", out, Op::MatMul(a.id, b.id), &[a.id, b.id])
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = self.with_value(a, Tensor::transpose);
        self.record("transpose", out, Op::Transpose(a.id), &[a.id])
    }

    /// `a * b^T`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.cols {
            return Err(Error::Shape {
                op: "matmul_nt",
                left: a.shape(),
                right: b.shape(),
            });
        }
        let bt = self.transpose(b)?;
        self.matmul(a, bt)
    }

    pub fn row_softmax(&self, a: Var) -> Result<Var> {
        let out = self.with_value(a, |t| {
            let mut out = t.clone();
            for r in 0..t.rows() {
                softmax_in_place(out.row_slice_mut(r), None);
            }
            out
        });
        self.record("row_softmax", out, Op::RowSoftmax(a.id), &[a.id])
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        let out = self.with_value(a, |t| t.map(f64::ln));
        self.record("log", out, Op::Log(a.id), &[a.id])
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        let out = self.with_value(a, |t| t.map(f64::exp));
        self.record("exp", out, Op::Exp(a.id), &[a.id])
    }

    /// Mean over all entries, as a 1x1 tensor.
    pub fn mean(&self, a: Var) -> Result<Var> {
        if a.rows * a.cols == 0 {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let out = self.with_value(a, |t| {
            Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
        });
        self.record("mean", out, Op::Mean(a.id), &[a.id])
    }

    /// Sum over all entries, as a 1x1 tensor.
    pub fn sum(&self, a: Var) -> Result<Var> {
        let out = self.with_value(a, |t| Tensor::scalar(t.data().iter().sum()));
        self.record("sum", out, Op::Sum(a.id), &[a.id])
    }

    /// Per-row sums as a column vector.
    pub fn row_sums(&self, a: Var) -> Result<Var> {
        let out = self.with_value(a, |t| {
            let sums: Vec<f64> = (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect();
            Tensor::column(&sums)
        });
        self.record("row_sums", out, Op::RowSums(a.id), &[a.id])
    }

    /// Per-row dot products of two equally shaped matrices, as a column vector.
    pub fn row_dot(&self, a: Var, b: Var) -> Result<Var> {
        let prod = self.mul(a, b)?;
        self.row_sums(prod)
    }

    pub fn l2_normalize_rows(&self, a: Var) -> Result<Var> {
        let (out, norms) = self.with_value(a, |t| {
            let mut out = t.clone();
            let mut norms = Vec::with_capacity(t.rows());
            for r in 0..t.rows() {
                let n = norm(t.row_slice(r));
                norms.push(n);
                for v in out.row_slice_mut(r) {
                    *v /= n;
                }
            }
            (out, norms)
        });
        self.record("l2_normalize_rows", out, Op::L2NormalizeRows(a.id, norms), &[a.id])
    }

    /// Cosine similarities between every row of `a` and every row of `b`.
    pub fn cosine_similarity_matrix(&self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.cols {
            return Err(Error::Shape {
                op: "cosine_similarity_matrix",
                left: a.shape(),
                right: b.shape(),
            });
        }
        let an = self.l2_normalize_rows(a)?;
        let bn = if a == b { an } else { self.l2_normalize_rows(b)? };
        self.matmul_nt(an, bn)
    }

    pub fn select_rows(&self, a: Var, indices: &[usize]) -> Result<Var> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= a.rows) {
            return Err(Error::Shape {
                op: "select_rows",
                left: a.shape(),
                right: Shape(bad, a.cols),
            });
        }
        let out = self.with_value(a, |t| {
            let mut out = Tensor::zeros(indices.len(), t.cols());
            for (o, &i) in indices.iter().enumerate() {
                out.row_slice_mut(o).copy_from_slice(t.row_slice(i));
            }
            out
        });
        self.record("select_rows", out, Op::SelectRows(a.id, indices.to_vec()), &[a.id])
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|p| p.cols)
            .ok_or_else(|| Error::contract("concat_rows of zero parts"))?;
        if let Some(bad) = parts.iter().find(|p| p.cols != cols) {
            return Err(Error::Shape {
                op: "concat_rows",
                left: parts[0].shape(),
                right: bad.shape(),
            });
        }
        let out = {
            let nodes = self.nodes.borrow();
            let mut data = Vec::new();
            for p in parts {
                data.extend_from_slice(nodes[p.id].value.data());
            }
            let rows = parts.iter().map(|p| p.rows).sum();
            Tensor::new(rows, cols, data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.record("concat_rows", out, Op::ConcatRows(ids.clone()), &ids)
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var> {
        if a.rows != b.rows {
            return Err(Error::Shape {
                op: "concat_cols",
                left: a.shape(),
                right: b.shape(),
            });
        }
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.id].value, &nodes[b.id].value);
            let mut out = Tensor::zeros(a.rows, a.cols + b.cols);
            for r in 0..a.rows {
                let row = out.row_slice_mut(r);
                row[..a.cols].copy_from_slice(av.row_slice(r));
                row[a.cols..].copy_from_slice(bv.row_slice(r));
            }
            out
        };
        self.record("concat_cols", out, Op::ConcatCols(a.id, b.id), &[a.id, b.id])
    }

    /// Row maxima as a column vector; ties resolve to the first column.
    pub fn row_max(&self, a: Var) -> Result<Var> {
        if a.cols == 0 {
            return Err(Error::contract("row_max over zero columns"));
        }
        let (out, arg) = self.with_value(a, |t| {
            let mut vals = Vec::with_capacity(t.rows());
            let mut arg = Vec::with_capacity(t.rows());
            for r in 0..t.rows() {
                let (i, v) = argmax(t.row_slice(r));
                vals.push(v);
                arg.push(i);
            }
            (Tensor::column(&vals), arg)
        });
        self.record("row_max", out, Op::RowMax(a.id, arg), &[a.id])
    }

    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        if rows * cols != a.rows * a.cols {
            return Err(Error::Shape {
                op: "reshape",
                left: a.shape(),
                right: Shape(rows, cols),
            });
        }
        let out = self.with_value(a, |t| Tensor::new(rows, cols, t.data().to_vec()))?;
        self.record("reshape", out, Op::Reshape(a.id), &[a.id])
    }

    /// Mean smooth-L1 (transition at 1.0) over all entries of `pred - target`.
    pub fn smooth_l1(&self, pred: Var, target: Var) -> Result<Var> {
        if pred.shape() != target.shape() {
            return Err(Error::Shape {
                op: "smooth_l1",
                left: pred.shape(),
                right: target.shape(),
            });
        }
        if pred.rows * pred.cols == 0 {
            return Err(Error::contract("smooth_l1 of empty tensors"));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let (p, t) = (&nodes[pred.id].value, &nodes[target.id].value);
            let total: f64 = p
                .data()
                .iter()
                .zip(t.data())
                .map(|(a, b)| {
                    let d = (a - b).abs();
                    if d < 1.0 {
                        0.5 * d * d
                    } else {
                        d - 0.5
                    }
                })
                .sum();
            Tensor::scalar(total / p.len() as f64)
        };
        self.record("smooth_l1", out, Op::SmoothL1(pred.id, target.id), &[pred.id, target.id])
    }

    /// Mean softmax cross-entropy of each row of `logits` against its target column.
    pub fn cross_entropy_with_logits(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.masked_cross_entropy_with_logits(logits, targets, None)
    }

    /// Cross-entropy where `mask[r * cols + c] == false` removes column `c` of row `r`
    /// from the softmax (treated as a logit of negative infinity).
    pub fn masked_cross_entropy_with_logits(
        &self,
        logits: Var,
        targets: &[usize],
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        if targets.len() != logits.rows || logits.rows == 0 {
            return Err(Error::Shape {
                op: "cross_entropy_with_logits",
                left: logits.shape(),
                right: Shape(targets.len(), 1),
            });
        }
        if let Some(m) = mask {
            if m.len() != logits.rows * logits.cols {
                return Err(Error::Shape {
                    op: "cross_entropy_with_logits",
                    left: logits.shape(),
                    right: Shape(m.len(), 1),
                });
            }
        }
        let (loss, probs) = self.with_value(logits, |t| -> Result<(f64, Tensor)> {
            let cols = t.cols();
            let mut probs = t.clone();
            let mut total = 0.0;
            for (r, &target) in targets.iter().enumerate() {
                if target >= cols {
                    return Err(Error::contract(format!("target {target} out of range for {cols} columns")));
                }
                let row_mask = mask.map(|m| &m[r * cols..(r + 1) * cols]);
                if row_mask.is_some_and(|m| !m[target]) {
                    return Err(Error::contract(format!("target column {target} of row {r} is masked")));
                }
                let lse = softmax_in_place(probs.row_slice_mut(r), row_mask);
                total += lse - t.get(r, target);
            }
            Ok((total / targets.len() as f64, probs))
        })?;
        self.record(
            "cross_entropy_with_logits",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.id,
                targets: targets.to_vec(),
                probs,
            },
            &[logits.id],
        )
    }

    /// Reverse sweep from a scalar `loss`. A tape can be differentiated once.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.consumed.get() {
            return Err(Error::contract("tape already consumed by a previous backward pass"));
        }
        if loss.shape() != Shape(1, 1) {
            return Err(Error::contract(format!("backward requires a scalar loss, got {}", loss.shape())));
        }
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let mut acc = |target: usize, delta: Tensor| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => existing.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            let out = &node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
                    let sign = if matches!(node.op, Op::Add(..)) { 1.0 } else { -1.0 };
                    let gb = reduce_broadcast(&g, *kind).map(|v| v * sign);
                    acc(*a, g);
                    acc(*b, gb);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let ga = zip_map(&g, bv, |x, y| x * y);
                    let gb = zip_map(&g, av, |x, y| x * y);
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Scale(a, s) => acc(*a, g.map(|v| v * s)),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].requires_grad {
                        acc(*a, g.matmul_nt_raw(bv));
                    }
                    if nodes[*b].requires_grad {
                        acc(*b, av.transpose().matmul_raw(&g));
                    }
                }
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::RowSoftmax(a) => {
                    let mut dx = g.clone();
                    for r in 0..out.rows() {
                        let y = out.row_slice(r);
                        let gy = dot(g.row_slice(r), y);
                        for (d, &yv) in dx.row_slice_mut(r).iter_mut().zip(y) {
                            *d = yv * (*d - gy);
                        }
                    }
                    acc(*a, dx);
                }
                Op::Log(a) => acc(*a, zip_map(&g, &nodes[*a].value, |x, y| x / y)),
                Op::Exp(a) => acc(*a, zip_map(&g, out, |x, y| x * y)),
                Op::Mean(a) => {
                    let n = nodes[*a].value.len() as f64;
                    let input = &nodes[*a].value;
                    acc(*a, Tensor::filled(input.rows(), input.cols(), g.item() / n));
                }
                Op::Sum(a) => {
                    let input = &nodes[*a].value;
                    acc(*a, Tensor::filled(input.rows(), input.cols(), g.item()));
                }
                Op::RowSums(a) => {
                    let input = &nodes[*a].value;
                    let mut dx = Tensor::zeros(input.rows(), input.cols());
                    for r in 0..input.rows() {
                        let gr = g.get(r, 0);
                        dx.row_slice_mut(r).iter_mut().for_each(|v| *v = gr);
                    }
                    acc(*a, dx);
                }
                Op::L2NormalizeRows(a, norms) => {
                    let mut dx = g.clone();
                    for (r, &n) in norms.iter().enumerate() {
                        let y = out.row_slice(r);
                        let gy = dot(g.row_slice(r), y);
                        for (d, &yv) in dx.row_slice_mut(r).iter_mut().zip(y) {
                            *d = (*d - yv * gy) / n;
                        }
                    }
                    acc(*a, dx);
                }
                Op::SelectRows(a, indices) => {
                    let input = &nodes[*a].value;
                    let mut dx = Tensor::zeros(input.rows(), input.cols());
                    for (o, &i) in indices.iter().enumerate() {
                        for (d, &gv) in dx.row_slice_mut(i).iter_mut().zip(g.row_slice(o)) {
                            *d += gv;
                        }
                    }
                    acc(*a, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = &nodes[p].value;
                        let len = pv.len();
                        let slice = g.data()[offset..offset + len].to_vec();
                        offset += len;
                        acc(p, Tensor::new(pv.rows(), pv.cols(), slice).expect("shape recorded at forward"));
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ac = nodes[*a].value.cols();
                    let bc = nodes[*b].value.cols();
                    let mut ga = Tensor::zeros(g.rows(), ac);
                    let mut gb = Tensor::zeros(g.rows(), bc);
                    for r in 0..g.rows() {
                        ga.row_slice_mut(r).copy_from_slice(&g.row_slice(r)[..ac]);
                        gb.row_slice_mut(r).copy_from_slice(&g.row_slice(r)[ac..]);
                    }
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::RowMax(a, arg) => {
                    let input = &nodes[*a].value;
                    let mut dx = Tensor::zeros(input.rows(), input.cols());
                    for (r, &c) in arg.iter().enumerate() {
                        dx.set(r, c, g.get(r, 0));
                    }
                    acc(*a, dx);
                }
                Op::Reshape(a) => {
                    let input = &nodes[*a].value;
                    acc(*a, Tensor::new(input.rows(), input.cols(), g.into_data()).expect("same length"));
                }
                Op::SmoothL1(p, t) => {
                    let (pv, tv) = (&nodes[*p].value, &nodes[*t].value);
                    let scale = g.item() / pv.len() as f64;
                    let dp = zip_map(pv, tv, |a, b| {
                        let d = a - b;
                        scale * if d.abs() < 1.0 { d } else { d.signum() }
                    });
                    let dt = dp.map(|v| -v);
                    acc(*p, dp);
                    acc(*t, dt);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let scale = g.item() / targets.len() as f64;
                    let mut dx = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let v = dx.get(r, t);
                        dx.set(r, t, v - 1.0);
                    }
                    acc(*logits, dx.map(|v| v * scale));
                }
            }
        }

        let mut out = HashMap::new();
        let mut shapes = HashMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                shapes.insert(id, node.value.shape());
                if let Some(Some(g)) = grads.get_mut(id).map(Option::take) {
                    out.insert(id, g);
                }
            }
        }
        Ok(Gradients { grads: out, shapes })
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("matching shapes")
}

fn reduce_broadcast(g: &Tensor, kind: Broadcast) -> Tensor {
    match kind {
        Broadcast::None => g.clone(),
        Broadcast::Row => {
            let mut out = Tensor::zeros(1, g.cols());
            for r in 0..g.rows() {
                for (o, &v) in out.data_mut().iter_mut().zip(g.row_slice(r)) {
                    *o += v;
                }
            }
            out
        }
        Broadcast::Col => {
            let sums: Vec<f64> = (0..g.rows()).map(|r| g.row_slice(r).iter().sum()).collect();
            Tensor::column(&sums)
        }
    }
}

fn argmax(xs: &[f64]) -> (usize, f64) {
    let mut best = (0, xs[0]);
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Max-shifted softmax over the unmasked entries of `row`, in place.
/// Masked entries become 0. Returns the log-sum-exp of the unmasked logits.
pub(crate) fn softmax_in_place(row: &mut [f64], mask: Option<&[bool]>) -> f64 {
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let max = row
        .iter()
        .enumerate()
        .filter(|(i, _)| keep(*i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (i, v) in row.iter_mut().enumerate() {
        if keep(i) {
            *v = (*v - max).exp();
            total += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= total;
    }
    max + total.ln()
}
