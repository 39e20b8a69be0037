//! Reverse-mode autodiff over f64 tensors.
//!
//! Define-by-run: every op records a node holding its kind and input handles,
//! so the graph is rebuilt on each forward pass and dropped when the outputs
//! go out of scope. `backward` walks the graph once in reverse topological
//! order and accumulates gradients additively into every `requires_grad`
//! leaf reachable from the loss. Gradients persist across backward calls
//! until [`zero_grads`] resets them.
//!
//! Shapes are rank 1 or rank 2; a scalar is shape `[1]`. Broadcasting is
//! limited to `add` with a right operand whose shape is a suffix of the left
//! operand's shape (bias add over leading dims). All arithmetic is `f64`.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{BvmeError, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with graph recording disabled on this thread.
///
/// Used for rollouts, evaluation, and target-network passes, where values
/// are needed but gradients are not.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    NO_GRAD.with(|flag| {
        let prev = flag.get();
        flag.set(true);
        let out = f();
        flag.set(prev);
        out
    })
}

fn recording() -> bool {
    NO_GRAD.with(|flag| !flag.get())
}

/// Operation kinds. Attribute-bearing kinds carry their attributes inline.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// 2-D matrix product; `transpose_rhs` multiplies by the transpose of
    /// the right operand instead.
    MatMul { transpose_rhs: bool },
    /// Elementwise add; rhs shape may be a suffix of lhs shape.
    Add,
    /// Elementwise multiply, identical shapes.
    Mul,
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    /// Natural log; non-positive inputs are a domain error.
    Log,
    /// Pass-through inside `[lo, hi]`, constant outside; the gradient is
    /// exactly zero outside the closed interval and one inside it.
    Clamp { lo: f64, hi: f64 },
    /// Sum over all elements (`axis: None`, scalar output) or along one axis.
    Sum { axis: Option<usize> },
    /// Mean over all elements, scalar output.
    Mean,
    Square,
    Abs,
    Elu { alpha: f64 },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    /// Row-wise softmax of a rank-2 tensor.
    RowSoftmax,
    /// Same data, new shape with identical element count.
    Reshape { shape: Vec<usize> },
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul { .. } => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "elementwise-mul",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Clamp { .. } => "clamp",
            OpKind::Sum { .. } => "sum",
            OpKind::Mean => "mean",
            OpKind::Square => "square",
            OpKind::Abs => "abs",
            OpKind::Elu { .. } => "elu",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::RowSoftmax => "row_softmax",
            OpKind::Reshape { .. } => "reshape",
        }
    }
}

#[derive(Debug)]
struct Node {
    kind: OpKind,
    inputs: Vec<Tensor>,
}

#[derive(Debug)]
struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    node: Option<Node>,
}

/// Shared handle to one tensor. Cloning the handle aliases the same storage;
/// graph edges are exactly these handles held by downstream nodes.
#[derive(Debug, Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorInner>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn make(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, node: Option<Node>) -> Tensor {
        debug_assert_eq!(numel(&shape), values.len());
        Tensor {
            inner: Rc::new(RefCell::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                values,
                requires_grad,
                grad: None,
                node,
            })),
        }
    }

    /// New leaf tensor.
    pub fn new(shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if numel(shape) != values.len() {
            return Err(BvmeError::dimension(
                "new",
                format!("shape {:?} holds {} elements but {} values given", shape, numel(shape), values.len()),
            ));
        }
        if shape.is_empty() || shape.len() > 2 {
            return Err(BvmeError::dimension("new", format!("rank must be 1 or 2, got shape {shape:?}")));
        }
        Ok(Tensor::make(shape.to_vec(), values, requires_grad, None))
    }

    /// Constant (non-differentiable) leaf.
    pub fn constant(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        Tensor::new(shape, values, false)
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        Tensor::new(shape, values, true)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::make(vec![1], vec![v], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::make(shape.to_vec(), vec![0.0; numel(shape)], false, None)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::make(shape.to_vec(), vec![v; numel(shape)], false, None)
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Borrow of the raw values.
    pub fn values(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |t| t.values.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().values.clone()
    }

    /// Scalar value; the tensor must hold exactly one element.
    pub fn item(&self) -> f64 {
        let b = self.inner.borrow();
        assert!(b.values.len() == 1, "item() on tensor of {} elements", b.values.len());
        b.values[0]
    }

    /// Current gradient, if any backward pass has touched this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    /// Overwrites stored values in place (used by the optimizer).
    pub fn set_values(&self, values: &[f64]) -> Result<()> {
        let mut b = self.inner.borrow_mut();
        if b.values.len() != values.len() {
            return Err(BvmeError::dimension(
                "set_values",
                format!("tensor holds {} values, {} given", b.values.len(), values.len()),
            ));
        }
        b.values.copy_from_slice(values);
        Ok(())
    }

    /// Copy of the values as a fresh non-differentiable leaf.
    pub fn detach(&self) -> Tensor {
        let b = self.inner.borrow();
        Tensor::make(b.shape.clone(), b.values.clone(), false, None)
    }

    fn accum_grad(&self, contribution: &[f64]) {
        let mut b = self.inner.borrow_mut();
        debug_assert_eq!(b.values.len(), contribution.len());
        let g = b.grad.get_or_insert_with(|| vec![0.0; contribution.len()]);
        for (gi, ci) in g.iter_mut().zip(contribution) {
            *gi += ci;
        }
    }

    // ------------------------------------------------------------------
    // Op construction
    // ------------------------------------------------------------------

    /// Applies `kind` to `inputs`, validating shapes and recording a graph
    /// node whenever any input requires gradients (and recording is on).
    pub fn apply(kind: OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
        let (shape, values) = forward(&kind, inputs)?;
        let track = recording() && inputs.iter().any(|t| t.requires_grad());
        let node = if track {
            Some(Node { kind, inputs: inputs.iter().map(|t| (*t).clone()).collect() })
        } else {
            None
        };
        Ok(Tensor::make(shape, values, track, node))
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        Tensor::apply(OpKind::MatMul { transpose_rhs: false }, &[self, rhs])
    }

    /// `self . rhs^T`.
    pub fn matmul_tr(&self, rhs: &Tensor) -> Result<Tensor> {
        Tensor::apply(OpKind::MatMul { transpose_rhs: true }, &[self, rhs])
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        Tensor::apply(OpKind::Add, &[self, rhs])
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        Tensor::apply(OpKind::Mul, &[self, rhs])
    }

    pub fn relu(&self) -> Result<Tensor> {
        Tensor::apply(OpKind::Relu, &[self])
    }

    pub fn tanh(&self) -> Result<Tensor> {
        Tensor::apply(OpKind::Tanh, &[self])
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        Tensor::apply(OpKind::Sigmoid, &[self])
    }

    pub fn exp(&self) -> Result<Tensor> {
        Tensor::apply(OpKind::Exp, &[self])
    }

    pub fn log(&self) -> Result<Tensor> {
        Tensor::apply(OpKind::Log, &[self])
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        Tensor::apply(OpKind::Clamp { lo, hi }, &[self])
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        Tensor::apply(OpKind::Sum { axis: None }, &[self])
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        Tensor::apply(OpKind::Sum { axis: Some(axis) }, &[self])
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        Tensor::apply(OpKind::Mean, &[self])
    }

    pub fn square(&self) -> Result<Tensor> {
        Tensor::apply(OpKind::Square, &[self])
    }

    pub fn abs(&self) -> Result<Tensor> {
        Tensor::apply(OpKind::Abs, &[self])
    }

    pub fn elu(&self) -> Result<Tensor> {
        Tensor::apply(OpKind::Elu { alpha: 1.0 }, &[self])
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        Tensor::apply(OpKind::Concat { axis }, parts)
    }

    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        Tensor::apply(OpKind::Slice { axis, start, end }, &[self])
    }

    pub fn row_softmax(&self) -> Result<Tensor> {
        Tensor::apply(OpKind::RowSoftmax, &[self])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::apply(OpKind::Reshape { shape: shape.to_vec() }, &[self])
    }

    // Convenience compositions over the primitive set.

    /// Multiplies every element by the constant `c`.
    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.mul(&Tensor::full(&self.shape(), c))
    }

    /// Adds the constant `c` to every element.
    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.add(&Tensor::full(&self.shape(), c))
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.add(&rhs.neg()?)
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Reverse-mode pass from this scalar. Visits each node exactly once in
    /// reverse topological order and adds gradient contributions into every
    /// `requires_grad` tensor reachable from here. Calling backward twice
    /// without [`zero_grads`] therefore doubles leaf gradients.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(BvmeError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }

        // Iterative post-order DFS: children (inputs) before consumers.
        let mut topo: Vec<Tensor> = Vec::new();
        let mut visited: std::collections::HashSet<u64> = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((t, child_idx)) = stack.pop() {
            let next_child = {
                let b = t.inner.borrow();
                b.node.as_ref().and_then(|n| n.inputs.get(child_idx).cloned())
            };
            match next_child {
                Some(child) => {
                    stack.push((t, child_idx + 1));
                    if visited.insert(child.id()) {
                        stack.push((child, 0));
                    }
                }
                None => topo.push(t),
            }
        }

        // Interior nodes keep no gradient state between calls; only leaves
        // accumulate. Without this reset a second backward pass would
        // propagate stale interior gradients on top of the fresh seed.
        for t in &topo {
            let mut b = t.inner.borrow_mut();
            if b.node.is_some() {
                b.grad = None;
            }
        }

        self.accum_grad(&[1.0]);
        for t in topo.iter().rev() {
            let (kind, inputs, out_grad) = {
                let b = t.inner.borrow();
                match (&b.node, &b.grad) {
                    (Some(node), Some(grad)) => (node.kind.clone(), node.inputs.clone(), grad.clone()),
                    _ => continue,
                }
            };
            backward_step(&kind, &inputs, t, &out_grad)?;
        }
        Ok(())
    }
}

/// Resets the gradient of every listed tensor to a zero vector.
pub fn zero_grads(params: &[Tensor]) {
    for p in params {
        let mut b = p.inner.borrow_mut();
        let n = b.values.len();
        b.grad = Some(vec![0.0; n]);
    }
}

// ----------------------------------------------------------------------
// Forward kernels
// ----------------------------------------------------------------------

fn expect_arity(kind: &OpKind, inputs: &[&Tensor], arity: usize) -> Result<()> {
    if inputs.len() != arity {
        return Err(BvmeError::dimension(
            kind.name(),
            format!("expected {} inputs, got {}", arity, inputs.len()),
        ));
    }
    Ok(())
}

/// a[m,k] . b[k,n] -> out[m,n]
fn matmul_ab(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in o_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
}

/// a[m,k] . b[n,k]^T -> out[m,n]
fn matmul_abt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// a[m,k]^T . b[m,n] -> out[k,n]
fn matmul_atb(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, &b_ij) in o_row.iter_mut().zip(b_row) {
                *o += a_ip * b_ij;
            }
        }
    }
}

fn dims_2d(kind: &OpKind, t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(BvmeError::dimension(kind.name(), format!("operand must be rank 2, got {s:?}")));
    }
    Ok((s[0], s[1]))
}

fn forward(kind: &OpKind, inputs: &[&Tensor]) -> Result<(Vec<usize>, Vec<f64>)> {
    match kind {
        OpKind::MatMul { transpose_rhs } => {
            expect_arity(kind, inputs, 2)?;
            let (m, k) = dims_2d(kind, inputs[0])?;
            let (r0, r1) = dims_2d(kind, inputs[1])?;
            let a = inputs[0].values();
            let b = inputs[1].values();
            if *transpose_rhs {
                if r1 != k {
                    return Err(BvmeError::dimension(
                        kind.name(),
                        format!("[{m},{k}] x [{r0},{r1}]^T: inner dims {k} vs {r1}"),
                    ));
                }
                let n = r0;
                let mut out = vec![0.0; m * n];
                matmul_abt(&a, &b, m, k, n, &mut out);
                Ok((vec![m, n], out))
            } else {
                if r0 != k {
                    return Err(BvmeError::dimension(
                        kind.name(),
                        format!("[{m},{k}] x [{r0},{r1}]: inner dims {k} vs {r0}"),
                    ));
                }
                let n = r1;
                let mut out = vec![0.0; m * n];
                matmul_ab(&a, &b, m, k, n, &mut out);
                Ok((vec![m, n], out))
            }
        }
        OpKind::Add => {
            expect_arity(kind, inputs, 2)?;
            let ls = inputs[0].shape();
            let rs = inputs[1].shape();
            if rs.len() > ls.len() || !ls.ends_with(&rs) {
                return Err(BvmeError::dimension(
                    kind.name(),
                    format!("rhs shape {rs:?} is not a suffix of lhs shape {ls:?}"),
                ));
            }
            let a = inputs[0].values();
            let b = inputs[1].values();
            let chunk = b.len();
            let mut out = a.to_vec();
            for seg in out.chunks_mut(chunk) {
                for (o, &bi) in seg.iter_mut().zip(b.iter()) {
                    *o += bi;
                }
            }
            Ok((ls, out))
        }
        OpKind::Mul => {
            expect_arity(kind, inputs, 2)?;
            let ls = inputs[0].shape();
            let rs = inputs[1].shape();
            if ls != rs {
                return Err(BvmeError::dimension(kind.name(), format!("shapes {ls:?} vs {rs:?} must match")));
            }
            let a = inputs[0].values();
            let b = inputs[1].values();
            let out = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
            Ok((ls, out))
        }
        OpKind::Relu => unary(kind, inputs, |x| if x > 0.0 { x } else { 0.0 }),
        OpKind::Tanh => unary(kind, inputs, f64::tanh),
        OpKind::Sigmoid => unary(kind, inputs, |x| 1.0 / (1.0 + (-x).exp())),
        OpKind::Exp => unary(kind, inputs, f64::exp),
        OpKind::Log => {
            expect_arity(kind, inputs, 1)?;
            let vals = inputs[0].values();
            if let Some(bad) = vals.iter().find(|v| **v <= 0.0) {
                return Err(BvmeError::domain("log", format!("log of non-positive value {bad}")));
            }
            let out = vals.iter().map(|v| v.ln()).collect();
            Ok((inputs[0].shape(), out))
        }
        OpKind::Clamp { lo, hi } => {
            if lo > hi {
                return Err(BvmeError::Contract(format!("clamp bounds inverted: lo={lo} hi={hi}")));
            }
            unary(kind, inputs, |x| x.max(*lo).min(*hi))
        }
        OpKind::Sum { axis } => {
            expect_arity(kind, inputs, 1)?;
            let s = inputs[0].shape();
            let vals = inputs[0].values();
            match axis {
                None => Ok((vec![1], vec![vals.iter().sum()])),
                Some(ax) => {
                    if s.len() == 1 {
                        if *ax != 0 {
                            return Err(BvmeError::dimension(kind.name(), format!("axis {ax} out of range for {s:?}")));
                        }
                        Ok((vec![1], vec![vals.iter().sum()]))
                    } else {
                        let (r, c) = (s[0], s[1]);
                        match ax {
                            0 => {
                                let mut out = vec![0.0; c];
                                for row in vals.chunks(c) {
                                    for (o, &v) in out.iter_mut().zip(row) {
                                        *o += v;
                                    }
                                }
                                Ok((vec![c], out))
                            }
                            1 => {
                                let out = vals.chunks(c).map(|row| row.iter().sum()).collect();
                                Ok((vec![r], out))
                            }
                            _ => Err(BvmeError::dimension(kind.name(), format!("axis {ax} out of range for {s:?}"))),
                        }
                    }
                }
            }
        }
        OpKind::Mean => {
            expect_arity(kind, inputs, 1)?;
            let vals = inputs[0].values();
            let n = vals.len() as f64;
            Ok((vec![1], vec![vals.iter().sum::<f64>() / n]))
        }
        OpKind::Square => unary(kind, inputs, |x| x * x),
        OpKind::Abs => unary(kind, inputs, f64::abs),
        OpKind::Elu { alpha } => unary(kind, inputs, |x| if x > 0.0 { x } else { alpha * (x.exp() - 1.0) }),
        OpKind::Concat { axis } => {
            if inputs.is_empty() {
                return Err(BvmeError::dimension(kind.name(), "needs at least one input".to_string()));
            }
            let first = inputs[0].shape();
            if first.len() == 1 {
                if *axis != 0 {
                    return Err(BvmeError::dimension(kind.name(), format!("axis {axis} out of range for rank 1")));
                }
                let mut out = Vec::new();
                for t in inputs {
                    let s = t.shape();
                    if s.len() != 1 {
                        return Err(BvmeError::dimension(kind.name(), format!("rank mismatch: {first:?} vs {s:?}")));
                    }
                    out.extend_from_slice(&t.values());
                }
                Ok((vec![out.len()], out))
            } else {
                match axis {
                    0 => {
                        let c = first[1];
                        let mut rows = 0;
                        let mut out = Vec::new();
                        for t in inputs {
                            let s = t.shape();
                            if s.len() != 2 || s[1] != c {
                                return Err(BvmeError::dimension(kind.name(), format!("column mismatch: {first:?} vs {s:?}")));
                            }
                            rows += s[0];
                            out.extend_from_slice(&t.values());
                        }
                        Ok((vec![rows, c], out))
                    }
                    1 => {
                        let r = first[0];
                        let widths: Vec<usize> = inputs
                            .iter()
                            .map(|t| {
                                let s = t.shape();
                                if s.len() != 2 || s[0] != r {
                                    return Err(BvmeError::dimension(kind.name(), format!("row mismatch: {first:?} vs {s:?}")));
                                }
                                Ok(s[1])
                            })
                            .collect::<Result<_>>()?;
                        let total: usize = widths.iter().sum();
                        let mut out = vec![0.0; r * total];
                        let mut offset = 0;
                        for (t, w) in inputs.iter().zip(&widths) {
                            let vals = t.values();
                            for i in 0..r {
                                out[i * total + offset..i * total + offset + w]
                                    .copy_from_slice(&vals[i * w..(i + 1) * w]);
                            }
                            offset += w;
                        }
                        Ok((vec![r, total], out))
                    }
                    _ => Err(BvmeError::dimension(kind.name(), format!("axis {axis} out of range for rank 2"))),
                }
            }
        }
        OpKind::Slice { axis, start, end } => {
            expect_arity(kind, inputs, 1)?;
            let s = inputs[0].shape();
            if *axis >= s.len() {
                return Err(BvmeError::dimension(kind.name(), format!("axis {axis} out of range for {s:?}")));
            }
            if start >= end || *end > s[*axis] {
                return Err(BvmeError::dimension(
                    kind.name(),
                    format!("range {start}..{end} invalid for axis {axis} of {s:?}"),
                ));
            }
            let vals = inputs[0].values();
            if s.len() == 1 {
                Ok((vec![end - start], vals[*start..*end].to_vec()))
            } else {
                let (_, c) = (s[0], s[1]);
                match axis {
                    0 => Ok((vec![end - start, c], vals[start * c..end * c].to_vec())),
                    1 => {
                        let w = end - start;
                        let mut out = Vec::with_capacity(s[0] * w);
                        for row in vals.chunks(c) {
                            out.extend_from_slice(&row[*start..*end]);
                        }
                        Ok((vec![s[0], w], out))
                    }
                    _ => unreachable!(),
                }
            }
        }
        OpKind::RowSoftmax => {
            expect_arity(kind, inputs, 1)?;
            let (r, c) = dims_2d(kind, inputs[0])?;
            let vals = inputs[0].values();
            let mut out = vec![0.0; r * c];
            for (row_in, row_out) in vals.chunks(c).zip(out.chunks_mut(c)) {
                let mx = row_in.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (o, &v) in row_out.iter_mut().zip(row_in) {
                    *o = (v - mx).exp();
                    z += *o;
                }
                for o in row_out.iter_mut() {
                    *o /= z;
                }
            }
            Ok((vec![r, c], out))
        }
        OpKind::Reshape { shape } => {
            expect_arity(kind, inputs, 1)?;
            if shape.is_empty() || shape.len() > 2 {
                return Err(BvmeError::dimension(kind.name(), format!("rank must be 1 or 2, got {shape:?}")));
            }
            if numel(shape) != inputs[0].len() {
                return Err(BvmeError::dimension(
                    kind.name(),
                    format!("cannot reshape {} elements into {:?}", inputs[0].len(), shape),
                ));
            }
            Ok((shape.clone(), inputs[0].to_vec()))
        }
    }
}

fn unary(kind: &OpKind, inputs: &[&Tensor], f: impl Fn(f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
    expect_arity(kind, inputs, 1)?;
    let out = inputs[0].values().iter().map(|&x| f(x)).collect();
    Ok((inputs[0].shape(), out))
}

// ----------------------------------------------------------------------
// Backward kernels
// ----------------------------------------------------------------------

fn backward_step(kind: &OpKind, inputs: &[Tensor], out: &Tensor, g: &[f64]) -> Result<()> {
    match kind {
        OpKind::MatMul { transpose_rhs } => {
            let a_shape = inputs[0].shape();
            let (m, k) = (a_shape[0], a_shape[1]);
            let n = out.shape()[1];
            let a = inputs[0].to_vec();
            let b = inputs[1].to_vec();
            if *transpose_rhs {
                // C = A B^T: dA = G B, dB = G^T A
                if inputs[0].requires_grad() {
                    let mut da = vec![0.0; m * k];
                    matmul_ab(g, &b, m, n, k, &mut da);
                    inputs[0].accum_grad(&da);
                }
                if inputs[1].requires_grad() {
                    let mut db = vec![0.0; n * k];
                    matmul_atb(g, &a, m, n, k, &mut db);
                    inputs[1].accum_grad(&db);
                }
            } else {
                // C = A B: dA = G B^T, dB = A^T G
                if inputs[0].requires_grad() {
                    let mut da = vec![0.0; m * k];
                    matmul_abt(g, &b, m, n, k, &mut da);
                    inputs[0].accum_grad(&da);
                }
                if inputs[1].requires_grad() {
                    let mut db = vec![0.0; k * n];
                    matmul_atb(&a, g, m, k, n, &mut db);
                    inputs[1].accum_grad(&db);
                }
            }
        }
        OpKind::Add => {
            if inputs[0].requires_grad() {
                inputs[0].accum_grad(g);
            }
            if inputs[1].requires_grad() {
                let chunk = inputs[1].len();
                let mut db = vec![0.0; chunk];
                for seg in g.chunks(chunk) {
                    for (o, &gi) in db.iter_mut().zip(seg) {
                        *o += gi;
                    }
                }
                inputs[1].accum_grad(&db);
            }
        }
        OpKind::Mul => {
            if inputs[0].requires_grad() {
                let b = inputs[1].to_vec();
                let da: Vec<f64> = g.iter().zip(&b).map(|(gi, bi)| gi * bi).collect();
                inputs[0].accum_grad(&da);
            }
            if inputs[1].requires_grad() {
                let a = inputs[0].to_vec();
                let db: Vec<f64> = g.iter().zip(&a).map(|(gi, ai)| gi * ai).collect();
                inputs[1].accum_grad(&db);
            }
        }
        OpKind::Relu => {
            if inputs[0].requires_grad() {
                let x = inputs[0].to_vec();
                let dx: Vec<f64> = g.iter().zip(&x).map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 }).collect();
                inputs[0].accum_grad(&dx);
            }
        }
        OpKind::Tanh => {
            if inputs[0].requires_grad() {
                let y = out.to_vec();
                let dx: Vec<f64> = g.iter().zip(&y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect();
                inputs[0].accum_grad(&dx);
            }
        }
        OpKind::Sigmoid => {
            if inputs[0].requires_grad() {
                let y = out.to_vec();
                let dx: Vec<f64> = g.iter().zip(&y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect();
                inputs[0].accum_grad(&dx);
            }
        }
        OpKind::Exp => {
            if inputs[0].requires_grad() {
                let y = out.to_vec();
                let dx: Vec<f64> = g.iter().zip(&y).map(|(gi, yi)| gi * yi).collect();
                inputs[0].accum_grad(&dx);
            }
        }
        OpKind::Log => {
            if inputs[0].requires_grad() {
                let x = inputs[0].to_vec();
                let dx: Vec<f64> = g.iter().zip(&x).map(|(gi, xi)| gi / xi).collect();
                inputs[0].accum_grad(&dx);
            }
        }
        OpKind::Clamp { lo, hi } => {
            if inputs[0].requires_grad() {
                let x = inputs[0].to_vec();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&x)
                    .map(|(gi, xi)| if *xi >= *lo && *xi <= *hi { *gi } else { 0.0 })
                    .collect();
                inputs[0].accum_grad(&dx);
            }
        }
        OpKind::Sum { axis } => {
            if inputs[0].requires_grad() {
                let s = inputs[0].shape();
                let n = inputs[0].len();
                let dx = match axis {
                    None => vec![g[0]; n],
                    Some(ax) => {
                        if s.len() == 1 {
                            vec![g[0]; n]
                        } else {
                            let (r, c) = (s[0], s[1]);
                            let mut dx = vec![0.0; n];
                            match ax {
                                0 => {
                                    for row in dx.chunks_mut(c) {
                                        row.copy_from_slice(g);
                                    }
                                }
                                1 => {
                                    for (i, row) in dx.chunks_mut(c).enumerate() {
                                        row.fill(g[i]);
                                    }
                                }
                                _ => unreachable!(),
                            }
                            debug_assert_eq!(r * c, n);
                            dx
                        }
                    }
                };
                inputs[0].accum_grad(&dx);
            }
        }
        OpKind::Mean => {
            if inputs[0].requires_grad() {
                let n = inputs[0].len();
                let dx = vec![g[0] / n as f64; n];
                inputs[0].accum_grad(&dx);
            }
        }
        OpKind::Square => {
            if inputs[0].requires_grad() {
                let x = inputs[0].to_vec();
                let dx: Vec<f64> = g.iter().zip(&x).map(|(gi, xi)| gi * 2.0 * xi).collect();
                inputs[0].accum_grad(&dx);
            }
        }
        OpKind::Abs => {
            if inputs[0].requires_grad() {
                let x = inputs[0].to_vec();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&x)
                    .map(|(gi, xi)| gi * if *xi > 0.0 { 1.0 } else if *xi < 0.0 { -1.0 } else { 0.0 })
                    .collect();
                inputs[0].accum_grad(&dx);
            }
        }
        OpKind::Elu { alpha } => {
            if inputs[0].requires_grad() {
                let x = inputs[0].to_vec();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&x)
                    .map(|(gi, xi)| gi * if *xi > 0.0 { 1.0 } else { alpha * xi.exp() })
                    .collect();
                inputs[0].accum_grad(&dx);
            }
        }
        OpKind::Concat { axis } => {
            let first = inputs[0].shape();
            if first.len() == 1 || *axis == 0 {
                let mut offset = 0;
                for t in inputs {
                    let n = t.len();
                    if t.requires_grad() {
                        t.accum_grad(&g[offset..offset + n]);
                    }
                    offset += n;
                }
            } else {
                let r = first[0];
                let total: usize = inputs.iter().map(|t| t.shape()[1]).sum();
                let mut offset = 0;
                for t in inputs {
                    let w = t.shape()[1];
                    if t.requires_grad() {
                        let mut dt = vec![0.0; r * w];
                        for i in 0..r {
                            dt[i * w..(i + 1) * w].copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        t.accum_grad(&dt);
                    }
                    offset += w;
                }
            }
        }
        OpKind::Slice { axis, start, end } => {
            if inputs[0].requires_grad() {
                let s = inputs[0].shape();
                let mut dx = vec![0.0; inputs[0].len()];
                if s.len() == 1 {
                    dx[*start..*end].copy_from_slice(g);
                } else {
                    let c = s[1];
                    match axis {
                        0 => dx[start * c..end * c].copy_from_slice(g),
                        1 => {
                            let w = end - start;
                            for i in 0..s[0] {
                                dx[i * c + start..i * c + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                            }
                        }
                        _ => unreachable!(),
                    }
                }
                inputs[0].accum_grad(&dx);
            }
        }
        OpKind::RowSoftmax => {
            if inputs[0].requires_grad() {
                let c = out.shape()[1];
                let p = out.to_vec();
                let mut dx = vec![0.0; p.len()];
                for ((p_row, g_row), dx_row) in p.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: f64 = p_row.iter().zip(g_row).map(|(pi, gi)| pi * gi).sum();
                    for ((d, pi), gi) in dx_row.iter_mut().zip(p_row).zip(g_row) {
                        *d = pi * (gi - dot);
                    }
                }
                inputs[0].accum_grad(&dx);
            }
        }
        OpKind::Reshape { .. } => {
            if inputs[0].requires_grad() {
                inputs[0].accum_grad(g);
            }
        }
    }
    Ok(())
}
