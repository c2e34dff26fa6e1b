//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node whose inputs already live on the tape, so
//! node order is a topological order and the backward pass is a single reverse
//! sweep. Nodes that do not depend on any gradient-tracked leaf are marked
//! untracked and skipped during backward.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{NumericsError, Result};
use crate::linalg::{gemm, MatRef};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddBias { a: usize, bias: usize },
    ScaleRows { a: usize, s: usize },
    Affine { a: usize, scale: f64 },
    Tanh { a: usize },
    Sigmoid { a: usize },
    Relu { a: usize },
    LogSigmoid { a: usize },
    Softmax { a: usize, axis: usize },
    LogSoftmax { a: usize, axis: usize },
    Sum { a: usize },
    Mean { a: usize },
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    Gather { table: usize, ids: Vec<usize> },
    Reshape { a: usize },
    Transpose { a: usize },
    LayerNorm { a: usize, gain: usize, bias: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    MaskMul { a: usize, mask: Arc<Vec<f64>> },
    Pick { a: usize, index: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

/// Single-threaded recording of tensor operations.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> NumericsError {
    NumericsError::Shape {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        [c] => Ok((1, *c)),
        s => Err(NumericsError::Shape {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop every recorded node and gradient.
    pub fn reset(&self) {
        *self.inner.borrow_mut() = Inner::default();
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Same value, cut from the gradient path.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.inner.borrow().nodes[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().nodes[v.0].value.shape().to_vec()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.inner.borrow().nodes[v.0].tracked
    }

    /// Gradient accumulated at `v` by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let inner = self.inner.borrow();
        let node = &inner.nodes[v.0];
        inner
            .grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push_raw(&self, value: Tensor, op: Op, tracked: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value, op, tracked });
        Var(inner.nodes.len() - 1)
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        let tracked = {
            let inner = self.inner.borrow();
            inputs.iter().any(|&i| inner.nodes[i].tracked)
        };
        Ok(self.push_raw(value, op, tracked))
    }

    fn get(&self, v: Var) -> Tensor {
        self.value(v)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes a rank-2 operand.
    pub fn matmul_t(&self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (av, bv) = (self.get(a), self.get(b));
        if av.rank() != 2 || bv.rank() != 2 {
            return Err(shape_err("matmul", &av, &bv));
        }
        let ma = MatRef::new(av.data(), av.shape()[0], av.shape()[1]);
        let mb = MatRef::new(bv.data(), bv.shape()[0], bv.shape()[1]);
        let ma = if ta { ma.t() } else { ma };
        let mb = if tb { mb.t() } else { mb };
        let ((m, k), (k2, n)) = (ma.dims(), mb.dims());
        if k != k2 {
            return Err(shape_err("matmul", &av, &bv));
        }
        let mut out = vec![0.0; m * n];
        gemm(ma, mb, 0.0, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul { a: a.0, b: b.0, ta, tb }, &[a.0, b.0])
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let av = self.get(a);
        let (r, c) = matrix_dims(&av, "transpose")?;
        let src = av.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", Tensor::new(vec![c, r], out)?, Op::Transpose { a: a.0 }, &[a.0])
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.get(a), self.get(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, &av, &bv));
        }
        let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        self.push(name, Tensor::new(av.shape().to_vec(), out)?, op, &[a.0, b.0])
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    /// Adds a bias over the trailing dimension: `a[.., j] + bias[j]`.
    pub fn add_bias(&self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.get(a), self.get(bias));
        let n = av.cols();
        if bv.len() != n {
            return Err(shape_err("add_bias", &av, &bv));
        }
        let bd = bv.data();
        let out: Vec<f64> = av.data().iter().enumerate().map(|(i, x)| x + bd[i % n]).collect();
        self.push("add_bias", Tensor::new(av.shape().to_vec(), out)?, Op::AddBias { a: a.0, bias: bias.0 }, &[a.0, bias.0])
    }

    /// Multiplies row `i` of `a` (`m × n`) by `s[i]` (`s` holds `m` values).
    pub fn scale_rows(&self, a: Var, s: Var) -> Result<Var> {
        let (av, sv) = (self.get(a), self.get(s));
        let m = av.rows();
        if sv.len() != m {
            return Err(shape_err("scale_rows", &av, &sv));
        }
        let n = av.cols();
        let sd = sv.data();
        let out: Vec<f64> = av.data().iter().enumerate().map(|(i, x)| x * sd[i / n]).collect();
        self.push("scale_rows", Tensor::new(av.shape().to_vec(), out)?, Op::ScaleRows { a: a.0, s: s.0 }, &[a.0, s.0])
    }

    /// `scale * a + shift`.
    pub fn affine(&self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary("affine", a, |x| scale * x + shift, Op::Affine { a: a.0, scale })
    }

    pub fn scale(&self, a: Var, scale: f64) -> Result<Var> {
        self.affine(a, scale, 0.0)
    }

    fn unary(&self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let av = self.get(a);
        let out: Vec<f64> = av.data().iter().map(|x| f(*x)).collect();
        self.push(name, Tensor::new(av.shape().to_vec(), out)?, op, &[a.0])
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh { a: a.0 })
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid { a: a.0 })
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu { a: a.0 })
    }

    /// `ln σ(x)`, computed without overflow.
    pub fn log_sigmoid(&self, a: Var) -> Result<Var> {
        self.unary("log_sigmoid", a, log_sigmoid, Op::LogSigmoid { a: a.0 })
    }

    /// Multiplies by a constant buffer of the same shape (dropout masks).
    pub fn mask_mul(&self, a: Var, mask: Tensor) -> Result<Var> {
        let av = self.get(a);
        if av.shape() != mask.shape() {
            return Err(shape_err("mask_mul", &av, &mask));
        }
        let out: Vec<f64> = av.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
        let mask = Arc::new(mask.into_vec());
        self.push("mask_mul", Tensor::new(av.shape().to_vec(), out)?, Op::MaskMul { a: a.0, mask }, &[a.0])
    }

    // ---- reductions and normalisation ------------------------------------

    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let av = self.get(a);
        if axis >= av.rank() {
            return Err(NumericsError::Axis { op: "softmax", axis, shape: av.shape().to_vec() });
        }
        let (outer, n, inner) = split_axis(av.shape(), axis);
        let src = av.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for r in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + r;
                let max = (0..n).map(|i| src[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..n {
                    let e = (src[idx(i)] - max).exp();
                    out[idx(i)] = e;
                    total += e;
                }
                for i in 0..n {
                    out[idx(i)] /= total;
                }
            }
        }
        self.push("softmax", Tensor::new(av.shape().to_vec(), out)?, Op::Softmax { a: a.0, axis }, &[a.0])
    }

    pub fn log_softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let av = self.get(a);
        if axis >= av.rank() {
            return Err(NumericsError::Axis { op: "log_softmax", axis, shape: av.shape().to_vec() });
        }
        let (outer, n, inner) = split_axis(av.shape(), axis);
        let src = av.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for r in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + r;
                let max = (0..n).map(|i| src[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..n).map(|i| (src[idx(i)] - max).exp()).sum::<f64>().ln();
                for i in 0..n {
                    out[idx(i)] = src[idx(i)] - lse;
                }
            }
        }
        self.push("log_softmax", Tensor::new(av.shape().to_vec(), out)?, Op::LogSoftmax { a: a.0, axis }, &[a.0])
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let s: f64 = self.get(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { a: a.0 }, &[a.0])
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let av = self.get(a);
        let s: f64 = av.data().iter().sum::<f64>() / av.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean { a: a.0 }, &[a.0])
    }

    /// Selects one element by flat index as a one-element tensor.
    pub fn pick(&self, a: Var, index: usize) -> Result<Var> {
        let av = self.get(a);
        if index >= av.len() {
            return Err(NumericsError::Index {
                op: "pick",
                detail: format!("index {index} out of {}", av.len()),
            });
        }
        self.push("pick", Tensor::scalar(av.data()[index]), Op::Pick { a: a.0, index }, &[a.0])
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (av, gv, bv) = (self.get(a), self.get(gain), self.get(bias));
        let n = av.cols();
        if gv.len() != n || bv.len() != n {
            return Err(shape_err("layer_norm", &av, &gv));
        }
        let rows = av.rows();
        let src = av.data();
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..n {
                let h = (row[j] - mu) * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let op = Op::LayerNorm { a: a.0, gain: gain.0, bias: bias.0, xhat, inv_std };
        self.push("layer_norm", Tensor::new(av.shape().to_vec(), out)?, op, &[a.0, gain.0, bias.0])
    }

    // ---- structural -----------------------------------------------------

    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.get(a);
        let (r, c) = matrix_dims(&av, "slice_rows")?;
        if start >= end || end > r {
            return Err(NumericsError::Index { op: "slice_rows", detail: format!("{start}..{end} of {r} rows") });
        }
        let data = av.data()[start * c..end * c].to_vec();
        self.push("slice_rows", Tensor::new(vec![end - start, c], data)?, Op::SliceRows { a: a.0, start }, &[a.0])
    }

    pub fn row(&self, a: Var, i: usize) -> Result<Var> {
        self.slice_rows(a, i, i + 1)
    }

    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.get(a);
        let (r, c) = matrix_dims(&av, "slice_cols")?;
        if start >= end || end > c {
            return Err(NumericsError::Index { op: "slice_cols", detail: format!("{start}..{end} of {c} cols") });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&av.data()[i * c + start..i * c + end]);
        }
        self.push("slice_cols", Tensor::new(vec![r, w], data)?, Op::SliceCols { a: a.0, start }, &[a.0])
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumericsError::Index { op: "concat_rows", detail: "no parts".into() });
        }
        let values: Vec<Tensor> = parts.iter().map(|p| self.get(*p)).collect();
        let c = values[0].cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for v in &values {
            if v.cols() != c || v.rank() > 2 {
                return Err(shape_err("concat_rows", &values[0], v));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat_rows", Tensor::new(vec![rows, c], data)?, Op::ConcatRows { parts: ids.clone() }, &ids)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumericsError::Index { op: "concat_cols", detail: "no parts".into() });
        }
        let values: Vec<Tensor> = parts.iter().map(|p| self.get(*p)).collect();
        let r = values[0].rows();
        for v in &values {
            if v.rows() != r || v.rank() > 2 {
                return Err(shape_err("concat_cols", &values[0], v));
            }
        }
        let total: usize = values.iter().map(Tensor::cols).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for v in &values {
                data.extend_from_slice(v.row_slice(i));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat_cols", Tensor::new(vec![r, total], data)?, Op::ConcatCols { parts: ids.clone() }, &ids)
    }

    /// Embedding lookup: rows of `table` at `ids`.
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.get(table);
        let (r, c) = matrix_dims(&tv, "gather_rows")?;
        if ids.is_empty() {
            return Err(NumericsError::Index { op: "gather_rows", detail: "empty id list".into() });
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(NumericsError::Index { op: "gather_rows", detail: format!("row {id} of {r}") });
            }
            data.extend_from_slice(&tv.data()[id * c..(id + 1) * c]);
        }
        let op = Op::Gather { table: table.0, ids: ids.to_vec() };
        self.push("gather_rows", Tensor::new(vec![ids.len(), c], data)?, op, &[table.0])
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.get(a).reshaped(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape { a: a.0 }, &[a.0])
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates d`loss`/d`v` for every tracked node.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let mut guard = self.inner.borrow_mut();
        if guard.backward_done {
            return Err(NumericsError::BackwardTwice);
        }
        let Inner { nodes, grads, backward_done } = &mut *guard;
        if nodes[loss.0].value.len() != 1 {
            return Err(NumericsError::NotScalar(nodes[loss.0].value.shape().to_vec()));
        }
        *backward_done = true;
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        if !nodes[loss.0].tracked {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop(nodes, grads, id, &g);
            grads[id] = Some(g);
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].tracked {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn add_into(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl Fn(usize) -> f64) {
    if let Some(dst) = slot(grads, nodes, id) {
        for (i, d) in dst.iter_mut().enumerate() {
            *d += f(i);
        }
    }
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul { a, b, ta, tb } => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let ma = MatRef::new(av.data(), av.shape()[0], av.shape()[1]);
            let mb = MatRef::new(bv.data(), bv.shape()[0], bv.shape()[1]);
            let (m, n) = (out.shape()[0], out.shape()[1]);
            let dc = MatRef::new(g, m, n);
            let ma_t = if ta { ma.t() } else { ma };
            let mb_t = if tb { mb.t() } else { mb };
            if let Some(da) = slot(grads, nodes, a) {
                // d op(a) = dC · op(b)ᵀ ; for a transposed operand take the transpose.
                if ta {
                    gemm(mb_t, dc.t(), 1.0, da);
                } else {
                    gemm(dc, mb_t.t(), 1.0, da);
                }
            }
            if let Some(db) = slot(grads, nodes, b) {
                if tb {
                    gemm(dc.t(), ma_t, 1.0, db);
                } else {
                    gemm(ma_t.t(), dc, 1.0, db);
                }
            }
        }
        &Op::Add { a, b } => {
            add_into(grads, nodes, a, |i| g[i]);
            add_into(grads, nodes, b, |i| g[i]);
        }
        &Op::Sub { a, b } => {
            add_into(grads, nodes, a, |i| g[i]);
            add_into(grads, nodes, b, |i| -g[i]);
        }
        &Op::Mul { a, b } => {
            let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
            add_into(grads, nodes, a, |i| g[i] * bv[i]);
            add_into(grads, nodes, b, |i| g[i] * av[i]);
        }
        &Op::AddBias { a, bias } => {
            add_into(grads, nodes, a, |i| g[i]);
            if let Some(db) = slot(grads, nodes, bias) {
                let n = db.len();
                for (i, gi) in g.iter().enumerate() {
                    db[i % n] += gi;
                }
            }
        }
        &Op::ScaleRows { a, s } => {
            let n = out.cols();
            let (av, sv) = (nodes[a].value.data(), nodes[s].value.data());
            add_into(grads, nodes, a, |i| g[i] * sv[i / n]);
            if let Some(ds) = slot(grads, nodes, s) {
                for (i, gi) in g.iter().enumerate() {
                    ds[i / n] += gi * av[i];
                }
            }
        }
        &Op::Affine { a, scale } => add_into(grads, nodes, a, |i| g[i] * scale),
        &Op::Tanh { a } => {
            let y = out.data();
            add_into(grads, nodes, a, |i| g[i] * (1.0 - y[i] * y[i]));
        }
        &Op::Sigmoid { a } => {
            let y = out.data();
            add_into(grads, nodes, a, |i| g[i] * y[i] * (1.0 - y[i]));
        }
        &Op::Relu { a } => {
            let x = nodes[a].value.data();
            add_into(grads, nodes, a, |i| if x[i] > 0.0 { g[i] } else { 0.0 });
        }
        &Op::LogSigmoid { a } => {
            let x = nodes[a].value.data();
            add_into(grads, nodes, a, |i| g[i] * sigmoid(-x[i]));
        }
        &Op::Softmax { a, axis } => {
            let y = out.data();
            let (outer, n, inner) = split_axis(out.shape(), axis);
            if let Some(da) = slot(grads, nodes, a) {
                for o in 0..outer {
                    for r in 0..inner {
                        let idx = |i: usize| (o * n + i) * inner + r;
                        let dot: f64 = (0..n).map(|i| y[idx(i)] * g[idx(i)]).sum();
                        for i in 0..n {
                            da[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
            }
        }
        &Op::LogSoftmax { a, axis } => {
            let y = out.data();
            let (outer, n, inner) = split_axis(out.shape(), axis);
            if let Some(da) = slot(grads, nodes, a) {
                for o in 0..outer {
                    for r in 0..inner {
                        let idx = |i: usize| (o * n + i) * inner + r;
                        let total: f64 = (0..n).map(|i| g[idx(i)]).sum();
                        for i in 0..n {
                            da[idx(i)] += g[idx(i)] - y[idx(i)].exp() * total;
                        }
                    }
                }
            }
        }
        &Op::Sum { a } => add_into(grads, nodes, a, |_| g[0]),
        &Op::Mean { a } => {
            let n = nodes[a].value.len() as f64;
            add_into(grads, nodes, a, |_| g[0] / n);
        }
        &Op::Pick { a, index } => {
            if let Some(da) = slot(grads, nodes, a) {
                da[index] += g[0];
            }
        }
        &Op::SliceRows { a, start } => {
            let c = out.cols();
            if let Some(da) = slot(grads, nodes, a) {
                for (i, gi) in g.iter().enumerate() {
                    da[start * c + i] += gi;
                }
            }
        }
        &Op::SliceCols { a, start } => {
            let (r, w) = (out.rows(), out.cols());
            let c = nodes[a].value.cols();
            if let Some(da) = slot(grads, nodes, a) {
                for i in 0..r {
                    for j in 0..w {
                        da[i * c + start + j] += g[i * w + j];
                    }
                }
            }
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                add_into(grads, nodes, p, |i| g[offset + i]);
                offset += len;
            }
        }
        Op::ConcatCols { parts } => {
            let total = out.cols();
            let mut col = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                add_into(grads, nodes, p, |i| g[(i / w) * total + col + i % w]);
                col += w;
            }
        }
        Op::Gather { table, ids } => {
            let c = out.cols();
            if let Some(dt) = slot(grads, nodes, *table) {
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        dt[id * c + j] += g[row * c + j];
                    }
                }
            }
        }
        &Op::Reshape { a } => add_into(grads, nodes, a, |i| g[i]),
        &Op::Transpose { a } => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            // out is r×c, input is c×r.
            add_into(grads, nodes, a, |i| {
                let (ii, jj) = (i / r, i % r);
                g[jj * c + ii]
            });
        }
        Op::LayerNorm { a, gain, bias, xhat, inv_std } => {
            let n = out.cols();
            let rows = out.rows();
            let gv = nodes[*gain].value.data();
            if let Some(da) = slot(grads, nodes, *a) {
                for r in 0..rows {
                    let gr = &g[r * n..(r + 1) * n];
                    let xr = &xhat[r * n..(r + 1) * n];
                    let mut sum_dx = 0.0;
                    let mut sum_dx_x = 0.0;
                    for j in 0..n {
                        let d = gr[j] * gv[j];
                        sum_dx += d;
                        sum_dx_x += d * xr[j];
                    }
                    let scale = inv_std[r] / n as f64;
                    for j in 0..n {
                        let d = gr[j] * gv[j];
                        da[r * n + j] += scale * (n as f64 * d - sum_dx - xr[j] * sum_dx_x);
                    }
                }
            }
            if let Some(dg) = slot(grads, nodes, *gain) {
                for (i, gi) in g.iter().enumerate() {
                    dg[i % n] += gi * xhat[i];
                }
            }
            if let Some(db) = slot(grads, nodes, *bias) {
                for (i, gi) in g.iter().enumerate() {
                    db[i % n] += gi;
                }
            }
        }
        Op::MaskMul { a, mask } => add_into(grads, nodes, *a, |i| g[i] * mask[i]),
    }
}
