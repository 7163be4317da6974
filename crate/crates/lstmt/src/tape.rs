//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations are evaluated eagerly and recorded on a [`Tape`] in
//! topological order by construction. [`Tape::backward`] walks the
//! record once in reverse, accumulating gradients by summation when a
//! value feeds several consumers. Only the primitives the captioner
//! needs exist; there is no general broadcasting engine (elementwise
//! ops accept equal shapes or a scalar on either side).
//!
//! Every forward and backward result is checked for NaN/Inf and aborts
//! the step with an error naming the operation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul,
    MatVec,
    Add,
    Mul,
    Scale(f64),
    Tanh,
    Sigmoid,
    Softmax,
    LogSoftmax,
    Log,
    Concat,
    Slice(usize),
    GatherRow(usize),
    GatherCol(usize),
    MeanRows,
    WeightedRowSum,
    Sum,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::MatVec => "matvec",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::Log => "log",
            Op::Concat => "concat",
            Op::Slice(_) => "slice",
            Op::GatherRow(_) => "gather_row",
            Op::GatherCol(_) => "gather_col",
            Op::MeanRows => "mean_rows",
            Op::WeightedRowSum => "weighted_row_sum",
            Op::Sum => "sum",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<ValueId>,
    value: Tensor,
}

/// Gradients for every slot of a tape, indexed by [`ValueId`].
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> &Tensor {
        &self.grads[id.0]
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<ValueId>, value: Tensor) -> Result<ValueId> {
        value.check_finite(op.name())?;
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { op, inputs, value });
        Ok(id)
    }

    pub fn leaf(&mut self, value: Tensor) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { op: Op::Leaf, inputs: vec![], value });
        id
    }

    /// `a[m,k] · b[k,n] -> [m,n]`
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.rows() {
            return Err(Error::Dim(format!(
                "matmul shapes {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ta.data()[i * k + p];
                for j in 0..n {
                    out[i * n + j] += av * tb.data()[p * n + j];
                }
            }
        }
        self.push(Op::MatMul, vec![a, b], Tensor::raw(vec![m, n], out))
    }

    /// `a[m,k] · x[k] -> [m]`
    pub fn matvec(&mut self, a: ValueId, x: ValueId) -> Result<ValueId> {
        let (ta, tx) = (self.value(a), self.value(x));
        if !ta.is_matrix() || !tx.is_vector() || ta.cols() != tx.len() {
            return Err(Error::Dim(format!(
                "matvec shapes {:?} x {:?}",
                ta.shape(),
                tx.shape()
            )));
        }
        let (m, k) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; m];
        for i in 0..m {
            let mut acc = 0.0;
            for p in 0..k {
                acc += ta.data()[i * k + p] * tx.data()[p];
            }
            out[i] = acc;
        }
        self.push(Op::MatVec, vec![a, x], Tensor::vector(out))
    }

    fn elementwise_pair(
        &mut self,
        op: Op,
        a: ValueId,
        b: ValueId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::raw(ta.shape().to_vec(), data)
        } else if tb.is_scalar() {
            let s = tb.data()[0];
            Tensor::raw(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x, s)).collect())
        } else if ta.is_scalar() {
            let s = ta.data()[0];
            Tensor::raw(tb.shape().to_vec(), tb.data().iter().map(|&y| f(s, y)).collect())
        } else {
            return Err(Error::Dim(format!(
                "{} shapes {:?} vs {:?} (equal or scalar only)",
                op.name(),
                ta.shape(),
                tb.shape()
            )));
        };
        self.push(op, vec![a, b], value)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.elementwise_pair(Op::Add, a, b, |x, y| x + y)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.elementwise_pair(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> Result<ValueId> {
        let t = self.value(x);
        let value = Tensor::raw(t.shape().to_vec(), t.data().iter().map(|&v| v * c).collect());
        self.push(Op::Scale(c), vec![x], value)
    }

    pub fn tanh(&mut self, x: ValueId) -> Result<ValueId> {
        let t = self.value(x);
        let value = Tensor::raw(t.shape().to_vec(), t.data().iter().map(|v| v.tanh()).collect());
        self.push(Op::Tanh, vec![x], value)
    }

    pub fn sigmoid(&mut self, x: ValueId) -> Result<ValueId> {
        let t = self.value(x);
        let value = Tensor::raw(
            t.shape().to_vec(),
            t.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
        );
        self.push(Op::Sigmoid, vec![x], value)
    }

    /// Max-subtracted softmax over a 1-D tensor.
    pub fn softmax(&mut self, x: ValueId) -> Result<ValueId> {
        let t = self.value(x);
        if !t.is_vector() || t.is_empty() {
            return Err(Error::Dim(format!("softmax needs a non-empty vector, got {:?}", t.shape())));
        }
        let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = t.data().iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let value = Tensor::vector(exps.iter().map(|e| e / z).collect());
        self.push(Op::Softmax, vec![x], value)
    }

    /// `x - logsumexp(x)` over a 1-D tensor.
    pub fn log_softmax(&mut self, x: ValueId) -> Result<ValueId> {
        let t = self.value(x);
        if !t.is_vector() || t.is_empty() {
            return Err(Error::Dim(format!(
                "log_softmax needs a non-empty vector, got {:?}",
                t.shape()
            )));
        }
        let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = t.data().iter().map(|v| (v - max).exp()).sum();
        let lse = max + z.ln();
        let value = Tensor::vector(t.data().iter().map(|v| v - lse).collect());
        self.push(Op::LogSoftmax, vec![x], value)
    }

    pub fn log(&mut self, x: ValueId) -> Result<ValueId> {
        let t = self.value(x);
        let value = Tensor::raw(t.shape().to_vec(), t.data().iter().map(|v| v.ln()).collect());
        self.push(Op::Log, vec![x], value)
    }

    /// Concatenate 1-D parts in order.
    pub fn concat(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::Dim("concat of zero parts".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if !t.is_vector() {
                return Err(Error::Dim(format!("concat part has shape {:?}, want 1-D", t.shape())));
            }
            data.extend_from_slice(t.data());
        }
        self.push(Op::Concat, parts.to_vec(), Tensor::vector(data))
    }

    /// `x[start .. start+len]` of a 1-D tensor.
    pub fn slice(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let t = self.value(x);
        if !t.is_vector() || start + len > t.len() {
            return Err(Error::Dim(format!(
                "slice [{start}, {}) of shape {:?}",
                start + len,
                t.shape()
            )));
        }
        let value = Tensor::vector(t.data()[start..start + len].to_vec());
        self.push(Op::Slice(start), vec![x], value)
    }

    /// Row `i` of a matrix as a vector.
    pub fn gather_row(&mut self, x: ValueId, i: usize) -> Result<ValueId> {
        let t = self.value(x);
        if !t.is_matrix() || i >= t.rows() {
            return Err(Error::Dim(format!("gather_row {i} of shape {:?}", t.shape())));
        }
        let value = Tensor::vector(t.row(i).to_vec());
        self.push(Op::GatherRow(i), vec![x], value)
    }

    /// Column `j` of a matrix as a vector.
    pub fn gather_col(&mut self, x: ValueId, j: usize) -> Result<ValueId> {
        let t = self.value(x);
        if !t.is_matrix() || j >= t.cols() {
            return Err(Error::Dim(format!("gather_col {j} of shape {:?}", t.shape())));
        }
        let value = Tensor::vector((0..t.rows()).map(|r| t.at2(r, j)).collect());
        self.push(Op::GatherCol(j), vec![x], value)
    }

    /// Arithmetic mean over the rows of a matrix.
    pub fn mean_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let t = self.value(x);
        if !t.is_matrix() {
            return Err(Error::Dim(format!("mean_rows of shape {:?}", t.shape())));
        }
        let (k, d) = (t.rows(), t.cols());
        let mut out = vec![0.0; d];
        for r in 0..k {
            for c in 0..d {
                out[c] += t.at2(r, c);
            }
        }
        for v in &mut out {
            *v /= k as f64;
        }
        self.push(Op::MeanRows, vec![x], Tensor::vector(out))
    }

    /// `sum_i w[i] * rows[i]` for a matrix `[K, d]` and weights `[K]`.
    pub fn weighted_row_sum(&mut self, rows: ValueId, w: ValueId) -> Result<ValueId> {
        let (tr, tw) = (self.value(rows), self.value(w));
        if !tr.is_matrix() || !tw.is_vector() || tr.rows() != tw.len() {
            return Err(Error::Dim(format!(
                "weighted_row_sum shapes {:?} with weights {:?}",
                tr.shape(),
                tw.shape()
            )));
        }
        let (k, d) = (tr.rows(), tr.cols());
        let mut out = vec![0.0; d];
        for i in 0..k {
            let wi = tw.data()[i];
            for c in 0..d {
                out[c] += wi * tr.at2(i, c);
            }
        }
        self.push(Op::WeightedRowSum, vec![rows, w], Tensor::vector(out))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: ValueId) -> Result<ValueId> {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(s))
    }

    /// Reverse pass from a scalar loss; returns a gradient for every slot.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape().to_vec()))
            .collect();
        grads[loss.0].data_mut()[0] = 1.0;

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let g = grads[idx].clone();
            if g.data().iter().all(|&v| v == 0.0) {
                continue;
            }
            match node.op {
                Op::Leaf => {}
                Op::MatMul => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let (ta, tb) = (self.value(a), self.value(b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    // dA += g · B^T ; dB += A^T · g
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g.data()[i * n + j] * tb.data()[p * n + j];
                            }
                            grads[a.0].data_mut()[i * k + p] += acc;
                        }
                    }
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += ta.data()[i * k + p] * g.data()[i * n + j];
                            }
                            grads[b.0].data_mut()[p * n + j] += acc;
                        }
                    }
                }
                Op::MatVec => {
                    let (a, x) = (node.inputs[0], node.inputs[1]);
                    let ta = self.value(a);
                    let tx = self.value(x);
                    let (m, k) = (ta.rows(), ta.cols());
                    for i in 0..m {
                        let gi = g.data()[i];
                        for p in 0..k {
                            grads[a.0].data_mut()[i * k + p] += gi * tx.data()[p];
                        }
                    }
                    for p in 0..k {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += ta.data()[i * k + p] * g.data()[i];
                        }
                        grads[x.0].data_mut()[p] += acc;
                    }
                }
                Op::Add => {
                    for &inp in &node.inputs {
                        if self.value(inp).shape() == g.shape() {
                            for (gi, go) in grads[inp.0].data_mut().iter_mut().zip(g.data()) {
                                *gi += go;
                            }
                        } else {
                            // scalar side: sum of incoming gradient
                            grads[inp.0].data_mut()[0] += g.data().iter().sum::<f64>();
                        }
                    }
                }
                Op::Mul => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
                    let accumulate = |grad: &mut Tensor, other: &Tensor, g: &Tensor| {
                        if grad.shape() == g.shape() {
                            if other.is_scalar() && !g.is_scalar() {
                                let s = other.data()[0];
                                for (gi, go) in grad.data_mut().iter_mut().zip(g.data()) {
                                    *gi += go * s;
                                }
                            } else {
                                for i in 0..g.len() {
                                    grad.data_mut()[i] += g.data()[i] * other.data()[i];
                                }
                            }
                        } else {
                            // this input is the scalar
                            let acc: f64 =
                                g.data().iter().zip(other.data()).map(|(x, y)| x * y).sum();
                            grad.data_mut()[0] += acc;
                        }
                    };
                    accumulate(&mut grads[a.0], &tb, &g);
                    accumulate(&mut grads[b.0], &ta, &g);
                }
                Op::Scale(c) => {
                    let x = node.inputs[0];
                    for (gi, go) in grads[x.0].data_mut().iter_mut().zip(g.data()) {
                        *gi += c * go;
                    }
                }
                Op::Tanh => {
                    let x = node.inputs[0];
                    for i in 0..g.len() {
                        let y = node.value.data()[i];
                        grads[x.0].data_mut()[i] += g.data()[i] * (1.0 - y * y);
                    }
                }
                Op::Sigmoid => {
                    let x = node.inputs[0];
                    for i in 0..g.len() {
                        let y = node.value.data()[i];
                        grads[x.0].data_mut()[i] += g.data()[i] * y * (1.0 - y);
                    }
                }
                Op::Softmax => {
                    let x = node.inputs[0];
                    let y = node.value.data();
                    let dot: f64 = g.data().iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                    for i in 0..g.len() {
                        grads[x.0].data_mut()[i] += y[i] * (g.data()[i] - dot);
                    }
                }
                Op::LogSoftmax => {
                    let x = node.inputs[0];
                    let gsum: f64 = g.data().iter().sum();
                    for i in 0..g.len() {
                        let p = node.value.data()[i].exp();
                        grads[x.0].data_mut()[i] += g.data()[i] - p * gsum;
                    }
                }
                Op::Log => {
                    let x = node.inputs[0];
                    let tx = self.value(x);
                    for i in 0..g.len() {
                        grads[x.0].data_mut()[i] += g.data()[i] / tx.data()[i];
                    }
                }
                Op::Concat => {
                    let mut offset = 0;
                    for &p in &node.inputs {
                        let len = self.value(p).len();
                        for i in 0..len {
                            grads[p.0].data_mut()[i] += g.data()[offset + i];
                        }
                        offset += len;
                    }
                }
                Op::Slice(start) => {
                    let x = node.inputs[0];
                    for i in 0..g.len() {
                        grads[x.0].data_mut()[start + i] += g.data()[i];
                    }
                }
                Op::GatherRow(r) => {
                    let x = node.inputs[0];
                    let cols = self.value(x).cols();
                    for c in 0..g.len() {
                        grads[x.0].data_mut()[r * cols + c] += g.data()[c];
                    }
                }
                Op::GatherCol(c) => {
                    let x = node.inputs[0];
                    let cols = self.value(x).cols();
                    for r in 0..g.len() {
                        grads[x.0].data_mut()[r * cols + c] += g.data()[r];
                    }
                }
                Op::MeanRows => {
                    let x = node.inputs[0];
                    let tx = self.value(x);
                    let (k, d) = (tx.rows(), tx.cols());
                    let inv = 1.0 / k as f64;
                    for r in 0..k {
                        for c in 0..d {
                            grads[x.0].data_mut()[r * d + c] += g.data()[c] * inv;
                        }
                    }
                }
                Op::WeightedRowSum => {
                    let (rows, w) = (node.inputs[0], node.inputs[1]);
                    let tr = self.value(rows).clone();
                    let tw = self.value(w).clone();
                    let (k, d) = (tr.rows(), tr.cols());
                    for i in 0..k {
                        let wi = tw.data()[i];
                        let mut acc = 0.0;
                        for c in 0..d {
                            grads[rows.0].data_mut()[i * d + c] += wi * g.data()[c];
                            acc += tr.at2(i, c) * g.data()[c];
                        }
                        grads[w.0].data_mut()[i] += acc;
                    }
                }
                Op::Sum => {
                    let x = node.inputs[0];
                    let gv = g.data()[0];
                    for gi in grads[x.0].data_mut() {
                        *gi += gv;
                    }
                }
            }
            for &inp in &node.inputs {
                if !grads[inp.0].all_finite() {
                    return Err(Error::Numeric(format!(
                        "backward through {} produced a non-finite gradient",
                        node.op.name()
                    )));
                }
            }
        }
        Ok(Gradients { grads })
    }
}
