//! Wengert tape: records a closed set of primitive ops during the forward
//! pass and replays them in reverse for gradients.
//!
//! A tape is confined to one thread and one forward program. Leaves carry
//! the `requires_grad` flag of the tensor they were created from; derived
//! nodes require gradients iff any input does, so backward never visits
//! subgraphs that cannot reach a differentiation target.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Index of a node on the tape.
pub type NodeId = usize;

/// Activation functions of the FFN first projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActKind {
    Relu,
    Silu,
    Gelu,
}

/// The closed primitive set. Anything else is composed from these.
#[derive(Clone, Debug)]
pub enum Op<R: Real> {
    Leaf,
    /// Row gather: out[i,:] = table[indices[i],:]
    Gather { table: NodeId, indices: Vec<u32> },
    /// out = a · b
    MatMul { a: NodeId, b: NodeId },
    /// out = aᵀ
    Transpose { a: NodeId },
    /// out = a + b (same shape)
    Add { a: NodeId, b: NodeId },
    /// out = a ⊙ b (same shape)
    Mul { a: NodeId, b: NodeId },
    /// out = factor · a
    Scale { a: NodeId, factor: R },
    /// out = a + constant (elementwise)
    AddConst { a: NodeId, constant: R },
    /// out = act(a) elementwise
    Activation { a: NodeId, kind: ActKind },
    /// Row-wise softmax.
    Softmax { a: NodeId },
    /// Row-wise softmax of a square matrix with column j > row i masked out.
    CausalSoftmax { a: NodeId },
    /// Row-wise log-softmax.
    LogSoftmax { a: NodeId },
    /// Row-wise RMS normalization with learned gain.
    RmsNorm { a: NodeId, gain: NodeId, eps: R },
    /// out = a[start..start+len, :]
    SliceRows { a: NodeId, start: usize, len: usize },
    /// out = a[:, start..start+len]
    SliceCols { a: NodeId, start: usize, len: usize },
    /// Column-wise concatenation of same-height matrices.
    ConcatCols { parts: Vec<NodeId> },
    /// out[k] = a[coords[k].0, coords[k].1]
    SelectEntries { a: NodeId, coords: Vec<(usize, usize)> },
    /// Scalar sum of all elements, left to right.
    SumAll { a: NodeId },
    /// out = base except out[row, cols[j]] += delta[j].
    InjectRow { base: NodeId, delta: NodeId, row: usize, cols: Vec<usize> },
}

struct Node<R: Real> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
}

/// Gradient map produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<R: Real> {
    grads: Vec<Option<Tensor<R>>>,
    shapes: Vec<Vec<usize>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of the loss w.r.t. node `id`; zeros for nodes the loss does
    /// not depend on.
    pub fn get(&self, id: NodeId) -> Tensor<R> {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[id].clone()),
        }
    }

    pub fn get_ref(&self, id: NodeId) -> Option<&Tensor<R>> {
        self.grads[id].as_ref()
    }
}

/// Ordered record of primitive ops with their values.
pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of node `id`.
    pub fn value(&self, id: NodeId) -> &Tensor<R> {
        &self.nodes[id].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op, requires_grad });
        id
    }

    /// Insert a tensor as a leaf; its `requires_grad` flag marks it as a
    /// differentiation target.
    pub fn leaf(&mut self, t: Tensor<R>) -> NodeId {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn gather(&mut self, table: NodeId, indices: &[u32]) -> Result<NodeId> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(shape_err("gather", "table must be rank 2", t.shape()));
        }
        let (rows, cols) = (t.rows(), t.cols());
        for &ix in indices {
            if ix as usize >= rows {
                return Err(Error::Shape {
                    op: "gather",
                    detail: format!("index {ix} out of range for {rows} rows"),
                });
            }
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &ix in indices {
            data.extend_from_slice(t.row(ix as usize));
        }
        let rg = self.requires_grad(table);
        let value = Tensor::from_data(vec![indices.len(), cols], data)?;
        Ok(self.push(value, Op::Gather { table, indices: indices.to_vec() }, rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("{:?} x {:?}", ta.shape(), tb.shape()),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let data = kernels::matmul(ta.data(), m, k, tb.data(), n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let value = Tensor::from_data(vec![m, n], data)?;
        Ok(self.push(value, Op::MatMul { a, b }, rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(shape_err("transpose", "rank 2 required", t.shape()));
        }
        let (r, c) = (t.rows(), t.cols());
        let data = kernels::transpose(t.data(), r, c);
        let rg = self.requires_grad(a);
        let value = Tensor::from_data(vec![c, r], data)?;
        Ok(self.push(value, Op::Transpose { a }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: "add",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let value = Tensor::from_data(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: "mul",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let value = Tensor::from_data(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: NodeId, factor: R) -> NodeId {
        let ta = self.value(a);
        let data: Vec<R> = ta.data().iter().map(|&x| x * factor).collect();
        let value = Tensor::from_data(ta.shape().to_vec(), data).unwrap();
        let rg = self.requires_grad(a);
        self.push(value, Op::Scale { a, factor }, rg)
    }

    pub fn add_const(&mut self, a: NodeId, constant: R) -> NodeId {
        let ta = self.value(a);
        let data: Vec<R> = ta.data().iter().map(|&x| x + constant).collect();
        let value = Tensor::from_data(ta.shape().to_vec(), data).unwrap();
        let rg = self.requires_grad(a);
        self.push(value, Op::AddConst { a, constant }, rg)
    }

    pub fn activation(&mut self, a: NodeId, kind: ActKind) -> NodeId {
        let ta = self.value(a);
        let data: Vec<R> = ta.data().iter().map(|&x| kernels::act_forward(kind, x)).collect();
        let value = Tensor::from_data(ta.shape().to_vec(), data).unwrap();
        let rg = self.requires_grad(a);
        self.push(value, Op::Activation { a, kind }, rg)
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(shape_err("softmax", "rank 2 required", ta.shape()));
        }
        let data = kernels::row_softmax(ta.data(), ta.rows(), ta.cols(), false);
        let rg = self.requires_grad(a);
        let value = Tensor::from_data(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Softmax { a }, rg))
    }

    pub fn causal_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.shape().len() != 2 || ta.rows() != ta.cols() {
            return Err(shape_err("causal_softmax", "square matrix required", ta.shape()));
        }
        let data = kernels::row_softmax(ta.data(), ta.rows(), ta.cols(), true);
        let rg = self.requires_grad(a);
        let value = Tensor::from_data(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::CausalSoftmax { a }, rg))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(shape_err("log_softmax", "rank 2 required", ta.shape()));
        }
        let data = kernels::row_log_softmax(ta.data(), ta.rows(), ta.cols());
        let rg = self.requires_grad(a);
        let value = Tensor::from_data(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::LogSoftmax { a }, rg))
    }

    pub fn rmsnorm(&mut self, a: NodeId, gain: NodeId, eps: R) -> Result<NodeId> {
        let (ta, tg) = (self.value(a), self.value(gain));
        if ta.shape().len() != 2 || tg.numel() != ta.cols() {
            return Err(Error::Shape {
                op: "rmsnorm",
                detail: format!("input {:?}, gain {:?}", ta.shape(), tg.shape()),
            });
        }
        let data = kernels::rmsnorm_forward(ta.data(), ta.rows(), ta.cols(), tg.data(), eps);
        let rg = self.requires_grad(a) || self.requires_grad(gain);
        let value = Tensor::from_data(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::RmsNorm { a, gain, eps }, rg))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.shape().len() != 2 || start + len > ta.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                detail: format!("rows {}..{} of {:?}", start, start + len, ta.shape()),
            });
        }
        let c = ta.cols();
        let data = ta.data()[start * c..(start + len) * c].to_vec();
        let rg = self.requires_grad(a);
        let value = Tensor::from_data(vec![len, c], data)?;
        Ok(self.push(value, Op::SliceRows { a, start, len }, rg))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.shape().len() != 2 || start + len > ta.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                detail: format!("cols {}..{} of {:?}", start, start + len, ta.shape()),
            });
        }
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&ta.data()[i * c + start..i * c + start + len]);
        }
        let rg = self.requires_grad(a);
        let value = Tensor::from_data(vec![r, len], data)?;
        Ok(self.push(value, Op::SliceCols { a, start, len }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Invalid("concat_cols needs at least one part".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.rows() != rows {
                return Err(shape_err("concat_cols", "row-count mismatch", t.shape()));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        let value = Tensor::from_data(vec![rows, total], data)?;
        Ok(self.push(value, Op::ConcatCols { parts: parts.to_vec() }, rg))
    }

    pub fn select_entries(&mut self, a: NodeId, coords: &[(usize, usize)]) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(shape_err("select_entries", "rank 2 required", ta.shape()));
        }
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(coords.len());
        for &(i, j) in coords {
            if i >= r || j >= c {
                return Err(Error::Shape {
                    op: "select_entries",
                    detail: format!("({i},{j}) out of range for {:?}", ta.shape()),
                });
            }
            data.push(ta.data()[i * c + j]);
        }
        let rg = self.requires_grad(a);
        let value = Tensor::vector(data);
        Ok(self.push(value, Op::SelectEntries { a, coords: coords.to_vec() }, rg))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let mut acc = R::zero();
        for &v in ta.data() {
            acc = acc + v;
        }
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(acc), Op::SumAll { a }, rg)
    }

    /// Additive injection into one row at the given columns. A delta entry of
    /// exactly zero leaves the base value untouched bit for bit.
    pub fn inject_row(
        &mut self,
        base: NodeId,
        delta: NodeId,
        row: usize,
        cols: &[usize],
    ) -> Result<NodeId> {
        let (tb, td) = (self.value(base), self.value(delta));
        if tb.shape().len() != 2 {
            return Err(shape_err("inject_row", "base must be rank 2", tb.shape()));
        }
        if td.numel() != cols.len() {
            return Err(Error::Shape {
                op: "inject_row",
                detail: format!("{} cols but {} delta values", cols.len(), td.numel()),
            });
        }
        if row >= tb.rows() {
            return Err(Error::Shape {
                op: "inject_row",
                detail: format!("row {} out of range for {} rows", row, tb.rows()),
            });
        }
        let width = tb.cols();
        for &c in cols {
            if c >= width {
                return Err(Error::Shape {
                    op: "inject_row",
                    detail: format!("neuron index {c} out of range for width {width}"),
                });
            }
        }
        let mut data = tb.data().to_vec();
        for (&c, &d) in cols.iter().zip(td.data()) {
            if d != R::zero() {
                data[row * width + c] = data[row * width + c] + d;
            }
        }
        let rg = self.requires_grad(base) || self.requires_grad(delta);
        let value = Tensor::from_data(tb.shape().to_vec(), data)?;
        Ok(self.push(value, Op::InjectRow { base, delta, row, cols: cols.to_vec() }, rg))
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every node
    /// that requires them; nodes off the loss path read back as zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<R>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            });
        }
        let mut grads: Vec<Option<Vec<R>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![R::one()]);

        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else { continue };
            self.accumulate(id, &gout, &mut grads);
            // Leaves keep their accumulated gradient; interior grads are
            // restored so callers can inspect them too.
            grads[id] = Some(gout);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|data| Tensor::from_data(self.nodes[id].value.shape().to_vec(), data))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, id: NodeId, gout: &[R], grads: &mut [Option<Vec<R>>]) {
        let node = &self.nodes[id];
        let add_into = |dst: &mut Option<Vec<R>>, src_len: usize, f: &mut dyn FnMut(&mut [R])| {
            let buf = dst.get_or_insert_with(|| vec![R::zero(); src_len]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Gather { table, indices } => {
                if self.nodes[*table].requires_grad {
                    let cols = self.nodes[*table].value.cols();
                    let len = self.nodes[*table].value.numel();
                    add_into(&mut grads[*table], len, &mut |buf| {
                        for (i, &ix) in indices.iter().enumerate() {
                            let dst = &mut buf[ix as usize * cols..(ix as usize + 1) * cols];
                            let src = &gout[i * cols..(i + 1) * cols];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d = *d + s;
                            }
                        }
                    });
                }
            }
            Op::MatMul { a, b } => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.nodes[*a].requires_grad {
                    // dA = dOut · Bᵀ
                    let bt = kernels::transpose(tb.data(), k, n);
                    let da = kernels::matmul(gout, m, n, &bt, k);
                    add_into(&mut grads[*a], m * k, &mut |buf| axpy(buf, &da));
                }
                if self.nodes[*b].requires_grad {
                    // dB = Aᵀ · dOut
                    let at = kernels::transpose(ta.data(), m, k);
                    let db = kernels::matmul(&at, k, m, gout, n);
                    add_into(&mut grads[*b], k * n, &mut |buf| axpy(buf, &db));
                }
            }
            Op::Transpose { a } => {
                if self.nodes[*a].requires_grad {
                    let t = &self.nodes[*a].value;
                    let (r, c) = (t.rows(), t.cols());
                    let gt = kernels::transpose(gout, c, r);
                    add_into(&mut grads[*a], r * c, &mut |buf| axpy(buf, &gt));
                }
            }
            Op::Add { a, b } => {
                for side in [a, b] {
                    if self.nodes[*side].requires_grad {
                        add_into(&mut grads[*side], gout.len(), &mut |buf| axpy(buf, gout));
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].requires_grad {
                    let tb = &self.nodes[*b].value;
                    add_into(&mut grads[*a], gout.len(), &mut |buf| {
                        for ((d, &g), &y) in buf.iter_mut().zip(gout).zip(tb.data()) {
                            *d = *d + g * y;
                        }
                    });
                }
                if self.nodes[*b].requires_grad {
                    let ta = &self.nodes[*a].value;
                    add_into(&mut grads[*b], gout.len(), &mut |buf| {
                        for ((d, &g), &x) in buf.iter_mut().zip(gout).zip(ta.data()) {
                            *d = *d + g * x;
                        }
                    });
                }
            }
            Op::Scale { a, factor } => {
                if self.nodes[*a].requires_grad {
                    let f = *factor;
                    add_into(&mut grads[*a], gout.len(), &mut |buf| {
                        for (d, &g) in buf.iter_mut().zip(gout) {
                            *d = *d + g * f;
                        }
                    });
                }
            }
            Op::AddConst { a, .. } => {
                if self.nodes[*a].requires_grad {
                    add_into(&mut grads[*a], gout.len(), &mut |buf| axpy(buf, gout));
                }
            }
            Op::Activation { a, kind } => {
                if self.nodes[*a].requires_grad {
                    let ta = &self.nodes[*a].value;
                    let k = *kind;
                    add_into(&mut grads[*a], gout.len(), &mut |buf| {
                        for ((d, &g), &x) in buf.iter_mut().zip(gout).zip(ta.data()) {
                            *d = *d + g * kernels::act_backward(k, x);
                        }
                    });
                }
            }
            Op::Softmax { a } | Op::CausalSoftmax { a } => {
                if self.nodes[*a].requires_grad {
                    let p = &node.value;
                    let (r, c) = (p.rows(), p.cols());
                    add_into(&mut grads[*a], r * c, &mut |buf| {
                        for i in 0..r {
                            let p_row = p.row(i);
                            let g_row = &gout[i * c..(i + 1) * c];
                            let mut dot = R::zero();
                            for (&pv, &gv) in p_row.iter().zip(g_row) {
                                dot = dot + pv * gv;
                            }
                            let b_row = &mut buf[i * c..(i + 1) * c];
                            for ((d, &pv), &gv) in b_row.iter_mut().zip(p_row).zip(g_row) {
                                *d = *d + pv * (gv - dot);
                            }
                        }
                    });
                }
            }
            Op::LogSoftmax { a } => {
                if self.nodes[*a].requires_grad {
                    let y = &node.value;
                    let (r, c) = (y.rows(), y.cols());
                    add_into(&mut grads[*a], r * c, &mut |buf| {
                        for i in 0..r {
                            let y_row = y.row(i);
                            let g_row = &gout[i * c..(i + 1) * c];
                            let mut gsum = R::zero();
                            for &gv in g_row {
                                gsum = gsum + gv;
                            }
                            let b_row = &mut buf[i * c..(i + 1) * c];
                            for ((d, &yv), &gv) in b_row.iter_mut().zip(y_row).zip(g_row) {
                                *d = *d + gv - yv.exp() * gsum;
                            }
                        }
                    });
                }
            }
            Op::RmsNorm { a, gain, eps } => {
                let x = &self.nodes[*a].value;
                let g = &self.nodes[*gain].value;
                let (r, c) = (x.rows(), x.cols());
                let n = R::from_usize(c).unwrap();
                if self.nodes[*gain].requires_grad {
                    add_into(&mut grads[*gain], c, &mut |buf| {
                        for i in 0..r {
                            let x_row = x.row(i);
                            let mut ms = R::zero();
                            for &v in x_row {
                                ms = ms + v * v;
                            }
                            let inv = R::one() / (ms / n + *eps).sqrt();
                            let g_row = &gout[i * c..(i + 1) * c];
                            for ((d, &gv), &xv) in buf.iter_mut().zip(g_row).zip(x_row) {
                                *d = *d + gv * xv * inv;
                            }
                        }
                    });
                }
                if self.nodes[*a].requires_grad {
                    add_into(&mut grads[*a], r * c, &mut |buf| {
                        for i in 0..r {
                            let x_row = x.row(i);
                            let mut ms = R::zero();
                            for &v in x_row {
                                ms = ms + v * v;
                            }
                            let rms_sq = ms / n + *eps;
                            let inv = R::one() / rms_sq.sqrt();
                            let g_row = &gout[i * c..(i + 1) * c];
                            // s = Σ_k dy_k · gain_k · x_k
                            let mut s = R::zero();
                            for ((&gv, &xv), &gk) in g_row.iter().zip(x_row).zip(g.data()) {
                                s = s + gv * gk * xv;
                            }
                            let coef = s * inv / (rms_sq * n);
                            let b_row = &mut buf[i * c..(i + 1) * c];
                            for (j, (d, &xv)) in b_row.iter_mut().zip(x_row).enumerate() {
                                *d = *d + g_row[j] * g.data()[j] * inv - xv * coef;
                            }
                        }
                    });
                }
            }
            Op::SliceRows { a, start, .. } => {
                if self.nodes[*a].requires_grad {
                    let t = &self.nodes[*a].value;
                    let c = t.cols();
                    add_into(&mut grads[*a], t.numel(), &mut |buf| {
                        let dst = &mut buf[start * c..start * c + gout.len()];
                        axpy(dst, gout);
                    });
                }
            }
            Op::SliceCols { a, start, len } => {
                if self.nodes[*a].requires_grad {
                    let t = &self.nodes[*a].value;
                    let (r, c) = (t.rows(), t.cols());
                    add_into(&mut grads[*a], r * c, &mut |buf| {
                        for i in 0..r {
                            let src = &gout[i * len..(i + 1) * len];
                            let dst = &mut buf[i * c + start..i * c + start + len];
                            axpy(dst, src);
                        }
                    });
                }
            }
            Op::ConcatCols { parts } => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].value.cols();
                    if self.nodes[p].requires_grad {
                        let len = self.nodes[p].value.numel();
                        add_into(&mut grads[p], len, &mut |buf| {
                            for i in 0..rows {
                                let src = &gout[i * total + offset..i * total + offset + w];
                                let dst = &mut buf[i * w..(i + 1) * w];
                                axpy(dst, src);
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::SelectEntries { a, coords } => {
                if self.nodes[*a].requires_grad {
                    let t = &self.nodes[*a].value;
                    let c = t.cols();
                    add_into(&mut grads[*a], t.numel(), &mut |buf| {
                        for (k, &(i, j)) in coords.iter().enumerate() {
                            buf[i * c + j] = buf[i * c + j] + gout[k];
                        }
                    });
                }
            }
            Op::SumAll { a } => {
                if self.nodes[*a].requires_grad {
                    let len = self.nodes[*a].value.numel();
                    let g = gout[0];
                    add_into(&mut grads[*a], len, &mut |buf| {
                        for d in buf.iter_mut() {
                            *d = *d + g;
                        }
                    });
                }
            }
            Op::InjectRow { base, delta, row, cols } => {
                if self.nodes[*base].requires_grad {
                    add_into(&mut grads[*base], gout.len(), &mut |buf| axpy(buf, gout));
                }
                if self.nodes[*delta].requires_grad {
                    let width = node.value.cols();
                    add_into(&mut grads[*delta], cols.len(), &mut |buf| {
                        for (d, &c) in buf.iter_mut().zip(cols.iter()) {
                            *d = *d + gout[row * width + c];
                        }
                    });
                }
            }
        }
    }
}

fn axpy<R: Real>(dst: &mut [R], src: &[R]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn shape_err(op: &'static str, msg: &str, shape: &[usize]) -> Error {
    Error::Shape { op, detail: format!("{msg}, got {shape:?}") }
}
