use std::cell::RefCell;
use std::rc::Rc;

use super::{matmul_into, Float, Tensor};
use crate::error::{Error, Result};

/// Position of a node on its tape. Inputs always have smaller ids than
/// the nodes that consume them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: Float = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: Float = 0.044715;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, Float),
    AddRow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<Float>,
        rstd: Vec<Float>,
    },
    SoftmaxRows(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    MeanRows(NodeId),
    SliceCols { x: NodeId, start: usize },
    SliceRows { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    GatherRows { table: NodeId, indices: Vec<usize> },
    Permute { x: NodeId, src: Vec<usize> },
    Select { x: NodeId, index: usize },
    CrossEntropySum {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        probs: Vec<Float>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
///
/// A tape is single-owner and not `Sync`; run independent forwards on
/// independent tapes when parallelizing.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A tensor recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({:?}, shape={:?})", self.id, self.shape())
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

    /// Records a differentiable leaf.
    pub fn var(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> Rc<Tensor> {
        self.nodes.borrow()[id.0].value.clone()
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var { tape: self, id }
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|id| nodes[id.0].needs_grad)
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[NodeId]) -> Var<'_> {
        let needs = self.needs(inputs);
        self.push(value, op, needs)
    }

    fn check_owner(&self, v: &Var<'_>, op: &'static str) -> Result<()> {
        if !std::ptr::eq(self, v.tape) {
            return Err(Error::contract(format!("{op}: operand belongs to another tape")));
        }
        Ok(())
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no operands"))?;
        let rows = first.value().rows();
        let mut widths = Vec::with_capacity(parts.len());
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        for v in &values {
            v.expect_rank(2, "concat_cols")?;
            if v.rows() != rows {
                return Err(Error::shape("concat_cols", "row counts differ"));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.record(out, Op::ConcatCols(ids.clone()), &ids))
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no operands"))?;
        let cols = first.value().cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = p.value();
            v.expect_rank(2, "concat_rows")?;
            if v.cols() != cols {
                return Err(Error::shape("concat_rows", "column counts differ"));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.record(out, Op::ConcatRows(ids.clone()), &ids))
    }

    /// Embedding lookup: row `indices[i]` of `table` becomes output row `i`.
    pub fn gather_rows<'t>(&'t self, table: Var<'t>, indices: &[usize]) -> Result<Var<'t>> {
        let t = table.value();
        t.expect_rank(2, "gather_rows")?;
        if indices.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        let mut data = Vec::with_capacity(indices.len() * t.cols());
        for &i in indices {
            if i >= t.rows() {
                return Err(Error::shape(
                    "gather_rows",
                    format!("row {i} out of {}", t.rows()),
                ));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![indices.len(), t.cols()], data)?;
        Ok(self.record(
            out,
            Op::GatherRows {
                table: table.id,
                indices: indices.to_vec(),
            },
            &[table.id],
        ))
    }

    /// Reverse pass from a scalar root. Returns gradients for every node
    /// that depends on a differentiable leaf and is reachable from `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        self.check_owner(&root, "backward")?;
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id.0];
        if !root_node.value.is_scalar() {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !root_node.needs_grad {
            return Ok(Gradients { grads });
        }
        grads[root.id.0] = Some(Tensor::full(root_node.value.shape(), 1.0));
        for idx in (0..=root.id.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            backprop_node(&nodes, idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Result of [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id.0).and_then(|g| g.as_ref())
    }

    pub fn get_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of its shape when `v` does not influence the root.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    if !nodes[id.0].needs_grad {
        return;
    }
    match &mut grads[id.0] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn accumulate_with(
    nodes: &[Node],
    grads: &mut [Option<Tensor>],
    id: NodeId,
    f: impl FnOnce(&mut [Float]),
) {
    if !nodes[id.0].needs_grad {
        return;
    }
    let slot = &mut grads[id.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(nodes[id.0].value.shape()));
    }
    f(slot.as_mut().unwrap().data_mut());
}

fn backprop_node(nodes: &[Node], idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let node = &nodes[idx];
    let val = |id: NodeId| nodes[id.0].value.clone();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if nodes[a.0].needs_grad {
                accumulate(nodes, grads, *a, g.zip(&bv, "mul", |x, y| x * y)?);
            }
            if nodes[b.0].needs_grad {
                accumulate(nodes, grads, *b, g.zip(&av, "mul", |x, y| x * y)?);
            }
        }
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::MulScalar(a, s) => accumulate(nodes, grads, *a, g.map(|x| x * s)),
        Op::AddRow(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            let n = g.cols();
            accumulate_with(nodes, grads, *b, |gb| {
                for row in g.data().chunks(n) {
                    for (o, x) in gb.iter_mut().zip(row) {
                        *o += x;
                    }
                }
            });
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if nodes[a.0].needs_grad {
                let bt = bv.transpose()?;
                accumulate_with(nodes, grads, *a, |ga| {
                    matmul_into(g.data(), bt.data(), ga, m, n, k)
                });
            }
            if nodes[b.0].needs_grad {
                let at = av.transpose()?;
                accumulate_with(nodes, grads, *b, |gb| {
                    matmul_into(at.data(), g.data(), gb, k, m, n)
                });
            }
        }
        Op::Transpose(a) => accumulate(nodes, grads, *a, g.transpose()?),
        Op::Reshape(a) => {
            let shape = val(*a).shape().to_vec();
            accumulate(nodes, grads, *a, g.reshape(&shape)?);
        }
        Op::Relu(a) => {
            let av = val(*a);
            accumulate(nodes, grads, *a, g.zip(&av, "relu", |gx, x| if x > 0.0 { gx } else { 0.0 })?);
        }
        Op::Gelu(a) => {
            let av = val(*a);
            accumulate(nodes, grads, *a, g.zip(&av, "gelu", |gx, x| gx * gelu_grad(x))?);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gv = val(*gamma);
            let n = gv.numel();
            let gd = g.data();
            if nodes[gamma.0].needs_grad {
                accumulate_with(nodes, grads, *gamma, |gg| {
                    for (grow, hrow) in gd.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                });
            }
            if nodes[beta.0].needs_grad {
                accumulate_with(nodes, grads, *beta, |gb| {
                    for grow in gd.chunks(n) {
                        for (o, v) in gb.iter_mut().zip(grow) {
                            *o += v;
                        }
                    }
                });
            }
            if nodes[x.0].needs_grad {
                let gamma_d = gv.data();
                accumulate_with(nodes, grads, *x, |gx| {
                    let nf = n as Float;
                    for (r, ((gxrow, grow), hrow)) in gx
                        .chunks_mut(n)
                        .zip(gd.chunks(n))
                        .zip(xhat.chunks(n))
                        .enumerate()
                    {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..n {
                            let d = grow[j] * gamma_d[j];
                            mean_d += d;
                            mean_dh += d * hrow[j];
                        }
                        mean_d /= nf;
                        mean_dh /= nf;
                        for j in 0..n {
                            let d = grow[j] * gamma_d[j];
                            gxrow[j] += rstd[r] * (d - mean_d - hrow[j] * mean_dh);
                        }
                    }
                });
            }
        }
        Op::SoftmaxRows(a) => {
            let y = &node.value;
            let c = y.cols();
            accumulate_with(nodes, grads, *a, |ga| {
                for ((garow, grow), yrow) in ga.chunks_mut(c).zip(g.data().chunks(c)).zip(y.data().chunks(c)) {
                    let dot: Float = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        garow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            });
        }
        Op::Sum(a) => {
            let s = g.item();
            accumulate_with(nodes, grads, *a, |ga| ga.iter_mut().for_each(|x| *x += s));
        }
        Op::Mean(a) => {
            let n = val(*a).numel() as Float;
            let s = g.item() / n;
            accumulate_with(nodes, grads, *a, |ga| ga.iter_mut().for_each(|x| *x += s));
        }
        Op::MeanRows(a) => {
            let av = val(*a);
            let (m, n) = (av.rows(), av.cols());
            let inv = 1.0 / m as Float;
            accumulate_with(nodes, grads, *a, |ga| {
                for row in ga.chunks_mut(n) {
                    for (o, x) in row.iter_mut().zip(g.data()) {
                        *o += x * inv;
                    }
                }
            });
        }
        Op::SliceCols { x, start } => {
            let n = val(*x).cols();
            let w = g.cols();
            accumulate_with(nodes, grads, *x, |gx| {
                for (row, grow) in gx.chunks_mut(n).zip(g.data().chunks(w)) {
                    for (o, v) in row[*start..start + w].iter_mut().zip(grow) {
                        *o += v;
                    }
                }
            });
        }
        Op::SliceRows { x, start } => {
            let n = g.cols();
            accumulate_with(nodes, grads, *x, |gx| {
                for (o, v) in gx[start * n..start * n + g.numel()].iter_mut().zip(g.data()) {
                    *o += v;
                }
            });
        }
        Op::ConcatCols(ids) => {
            let total = g.cols();
            let mut offset = 0;
            for id in ids {
                let w = nodes[id.0].value.cols();
                accumulate_with(nodes, grads, *id, |gi| {
                    for (row, grow) in gi.chunks_mut(w).zip(g.data().chunks(total)) {
                        for (o, v) in row.iter_mut().zip(&grow[offset..offset + w]) {
                            *o += v;
                        }
                    }
                });
                offset += w;
            }
        }
        Op::ConcatRows(ids) => {
            let mut offset = 0;
            for id in ids {
                let len = nodes[id.0].value.numel();
                accumulate_with(nodes, grads, *id, |gi| {
                    for (o, v) in gi.iter_mut().zip(&g.data()[offset..offset + len]) {
                        *o += v;
                    }
                });
                offset += len;
            }
        }
        Op::GatherRows { table, indices } => {
            let n = g.cols();
            accumulate_with(nodes, grads, *table, |gt| {
                for (r, &i) in indices.iter().enumerate() {
                    for (o, v) in gt[i * n..(i + 1) * n].iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            });
        }
        Op::Permute { x, src } => {
            accumulate_with(nodes, grads, *x, |gx| {
                for (i, &s) in src.iter().enumerate() {
                    gx[s] += g.data()[i];
                }
            });
        }
        Op::Select { x, index } => {
            let s = g.item();
            accumulate_with(nodes, grads, *x, |gx| gx[*index] += s);
        }
        Op::CrossEntropySum {
            logits,
            targets,
            probs,
        } => {
            let s = g.item();
            let v = nodes[logits.0].value.cols();
            accumulate_with(nodes, grads, *logits, |gl| {
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = t else { continue };
                    let row = &mut gl[r * v..(r + 1) * v];
                    for j in 0..v {
                        let onehot = if j == *t { 1.0 } else { 0.0 };
                        row[j] += s * (probs[r * v + j] - onehot);
                    }
                }
            });
        }
    }
    Ok(())
}

fn gelu(x: Float) -> Float {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: Float) -> Float {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn same_tape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        self.tape.check_owner(other, op)
    }

    fn binary(
        self,
        other: Var<'t>,
        op: &'static str,
        f: impl Fn(Float, Float) -> Float,
        make: fn(NodeId, NodeId) -> Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other, op)?;
        let out = self.value().zip(&other.value(), op, f)?;
        Ok(self.tape.record(out, make(self.id, other.id), &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn add_scalar(self, s: Float) -> Var<'t> {
        let out = self.value().map(|x| x + s);
        self.tape.record(out, Op::AddScalar(self.id), &[self.id])
    }

    pub fn mul_scalar(self, s: Float) -> Var<'t> {
        let out = self.value().map(|x| x * s);
        self.tape.record(out, Op::MulScalar(self.id, s), &[self.id])
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&row, "add_row")?;
        let x = self.value();
        let b = row.value();
        x.expect_rank(2, "add_row")?;
        if b.numel() != x.cols() {
            return Err(Error::shape(
                "add_row",
                format!("row of {} onto {:?}", b.numel(), x.shape()),
            ));
        }
        let n = x.cols();
        let mut data = x.data().to_vec();
        for r in data.chunks_mut(n) {
            for (o, v) in r.iter_mut().zip(b.data()) {
                *o += v;
            }
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.tape.record(out, Op::AddRow(self.id, row.id), &[self.id, row.id]))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other, "matmul")?;
        let out = self.value().matmul(&other.value())?;
        Ok(self
            .tape
            .record(out, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let out = self.value().transpose()?;
        Ok(self.tape.record(out, Op::Transpose(self.id), &[self.id]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.record(out, Op::Reshape(self.id), &[self.id]))
    }

    pub fn relu(self) -> Var<'t> {
        let out = self.value().map(|x| x.max(0.0));
        self.tape.record(out, Op::Relu(self.id), &[self.id])
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        let out = self.value().map(gelu);
        self.tape.record(out, Op::Gelu(self.id), &[self.id])
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: Float) -> Result<Var<'t>> {
        self.same_tape(&gamma, "layer_norm")?;
        self.same_tape(&beta, "layer_norm")?;
        let x = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let n = x.cols();
        if gv.numel() != n || bv.numel() != n {
            return Err(Error::shape(
                "layer_norm",
                format!("affine params of {} for last axis {n}", gv.numel()),
            ));
        }
        let rows = x.numel() / n;
        let mut xhat = Vec::with_capacity(x.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks(n) {
            let mean = row.iter().sum::<Float>() / n as Float;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Float>() / n as Float;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.tape.record(
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            &[self.id, gamma.id, beta.id],
        ))
    }

    /// Row-wise softmax, stabilized by subtracting the row maximum.
    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let x = self.value();
        let out = softmax_rows(&x)?;
        Ok(self.tape.record(out, Op::SoftmaxRows(self.id), &[self.id]))
    }

    pub fn sum(self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.record(out, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.value();
        let out = Tensor::scalar(v.sum() / v.numel() as Float);
        self.tape.record(out, Op::Mean(self.id), &[self.id])
    }

    /// Mean over rows: `[m x n] -> [1 x n]`.
    pub fn mean_rows(self) -> Result<Var<'t>> {
        let x = self.value();
        x.expect_rank(2, "mean_rows")?;
        let (m, n) = (x.rows(), x.cols());
        let mut acc = vec![0.0; n];
        for row in x.data().chunks(n) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= m as Float);
        let out = Tensor::new(vec![1, n], acc)?;
        Ok(self.tape.record(out, Op::MeanRows(self.id), &[self.id]))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        x.expect_rank(2, "slice_cols")?;
        if start >= end || end > x.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {end}) of {} columns", x.cols()),
            ));
        }
        let mut data = Vec::with_capacity(x.rows() * (end - start));
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row(r)[start..end]);
        }
        let out = Tensor::new(vec![x.rows(), end - start], data)?;
        Ok(self
            .tape
            .record(out, Op::SliceCols { x: self.id, start }, &[self.id]))
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        x.expect_rank(2, "slice_rows")?;
        if start >= end || end > x.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("[{start}, {end}) of {} rows", x.rows()),
            ));
        }
        let n = x.cols();
        let out = Tensor::new(vec![end - start, n], x.data()[start * n..end * n].to_vec())?;
        Ok(self
            .tape
            .record(out, Op::SliceRows { x: self.id, start }, &[self.id]))
    }

    /// Output element `i` is input element `src[i]` (flat row-major indices).
    pub fn permute(self, src: Vec<usize>, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if src.len() != x.numel() || src.iter().any(|&s| s >= x.numel()) {
            return Err(Error::shape("permute", "index map does not cover the input"));
        }
        let data = src.iter().map(|&s| x.data()[s]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self
            .tape
            .record(out, Op::Permute { x: self.id, src }, &[self.id]))
    }

    /// One element (flat index) as a scalar.
    pub fn select(self, index: usize) -> Result<Var<'t>> {
        let x = self.value();
        if index >= x.numel() {
            return Err(Error::shape(
                "select",
                format!("index {index} of {}", x.numel()),
            ));
        }
        let out = Tensor::scalar(x.data()[index]);
        Ok(self
            .tape
            .record(out, Op::Select { x: self.id, index }, &[self.id]))
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax
    /// of `self`; rows whose target is `None` contribute nothing.
    pub fn cross_entropy_sum(self, targets: &[Option<usize>]) -> Result<Var<'t>> {
        let x = self.value();
        x.expect_rank(2, "cross_entropy")?;
        if targets.len() != x.rows() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {} rows", targets.len(), x.rows()),
            ));
        }
        let v = x.cols();
        let probs = softmax_rows(&x)?;
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                if *t >= v {
                    return Err(Error::shape("cross_entropy", format!("target {t} of {v}")));
                }
                // log-softmax directly keeps tiny probabilities finite
                let row = x.row(r);
                let max = row.iter().cloned().fold(Float::NEG_INFINITY, Float::max);
                let lse = max + row.iter().map(|z| (z - max).exp()).sum::<Float>().ln();
                loss += lse - row[*t];
            }
        }
        Ok(self.tape.record(
            Tensor::scalar(loss),
            Op::CrossEntropySum {
                logits: self.id,
                targets: targets.to_vec(),
                probs: probs.into_data(),
            },
            &[self.id],
        ))
    }
}

pub(crate) fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    x.expect_rank(2, "softmax_rows")?;
    let c = x.cols();
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(c) {
        let max = row.iter().cloned().fold(Float::NEG_INFINITY, Float::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Tensor::new(x.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[Float]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_uniform_row() {
        let tape = Tape::new();
        let y = tape.var(t(&[&[0.0, 0.0, 0.0]])).softmax_rows().unwrap().value();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_large_logit_does_not_overflow() {
        let tape = Tape::new();
        let y = tape.var(t(&[&[1e4, 0.0]])).softmax_rows().unwrap().value();
        assert!(y.data().iter().all(|v| v.is_finite()));
        assert!((y.data()[0] - 1.0).abs() < 1e-6);
        assert!(y.data()[1].abs() < 1e-6);
    }

    #[test]
    fn softmax_ln2_ratio() {
        let tape = Tape::new();
        let y = tape
            .var(t(&[&[(2.0 as Float).ln(), 0.0]]))
            .softmax_rows()
            .unwrap()
            .value();
        assert!((y.data()[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((y.data()[1] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn relu_sign_cases_and_idempotence() {
        let tape = Tape::new();
        let x = tape.var(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = x.relu();
        assert_eq!(y.value().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(y.relu().value().data(), y.value().data());
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let tape = Tape::new();
        let x = tape.var(t(&[&[5.0, 5.0, 5.0, 5.0]]));
        let g = tape.var(Tensor::ones(&[4]));
        let b = tape.var(Tensor::zeros(&[4]));
        let y = x.layer_norm(g, b, 1e-5).unwrap().value();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12 && v.is_finite()));
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let tape = Tape::new();
        let x = tape.var(t(&[&[1.0, 2.0, 3.0, 10.0], &[-4.0, 0.5, 0.5, 7.0]]));
        let g = tape.var(Tensor::ones(&[4]));
        let b = tape.var(Tensor::zeros(&[4]));
        let y = x.layer_norm(g, b, 1e-5).unwrap().value();
        for r in 0..2 {
            let row = y.row(r);
            let mean: Float = row.iter().sum::<Float>() / 4.0;
            let var: Float = row.iter().map(|v| (v - mean).powi(2)).sum::<Float>() / 4.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn gelu_fixed_point_at_zero() {
        let tape = Tape::new();
        let y = tape.var(Tensor::scalar(0.0)).gelu().value();
        assert_eq!(y.item(), 0.0);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.var(Tensor::from_fn(&[3, 4], |i| i as Float * 0.3 - 1.0));
        let root = x.sum();
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::ones(&[3, 4]));
        assert_eq!(grads.get(root).unwrap().item(), 1.0);
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn intermediate_nodes_get_gradients() {
        let tape = Tape::new();
        let x = tape.var(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let h = x.mul_scalar(3.0);
        let y = h.mul(h).unwrap().sum();
        let grads = tape.backward(y).unwrap();
        // dy/dh = 2h
        assert_eq!(grads.get(h).unwrap().data(), &[6.0, -12.0]);
        assert_eq!(grads.get(x).unwrap().data(), &[18.0, -36.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let tape = Tape::new();
        let x = tape.var(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_rejects_foreign_root() {
        let a = Tape::new();
        let b = Tape::new();
        let x = b.var(Tensor::scalar(1.0));
        assert!(matches!(a.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = x.mul(c).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().item(), 5.0);
    }

    #[test]
    fn cross_entropy_ignores_masked_rows() {
        let tape = Tape::new();
        let logits = tape.var(t(&[&[1.0, 2.0, 0.5], &[3.0, -1.0, 0.0]]));
        let loss = logits.cross_entropy_sum(&[Some(1), None]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(logits).unwrap();
        assert!(g.row(1).iter().all(|&v| v == 0.0));
        assert!(g.row(0).iter().sum::<Float>().abs() < 1e-12);
    }
}
