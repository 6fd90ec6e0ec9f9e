//! Reverse-mode differentiation on a linear tape.
//!
//! Every node carries `requires_grad`, which is true iff the node is a
//! tunable parameter or one of its parents requires a gradient. The backward
//! pass walks the tape in reverse and only ever visits nodes with
//! `requires_grad` set, so a frozen subgraph whose inputs are constants is
//! never touched. Each visit is logged together with the matrix-product FLOPs
//! it spent, which is what [`crate::accounting`] is checked against.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::{ParamId, ParamStore};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Region of the model a node was recorded in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Scope {
    #[default]
    Input,
    Tokenizer,
    PosEmbed,
    /// Backbone Transformer block, 1-based.
    Block(usize),
    FinalNorm,
    /// Side-network block, 1-based.
    Side(usize),
    Head,
    Loss,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Constant,
    Param,
    MatMul,
    MatMulNT,
    Add,
    Sub,
    Scale,
    AddRowBias,
    LeakyRelu,
    RowSoftmax,
    LayerNorm,
    GroupMax,
    RowMean,
    Gather,
    ConcatCols,
    SliceCols,
    Dropout,
    CrossEntropy,
    Sum,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Constant,
    Param,
    MatMul,
    MatMulNT,
    Add,
    Sub,
    Scale(T),
    AddRowBias,
    LeakyRelu(T),
    RowSoftmax,
    LayerNorm { normalized: Matrix<T>, inv_std: Vec<T> },
    GroupMax { argmax: Vec<usize> },
    RowMean,
    Gather(Vec<usize>),
    ConcatCols,
    SliceCols { start: usize },
    Dropout(Vec<T>),
    CrossEntropy { probs: Vec<T>, label: usize },
    Sum,
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Constant => OpKind::Constant,
            Op::Param => OpKind::Param,
            Op::MatMul => OpKind::MatMul,
            Op::MatMulNT => OpKind::MatMulNT,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Scale(_) => OpKind::Scale,
            Op::AddRowBias => OpKind::AddRowBias,
            Op::LeakyRelu(_) => OpKind::LeakyRelu,
            Op::RowSoftmax => OpKind::RowSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::GroupMax { .. } => OpKind::GroupMax,
            Op::RowMean => OpKind::RowMean,
            Op::Gather(_) => OpKind::Gather,
            Op::ConcatCols => OpKind::ConcatCols,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::Dropout(_) => OpKind::Dropout,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum => OpKind::Sum,
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Matrix<T>,
    requires_grad: bool,
    grad: Option<Matrix<T>>,
    op: Op<T>,
    parents: Vec<NodeId>,
    scope: Scope,
    forward_flops: u64,
}

/// One entry of the backward visit log.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Visit {
    pub node: NodeId,
    pub op: OpKind,
    pub scope: Scope,
    /// Matrix-product FLOPs spent producing parent gradients.
    pub flops: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Elision {
    /// Visit only nodes that require a gradient.
    #[default]
    Enabled,
    /// Visit every node reachable from the loss, frozen or not.
    Disabled,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    scope: Scope,
    bound: HashMap<ParamId, NodeId>,
    visits: Vec<Visit>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), scope: Scope::Input, bound: HashMap::new(), visits: Vec::new() }
    }

    /// Sets the scope for subsequently recorded nodes, returning the old one.
    pub fn set_scope(&mut self, scope: Scope) -> Scope {
        std::mem::replace(&mut self.scope, scope)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Matrix<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn scope_of(&self, id: NodeId) -> Scope {
        self.nodes[id.0].scope
    }

    pub fn op_of(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn parents_of(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].parents
    }

    pub fn visit_log(&self) -> &[Visit] {
        &self.visits
    }

    /// `(scope, forward FLOPs)` for every matrix-product node.
    pub fn forward_flops(&self) -> impl Iterator<Item = (Scope, u64)> + '_ {
        self.nodes.iter().filter(|n| n.forward_flops > 0).map(|n| (n.scope, n.forward_flops))
    }

    pub fn total_forward_flops(&self) -> u64 {
        self.nodes.iter().map(|n| n.forward_flops).sum()
    }

    pub fn total_backward_flops(&self) -> u64 {
        self.visits.iter().map(|v| v.flops).sum()
    }

    /// Node bound to a stored parameter on this tape, if any.
    pub fn param_node(&self, id: ParamId) -> Option<NodeId> {
        self.bound.get(&id).copied()
    }

    /// Gradient of a stored parameter after `backward`.
    pub fn param_grad(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.param_node(id).and_then(|n| self.grad(n))
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, parents: Vec<NodeId>, flops: u64) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_with(value, op, parents, flops, requires_grad)
    }

    fn push_with(
        &mut self,
        value: Matrix<T>,
        op: Op<T>,
        parents: Vec<NodeId>,
        forward_flops: u64,
        requires_grad: bool,
    ) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
            parents,
            scope: self.scope,
            forward_flops,
        });
        id
    }

    pub fn constant(&mut self, value: Matrix<T>) -> NodeId {
        self.push_with(value, Op::Constant, Vec::new(), 0, false)
    }

    /// Binds a stored parameter to this tape. Repeated calls return the same
    /// node, so parameters shared between blocks accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&node) = self.bound.get(&id) {
            return node;
        }
        let value = store.value(id).clone();
        let node = self.push_with(value, Op::Param, Vec::new(), 0, !store.is_frozen(id));
        self.bound.insert(id, node);
        node
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ((n, p), (p2, q)) = (self.shape(a), self.shape(b));
        if p != p2 {
            return Err(Error::dim("matmul", format!("{n}x{p} by {p2}x{q}")));
        }
        let value = self.value(a).matmul_unchecked(self.value(b));
        Ok(self.push(value, Op::MatMul, vec![a, b], 2 * (n * p * q) as u64))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ((n, p), (m, p2)) = (self.shape(a), self.shape(b));
        if p != p2 {
            return Err(Error::dim("matmul_nt", format!("{n}x{p} by ({m}x{p2})^T")));
        }
        let value = self.value(a).matmul_nt_unchecked(self.value(b));
        Ok(self.push(value, Op::MatMulNT, vec![a, b], 2 * (n * p * m) as u64))
    }

    /// `x·W (+ b)`, with `b` broadcast over rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        if !self.value(x).is_finite() {
            return Err(Error::Numeric { op: "linear" });
        }
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add, vec![a, b], 0))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub, vec![a, b], 0))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let value = self.value(a).map(|v| v * s);
        self.push(value, Op::Scale(s), vec![a], 0)
    }

    pub fn add_row_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let ((_, q), (br, bc)) = (self.shape(x), self.shape(b));
        if br != 1 || bc != q {
            return Err(Error::dim("add_row_bias", format!("bias {br}x{bc} for width {q}")));
        }
        let bias = self.value(b).as_slice().to_vec();
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            for (v, &bb) in value.row_mut(r).iter_mut().zip(&bias) {
                *v = *v + bb;
            }
        }
        Ok(self.push(value, Op::AddRowBias, vec![x, b], 0))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: T) -> NodeId {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        self.push(value, Op::LeakyRelu(slope), vec![x], 0)
    }

    /// Leaky rectifier with the crate-wide slope.
    pub fn act(&mut self, x: NodeId) -> NodeId {
        self.leaky_relu(x, T::lit(LEAKY_SLOPE))
    }

    pub fn row_softmax(&mut self, x: NodeId) -> NodeId {
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        self.push(value, Op::RowSoftmax, vec![x], 0)
    }

    /// Per-row normalization over the feature axis, then `γ ⊙ x̂ + β`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        for p in [gamma, beta] {
            if self.shape(p) != (1, cols) {
                return Err(Error::dim("layer_norm", format!("{:?} for width {cols}", self.shape(p))));
            }
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let width = T::lit(cols as f64);
        let xv = self.value(x);
        let mut normalized = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / width;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / width;
            let inv = T::one() / (var + eps).sqrt();
            for (o, &v) in normalized.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let g = self.value(gamma).as_slice();
        let b = self.value(beta).as_slice();
        let mut value = normalized.clone();
        for r in 0..rows {
            for ((v, &gg), &bb) in value.row_mut(r).iter_mut().zip(g).zip(b) {
                *v = *v * gg + bb;
            }
        }
        Ok(self.push(value, Op::LayerNorm { normalized, inv_std }, vec![x, gamma, beta], 0))
    }

    /// Column-wise max over consecutive runs of `group` rows.
    pub fn group_max(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        if group == 0 || rows % group != 0 {
            return Err(Error::dim("group_max", format!("{rows} rows in groups of {group}")));
        }
        let xv = self.value(x);
        let groups = rows / group;
        let mut value = Matrix::zeros(groups, cols);
        let mut argmax = vec![0usize; groups * cols];
        for g in 0..groups {
            for c in 0..cols {
                let mut best = g * group;
                for r in g * group + 1..(g + 1) * group {
                    if xv.get(r, c) > xv.get(best, c) {
                        best = r;
                    }
                }
                value.set(g, c, xv.get(best, c));
                argmax[g * cols + c] = best;
            }
        }
        Ok(self.push(value, Op::GroupMax { argmax }, vec![x], 0))
    }

    /// Column-wise max over all rows, as a 1×cols row.
    pub fn row_max_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let rows = self.shape(x).0;
        self.group_max(x, rows)
    }

    pub fn row_mean_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, _) = self.shape(x);
        if rows == 0 {
            return Err(Error::dim("row_mean_pool", "no rows"));
        }
        let mut value = self.value(x).column_sums();
        let inv = T::one() / T::lit(rows as f64);
        for v in value.as_mut_slice() {
            *v = *v * inv;
        }
        Ok(self.push(value, Op::RowMean, vec![x], 0))
    }

    pub fn gather_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Index { index: bad, len: rows });
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(xv.row(i));
        }
        let value = Matrix::from_vec(indices.len(), cols, data)?;
        Ok(self.push(value, Op::Gather(indices.to_vec()), vec![x], 0))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = parts.first().map(|&p| self.shape(p).0).unwrap_or(0);
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row(r);
                value.row_mut(r)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        Ok(self.push(value, Op::ConcatCols, parts.to_vec(), 0))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        if start + len > cols {
            return Err(Error::dim("slice_cols", format!("{start}+{len} > {cols}")));
        }
        let xv = self.value(x);
        let value = Matrix::from_fn(rows, len, |r, c| xv.get(r, start + c));
        Ok(self.push(value, Op::SliceCols { start }, vec![x], 0))
    }

    /// Multiplies by a fixed mask (already scaled for inverted dropout).
    pub fn dropout(&mut self, x: NodeId, mask: Vec<T>) -> Result<NodeId> {
        if mask.len() != self.value(x).len() {
            return Err(Error::dim("dropout", "mask length"));
        }
        let xv = self.value(x);
        let data = xv.as_slice().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Matrix::from_vec(xv.rows(), xv.cols(), data)?;
        Ok(self.push(value, Op::Dropout(mask), vec![x], 0))
    }

    /// `−log softmax(logits)[label]` for a single row of logits.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let (rows, classes) = self.shape(logits);
        if rows != 1 {
            return Err(Error::dim("cross_entropy", format!("expected one row, got {rows}")));
        }
        if label >= classes {
            return Err(Error::Label { label, classes });
        }
        let z = self.value(logits).as_slice();
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        let loss = total.ln() + max - z[label];
        let probs = exps.iter().map(|&e| e / total).collect();
        let value = Matrix::filled(1, 1, loss);
        Ok(self.push(value, Op::CrossEntropy { probs, label }, vec![logits], 0))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Matrix::filled(1, 1, self.value(x).sum());
        self.push(value, Op::Sum, vec![x], 0)
    }

    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.backward_with(loss, Elision::Enabled)
    }

    /// Populates gradients of every node on a path from a tunable parameter
    /// to `loss`. With [`Elision::Disabled`] frozen nodes are visited too,
    /// which changes nothing for tunable gradients.
    pub fn backward_with(&mut self, loss: NodeId, elision: Elision) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Contract("loss does not depend on any tunable parameter".into()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.visits.clear();
        let traverse =
            |n: &Node<T>| -> bool { elision == Elision::Disabled || n.requires_grad };

        self.nodes[loss.0].grad = Some(Matrix::filled(1, 1, T::one()));
        for i in (0..=loss.0).rev() {
            if !traverse(&self.nodes[i]) {
                continue;
            }
            let Some(upstream) = self.nodes[i].grad.take() else {
                continue;
            };
            let node = &self.nodes[i];
            let wanted: Vec<bool> =
                node.parents.iter().map(|p| traverse(&self.nodes[p.0])).collect();
            let wanted_count = wanted.iter().filter(|&&w| w).count() as u64;
            let flops = match node.op {
                Op::MatMul | Op::MatMulNT => node.forward_flops * wanted_count,
                _ => 0,
            };
            self.visits.push(Visit { node: NodeId(i), op: node.op.kind(), scope: node.scope, flops });

            let contributions = self.parent_grads(i, &upstream, &wanted);
            let parents = self.nodes[i].parents.clone();
            self.nodes[i].grad = Some(upstream);
            for (p, g) in parents.into_iter().zip(contributions) {
                if let Some(g) = g {
                    match &mut self.nodes[p.0].grad {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    fn parent_grads(&self, i: usize, dy: &Matrix<T>, wanted: &[bool]) -> Vec<Option<Matrix<T>>> {
        let node = &self.nodes[i];
        let pv = |k: usize| &self.nodes[node.parents[k].0].value;
        let mut out: Vec<Option<Matrix<T>>> = vec![None; node.parents.len()];
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul => {
                if wanted[0] {
                    out[0] = Some(dy.matmul_nt_unchecked(pv(1)));
                }
                if wanted[1] {
                    out[1] = Some(pv(0).matmul_tn_unchecked(dy));
                }
            }
            Op::MatMulNT => {
                if wanted[0] {
                    out[0] = Some(dy.matmul_unchecked(pv(1)));
                }
                if wanted[1] {
                    out[1] = Some(dy.matmul_tn_unchecked(pv(0)));
                }
            }
            Op::Add => {
                for k in 0..2 {
                    if wanted[k] {
                        out[k] = Some(dy.clone());
                    }
                }
            }
            Op::Sub => {
                if wanted[0] {
                    out[0] = Some(dy.clone());
                }
                if wanted[1] {
                    out[1] = Some(dy.map(|v| -v));
                }
            }
            Op::Scale(s) => {
                let s = *s;
                out[0] = Some(dy.map(|v| v * s));
            }
            Op::AddRowBias => {
                if wanted[0] {
                    out[0] = Some(dy.clone());
                }
                if wanted[1] {
                    out[1] = Some(dy.column_sums());
                }
            }
            Op::LeakyRelu(slope) => {
                let slope = *slope;
                out[0] = dy.zip_map(pv(0), |g, x| if x > T::zero() { g } else { g * slope }).ok();
            }
            Op::RowSoftmax => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: T = y.row(r).iter().zip(dy.row(r)).map(|(&a, &b)| a * b).sum();
                    for ((o, &yy), &g) in dx.row_mut(r).iter_mut().zip(y.row(r)).zip(dy.row(r)) {
                        *o = yy * (g - dot);
                    }
                }
                out[0] = Some(dx);
            }
            Op::LayerNorm { normalized, inv_std } => {
                let gamma = pv(1).as_slice();
                let (rows, cols) = normalized.shape();
                if wanted[0] {
                    let width = T::lit(cols as f64);
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let xh = normalized.row(r);
                        let dxh: Vec<T> = dy.row(r).iter().zip(gamma).map(|(&g, &ga)| g * ga).collect();
                        let mean_dxh = dxh.iter().copied().sum::<T>() / width;
                        let mean_dxh_xh =
                            dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / width;
                        for ((o, &d), &h) in dx.row_mut(r).iter_mut().zip(&dxh).zip(xh) {
                            *o = inv_std[r] * (d - mean_dxh - h * mean_dxh_xh);
                        }
                    }
                    out[0] = Some(dx);
                }
                if wanted[1] {
                    let mut dg = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for ((o, &g), &h) in
                            dg.as_mut_slice().iter_mut().zip(dy.row(r)).zip(normalized.row(r))
                        {
                            *o = *o + g * h;
                        }
                    }
                    out[1] = Some(dg);
                }
                if wanted[2] {
                    out[2] = Some(dy.column_sums());
                }
            }
            Op::GroupMax { argmax } => {
                let (rows, cols) = pv(0).shape();
                let mut dx = Matrix::zeros(rows, cols);
                for (slot, (&src, &g)) in argmax.iter().zip(dy.as_slice()).enumerate() {
                    let c = slot % cols;
                    dx.set(src, c, dx.get(src, c) + g);
                }
                out[0] = Some(dx);
            }
            Op::RowMean => {
                let (rows, cols) = pv(0).shape();
                let inv = T::one() / T::lit(rows as f64);
                let g = dy.as_slice();
                out[0] = Some(Matrix::from_fn(rows, cols, |_, c| g[c] * inv));
            }
            Op::Gather(indices) => {
                let (rows, cols) = pv(0).shape();
                let mut dx = Matrix::zeros(rows, cols);
                for (r, &src) in indices.iter().enumerate() {
                    for (o, &g) in dx.row_mut(src).iter_mut().zip(dy.row(r)) {
                        *o = *o + g;
                    }
                }
                out[0] = Some(dx);
            }
            Op::ConcatCols => {
                let mut offset = 0;
                for (k, p) in node.parents.iter().enumerate() {
                    let (rows, cols) = self.nodes[p.0].value.shape();
                    if wanted[k] {
                        out[k] = Some(Matrix::from_fn(rows, cols, |r, c| dy.get(r, offset + c)));
                    }
                    offset += cols;
                }
            }
            Op::SliceCols { start } => {
                let (rows, cols) = pv(0).shape();
                let mut dx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    dx.row_mut(r)[*start..*start + dy.cols()].copy_from_slice(dy.row(r));
                }
                out[0] = Some(dx);
            }
            Op::Dropout(mask) => {
                let data = dy.as_slice().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                out[0] = Matrix::from_vec(dy.rows(), dy.cols(), data).ok();
            }
            Op::CrossEntropy { probs, label } => {
                let g = dy.get(0, 0);
                let data = probs
                    .iter()
                    .enumerate()
                    .map(|(c, &p)| g * (if c == *label { p - T::one() } else { p }))
                    .collect();
                out[0] = Matrix::from_vec(1, probs.len(), data).ok();
            }
            Op::Sum => {
                let (rows, cols) = pv(0).shape();
                out[0] = Some(Matrix::filled(rows, cols, dy.get(0, 0)));
            }
        }
        for (o, &w) in out.iter_mut().zip(wanted) {
            if !w {
                *o = None;
            }
        }
        out
    }
}
