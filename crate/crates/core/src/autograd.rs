//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends a node to the [`Graph`]; [`Graph::backward`] walks the
//! nodes in reverse recording order and applies each node's backward rule once,
//! so a value used `k` times receives the sum of its `k` contributions.
//!
//! Broadcasting is limited to scalar scaling and per-row bias addition.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{kernels, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Square(Var),
    CrossEntropy {
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Scale(..) => "scale",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Gelu(..) => "gelu",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::GatherRows { .. } => "gather_rows",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Square(..) => "square",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Which keys each query row may attend to in a square score matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    None,
    /// Row `i` sees columns `0..=i`.
    Causal,
    /// Row `i` sees only the contiguous block of this size that contains it.
    Blocks(usize),
}

impl Mask {
    fn range(self, i: usize, d: usize) -> (usize, usize) {
        match self {
            Mask::None => (0, d),
            Mask::Causal => (0, i + 1),
            Mask::Blocks(b) => (i / b * b, i / b * b + b),
        }
    }
}

/// A composite block recorded on the tape (e.g. one cross-attention call),
/// with the vars it consumed and produced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockRecord {
    pub kind: &'static str,
    pub label: String,
    pub query: Var,
    pub key_value: Var,
    pub output: Var,
}

/// The compute tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: Vec<(ParamId, Var)>,
    blocks: Vec<BlockRecord>,
    no_grad: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose parameters and inputs never require gradients.
    pub fn inference() -> Self {
        Graph {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated at `v` by the last backward pass, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn blocks(&self) -> &[BlockRecord] {
        &self.blocks
    }

    pub fn record_block(&mut self, kind: &'static str, label: impl Into<String>, query: Var, key_value: Var, output: Var) {
        self.blocks.push(BlockRecord {
            kind,
            label: label.into(),
            query,
            key_value,
            output,
        });
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = !self.no_grad && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    /// A differentiable leaf (gradient is recorded for it).
    pub fn input(&mut self, t: Tensor) -> Var {
        let rg = !self.no_grad;
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Binds a parameter as a leaf. Repeated binds return the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.bound.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let rg = !self.no_grad && store.is_trainable(id);
        let v = self.push(store.value(id).clone(), Op::Leaf, rg);
        self.bound.push((id, v));
        v
    }

    pub fn bound_params(&self) -> &[(ParamId, Var)] {
        &self.bound
    }

    // ---- ops -------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(out, Op::MatMul(a, b), &[a, b]))
    }

    /// a[m,k] · b[n,k]ᵀ, the shape of a linear layer with weight `[d_out, d_in]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim(
                "matmul_bt",
                format!("{:?} x {:?}^T", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push_op(t, Op::MatMulBt(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.value(a).zip(self.value(b), |x, y| x + y)?;
        Ok(self.push_op(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.value(a).zip(self.value(b), |x, y| x - y)?;
        Ok(self.push_op(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.value(a).zip(self.value(b), |x, y| x * y)?;
        Ok(self.push_op(t, Op::Mul(a, b), &[a, b]))
    }

    /// Adds `bias` (any shape holding exactly `d` values) to every row of `x[.., d]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(bias).len() != d {
            return Err(Error::dim(
                "add_row_bias",
                format!("bias {:?} for rows of width {d}", self.shape(bias)),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_exact_mut(d) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        Ok(self.push_op(t, Op::AddRowBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push_op(t, Op::Scale(x, c), &[x])
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.softmax_impl(x, Mask::None)
    }

    /// Row-wise softmax of a square `[n, n]` score matrix with entries `j > i` masked out.
    pub fn softmax_causal(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, Mask::Causal)
    }

    /// Row-wise softmax of a square score matrix restricted by `mask`; masked entries are 0.
    pub fn softmax_masked(&mut self, x: Var, mask: Mask) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if mask != Mask::None && r != c {
            return Err(Error::dim("softmax_masked", format!("scores must be square, got [{r}, {c}]")));
        }
        if let Mask::Blocks(b) = mask {
            if b == 0 || r % b != 0 {
                return Err(Error::dim("softmax_masked", format!("block size {b} does not divide {r}")));
            }
        }
        Ok(self.softmax_impl(x, mask))
    }

    fn softmax_impl(&mut self, x: Var, mask: Mask) -> Var {
        let mut t = self.value(x).clone();
        let d = t.last_dim();
        for (i, row) in t.data_mut().chunks_exact_mut(d).enumerate() {
            let (lo, hi) = mask.range(i, d);
            softmax_row(&mut row[lo..hi]);
            row[..lo].fill(0.0);
            row[hi..].fill(0.0);
        }
        self.push_op(t, Op::Softmax(x), &[x])
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::dim(
                "layernorm",
                format!(
                    "width {d} with gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::Validation("layernorm eps must be positive".into()));
        }
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = Vec::with_capacity(xv.rows());
        for (r, row) in xv.data().chunks_exact(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        Ok(self.push_op(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu_tanh);
        self.push_op(t, Op::Gelu(x), &[x])
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no parts"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim(
                    "concat",
                    format!("part {s:?} does not match {base:?} off axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let block = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(&shape, data)?;
        Ok(self.push_op(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim(
                "narrow",
                format!("{start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(&out_shape, data)?;
        Ok(self.push_op(t, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Rows of a `[n, d]` table picked by index (embedding lookup, window regrouping).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.value(table).dims2()?;
        if idx.is_empty() {
            return Err(Error::dim("gather_rows", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::dim("gather_rows", format!("row {bad} of {n}")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(&[idx.len(), d], data)?;
        Ok(self.push_op(
            t,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        Ok(self.push_op(t, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push_op(t, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push_op(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.len() as f64;
        self.push_op(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * v);
        self.push_op(t, Op::Square(x), &[x])
    }

    /// Σ over `rows` of `-log softmax(logits[row])[target]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, rows: &[usize], targets: &[usize]) -> Result<Var> {
        let (n, v) = self.value(logits).dims2()?;
        if rows.len() != targets.len() {
            return Err(Error::dim("cross_entropy", "rows and targets differ in length"));
        }
        if rows.iter().any(|&r| r >= n) || targets.iter().any(|&t| t >= v) {
            return Err(Error::dim(
                "cross_entropy",
                format!("row/target out of range for logits [{n}, {v}]"),
            ));
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(rows.len() * v);
        let mut loss = 0.0;
        for (&r, &t) in rows.iter().zip(targets) {
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            loss += lse - row[t];
            probs.extend(row.iter().map(|x| (x - lse).exp()));
        }
        Ok(self.push_op(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                rows: rows.to_vec(),
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean squared error between two same-shape vars.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    // ---- backward ----------------------------------------------------------

    /// Clears every gradient recorded on the tape.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Back-propagates from a scalar output. Gradients accumulate across calls
    /// until [`Graph::zero_grad`].
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("output must be scalar, got {:?}", self.shape(out)),
            ));
        }
        if !self.nodes[out.0].requires_grad {
            return Ok(());
        }
        add_into(&mut self.nodes[out.0].grad, &[1.0]);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            backprop(&node.op, &node.value, &g, before);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_tanh_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn add_into(slot: &mut Option<Vec<f64>>, contrib: &[f64]) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        None => *slot = Some(contrib.to_vec()),
    }
}

/// Accumulates `contrib` into input `v` if it needs a gradient.
fn acc(nodes: &mut [Node], v: Var, contrib: &[f64]) {
    let n = &mut nodes[v.0];
    if n.requires_grad {
        add_into(&mut n.grad, contrib);
    }
}

fn wants(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn backprop(op: &Op, out: &Tensor, g: &[f64], nodes: &mut [Node]) {
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = nodes[a.0].value.dims2().unwrap();
            let n = out.last_dim();
            if wants(nodes, *a) {
                // dA = dC · Bᵀ
                let mut da = vec![0.0; m * k];
                kernels::matmul_bt_acc(g, nodes[b.0].value.data(), &mut da, m, n, k);
                acc(nodes, *a, &da);
            }
            if wants(nodes, *b) {
                // dB = Aᵀ · dC
                let mut db = vec![0.0; k * n];
                kernels::matmul_at_acc(nodes[a.0].value.data(), g, &mut db, m, k, n);
                acc(nodes, *b, &db);
            }
        }
        Op::MatMulBt(a, b) => {
            let (m, k) = nodes[a.0].value.dims2().unwrap();
            let n = out.last_dim();
            if wants(nodes, *a) {
                // dA = dC · B
                let mut da = vec![0.0; m * k];
                kernels::matmul_acc(g, nodes[b.0].value.data(), &mut da, m, n, k);
                acc(nodes, *a, &da);
            }
            if wants(nodes, *b) {
                // dB = dCᵀ · A
                let mut db = vec![0.0; n * k];
                kernels::matmul_at_acc(g, nodes[a.0].value.data(), &mut db, m, n, k);
                acc(nodes, *b, &db);
            }
        }
        Op::Add(a, b) => {
            acc(nodes, *a, g);
            acc(nodes, *b, g);
        }
        Op::Sub(a, b) => {
            acc(nodes, *a, g);
            if wants(nodes, *b) {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                acc(nodes, *b, &neg);
            }
        }
        Op::Mul(a, b) => {
            if wants(nodes, *a) {
                let da: Vec<f64> = g
                    .iter()
                    .zip(nodes[b.0].value.data())
                    .map(|(g, y)| g * y)
                    .collect();
                acc(nodes, *a, &da);
            }
            if wants(nodes, *b) {
                let db: Vec<f64> = g
                    .iter()
                    .zip(nodes[a.0].value.data())
                    .map(|(g, x)| g * x)
                    .collect();
                acc(nodes, *b, &db);
            }
        }
        Op::AddRowBias(x, b) => {
            acc(nodes, *x, g);
            if wants(nodes, *b) {
                let d = out.last_dim();
                let mut db = vec![0.0; d];
                for row in g.chunks_exact(d) {
                    for (a, v) in db.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                acc(nodes, *b, &db);
            }
        }
        Op::Scale(x, c) => {
            let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
            acc(nodes, *x, &dx);
        }
        Op::Softmax(x) => {
            // Masked entries carry y = 0 and so receive no gradient.
            let d = out.last_dim();
            let mut dx = vec![0.0; g.len()];
            for ((dxr, yr), gr) in dx
                .chunks_exact_mut(d)
                .zip(out.data().chunks_exact(d))
                .zip(g.chunks_exact(d))
            {
                let dotp: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for j in 0..d {
                    dxr[j] = yr[j] * (gr[j] - dotp);
                }
            }
            acc(nodes, *x, &dx);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = out.last_dim();
            if wants(nodes, *beta) {
                let mut db = vec![0.0; d];
                for row in g.chunks_exact(d) {
                    for (a, v) in db.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                acc(nodes, *beta, &db);
            }
            if wants(nodes, *gamma) {
                let mut dg = vec![0.0; d];
                for (row, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        dg[j] += row[j] * hrow[j];
                    }
                }
                acc(nodes, *gamma, &dg);
            }
            if wants(nodes, *x) {
                let gam = nodes[gamma.0].value.data().to_vec();
                let mut dx = vec![0.0; g.len()];
                for (r, rs) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let dh: Vec<f64> = gr.iter().zip(&gam).map(|(g, w)| g * w).collect();
                    let mean_dh = dh.iter().sum::<f64>() / d as f64;
                    let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = rs * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                acc(nodes, *x, &dx);
            }
        }
        Op::Gelu(x) => {
            let dx: Vec<f64> = g
                .iter()
                .zip(nodes[x.0].value.data())
                .map(|(g, &v)| g * gelu_tanh_grad(v))
                .collect();
            acc(nodes, *x, &dx);
        }
        Op::Concat { parts, axis } => {
            let shape = out.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis];
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p.0].value.shape()[*axis];
                if wants(nodes, p) {
                    let mut dp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        dp.extend_from_slice(&g[base..base + len * inner]);
                    }
                    acc(nodes, p, &dp);
                }
                offset += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            if wants(nodes, *x) {
                let src_shape = nodes[x.0].value.shape().to_vec();
                let outer: usize = src_shape[..*axis].iter().product();
                let inner: usize = src_shape[axis + 1..].iter().product();
                let len = out.shape()[*axis];
                let mut dx = vec![0.0; nodes[x.0].value.len()];
                for o in 0..outer {
                    let dst = (o * src_shape[*axis] + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                acc(nodes, *x, &dx);
            }
        }
        Op::GatherRows { table, idx } => {
            if wants(nodes, *table) {
                let d = out.last_dim();
                let mut dt = vec![0.0; nodes[table.0].value.len()];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += g[k * d + j];
                    }
                }
                acc(nodes, *table, &dt);
            }
        }
        Op::Transpose(x) => {
            let (r, c) = out.dims2().unwrap();
            let mut dx = vec![0.0; g.len()];
            kernels::transpose(g, &mut dx, r, c);
            acc(nodes, *x, &dx);
        }
        Op::Reshape(x) => acc(nodes, *x, g),
        Op::Sum(x) => {
            let n = nodes[x.0].value.len();
            acc(nodes, *x, &vec![g[0]; n]);
        }
        Op::Mean(x) => {
            let n = nodes[x.0].value.len();
            acc(nodes, *x, &vec![g[0] / n as f64; n]);
        }
        Op::Square(x) => {
            let dx: Vec<f64> = g
                .iter()
                .zip(nodes[x.0].value.data())
                .map(|(g, v)| 2.0 * g * v)
                .collect();
            acc(nodes, *x, &dx);
        }
        Op::CrossEntropy {
            logits,
            rows,
            targets,
            probs,
        } => {
            if wants(nodes, *logits) {
                let v = out_width(nodes, *logits);
                let mut dl = vec![0.0; nodes[logits.0].value.len()];
                for (k, (&r, &t)) in rows.iter().zip(targets).enumerate() {
                    for j in 0..v {
                        dl[r * v + j] += g[0] * probs[k * v + j];
                    }
                    dl[r * v + t] -= g[0];
                }
                acc(nodes, *logits, &dl);
            }
        }
    }
}

fn out_width(nodes: &[Node], v: Var) -> usize {
    nodes[v.0].value.last_dim()
}
