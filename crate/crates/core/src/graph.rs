//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order, so node indices
//! are already a topological order. [`Graph::backward`] walks the tape once
//! in reverse, and leaves marked `requires_grad` accumulate their gradient
//! until [`Graph::zero_grads`] is called.
//!
//! Batched sequences are stored as stacked row blocks (`batch * seq` rows).
//! Operations that must respect sequence boundaries (attention, pooling)
//! take the block length explicitly.

use crate::error::{Error, Result};
use crate::tensor::{matrix_dims, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operations exposed through [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Hadamard,
    Relu,
    Gelu,
}

/// Nonlinearity used inside feed-forward blocks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Relu(Var),
    Gelu(Var),
    Scale(Var, f64),
    AddScalar(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MeanPool {
        x: Var,
        block: usize,
    },
    Sum(Var),
    Mean(Var),
    RowNorms(Var),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Clears accumulated gradients on every leaf.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.value(v).matrix_dims()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() > 2 || sb.len() > 2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out = mm(self.value(a).data(), m, k, self.value(b).data(), n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// Checks that `b` matches `a` exactly or is a row vector broadcast over
    /// the rows of `a`. Returns true for the broadcast case.
    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(false);
        }
        let (_, cols) = matrix_dims(sa);
        let b_is_row = matches!(sb, [n] if *n == cols) || matches!(sb, [1, n] if *n == cols);
        if b_is_row && sa.len() >= 2 {
            Ok(true)
        } else {
            Err(Error::Dimension {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let broadcast = self.broadcast_check(name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let data: Vec<f64> = if broadcast {
            let (_, cols) = av.matrix_dims();
            av.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv[i % cols]))
                .collect()
        } else {
            av.data().iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        };
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("hadamard", a, b, |x, y| x * y, Op::Hadamard(a, b))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let av = self.value(a);
        let value = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().map(|&x| f(x)).collect(),
        )?;
        self.push(name, value, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, gelu, Op::Gelu(a))
    }

    pub fn activation(&mut self, kind: Activation, a: Var) -> Result<Var> {
        match kind {
            Activation::Relu => self.relu(a),
            Activation::Gelu => self.gelu(a),
        }
    }

    /// Dispatches one of the elementwise operations. Unary operations
    /// ignore `b`; binary operations require it.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b =
            || b.ok_or_else(|| Error::Precondition(format!("{op:?} needs a second operand")));
        match op {
            ElementwiseOp::Add => self.add(a, need_b()?),
            ElementwiseOp::Sub => self.sub(a, need_b()?),
            ElementwiseOp::Hadamard => self.hadamard(a, need_b()?),
            ElementwiseOp::Relu => self.relu(a),
            ElementwiseOp::Gelu => self.gelu(a),
        }
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (rows, cols) = av.matrix_dims();
        let mut out = av.data().to_vec();
        for r in 0..rows {
            softmax_in_place(&mut out[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push("softmax_rows", value, Op::SoftmaxRows(a), &[a])
    }

    /// Per-row normalization to zero mean and unit variance followed by an
    /// affine map. Epsilon 1e-5 sits inside the square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if cols < 2 {
            return Err(Error::Precondition(
                "layer_norm needs at least 2 columns".into(),
            ));
        }
        for p in [gain, bias] {
            if self.value(p).numel() != cols {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let xd = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Mean over all rows of `a`, returning a vector of length `cols`.
    pub fn mean_pool(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        let pooled = self.mean_pool_blocks(a, rows)?;
        self.nodes[pooled.0].value = self.nodes[pooled.0].value.clone().reshape(vec![cols])?;
        Ok(pooled)
    }

    /// Mean over each consecutive block of `block` rows: `[B*block, d] -> [B, d]`.
    pub fn mean_pool_blocks(&mut self, a: Var, block: usize) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        if block == 0 || rows == 0 {
            return Err(Error::Precondition(
                "mean_pool over an empty sequence".into(),
            ));
        }
        if rows % block != 0 {
            return Err(Error::Dimension {
                op: "mean_pool",
                left: self.shape(a).to_vec(),
                right: vec![block],
            });
        }
        let n_blocks = rows / block;
        let ad = self.value(a).data();
        let mut out = vec![0.0; n_blocks * cols];
        for bi in 0..n_blocks {
            let dst = &mut out[bi * cols..(bi + 1) * cols];
            for r in 0..block {
                let src = &ad[(bi * block + r) * cols..(bi * block + r + 1) * cols];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
            dst.iter_mut().for_each(|d| *d /= block as f64);
        }
        let value = Tensor::new(vec![n_blocks, cols], out)?;
        self.push("mean_pool", value, Op::MeanPool { x: a, block }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Euclidean norm of each row: `[m, n] -> [m]`.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        let ad = self.value(a).data();
        let out = (0..rows)
            .map(|r| {
                ad[r * cols..(r + 1) * cols]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        self.push("row_norms", Tensor::vector(out)?, Op::RowNorms(a), &[a])
    }

    /// Selects rows of the matrix view of `x` (embedding lookup when `x` is a table).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if index.is_empty() {
            return Err(Error::Precondition(
                "gather_rows with an empty index".into(),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!(
                "row index {bad} out of range for {rows} rows"
            )));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            out.extend_from_slice(&xd[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(vec![index.len(), cols], out)?;
        self.push(
            "gather_rows",
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        )
    }

    /// Multi-head scaled dot-product self-attention over stacked sequences
    /// of length `seq`. `q`, `k`, `v` are `[B*seq, d]`; heads split columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(Error::Dimension {
                op: "attention",
                left: shape,
                right: self.shape(k).to_vec(),
            });
        }
        let (rows, d) = matrix_dims(&shape);
        if seq == 0 || heads == 0 || rows % seq != 0 || d % heads != 0 {
            return Err(Error::Dimension {
                op: "attention",
                left: shape,
                right: vec![seq, heads],
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n_blocks = rows / seq;
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; n_blocks * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        for bi in 0..n_blocks {
            let r0 = bi * seq;
            for h in 0..heads {
                let c0 = h * dh;
                let p = &mut probs[(bi * heads + h) * seq * seq..(bi * heads + h + 1) * seq * seq];
                for i in 0..seq {
                    let qi = &qd[(r0 + i) * d + c0..(r0 + i) * d + c0 + dh];
                    let prow = &mut p[i * seq..(i + 1) * seq];
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let kj = &kd[(r0 + j) * d + c0..(r0 + j) * d + c0 + dh];
                        *pj = dot(qi, kj) * scale;
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[(r0 + i) * d + c0..(r0 + i) * d + c0 + dh];
                    for (j, &pj) in prow.iter().enumerate() {
                        let vj = &vd[(r0 + j) * d + c0..(r0 + j) * d + c0 + dh];
                        orow.iter_mut().zip(vj).for_each(|(o, &vv)| *o += pj * vv);
                    }
                }
            }
        }
        let value = Tensor::new(vec![rows, d], out)?;
        self.push(
            "attention",
            value,
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Mean softmax cross-entropy of `logits` (`[B, C]`) against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims(logits);
        if labels.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: self.shape(logits).to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= cols) {
            return Err(Error::Input(format!("label {bad} outside 0..{cols}")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &mut probs[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(total / rows as f64);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Propagates d`loss`/d(node) to every node on the tape and accumulates
    /// the result into the gradient buffer of each `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Precondition(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            if self.nodes[i].value.requires_grad() {
                self.nodes[i].value.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        macro_rules! acc {
            ($v:expr, |$buf:ident| $body:block) => {{
                let v = $v;
                if wants(v) {
                    let $buf = slot(adj, v, self.nodes[v.0].value.numel());
                    $body
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let (_, n) = self.dims(*b);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc!(*a, |buf| { mm_nt_acc(g, m, n, bd, k, buf) });
                acc!(*b, |buf| { mm_tn_acc(ad, m, k, g, n, buf) });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                acc!(*a, |buf| { add_into(buf, g, 1.0) });
                let broadcast = self.shape(*a) != self.shape(*b);
                acc!(*b, |buf| {
                    if broadcast {
                        let cols = buf.len();
                        for (idx, &gv) in g.iter().enumerate() {
                            buf[idx % cols] += sign * gv;
                        }
                    } else {
                        add_into(buf, g, sign);
                    }
                });
            }
            Op::Hadamard(a, b) => {
                let broadcast = self.shape(*a) != self.shape(*b);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let cols = bd.len();
                acc!(*a, |buf| {
                    for (idx, (o, &gv)) in buf.iter_mut().zip(g).enumerate() {
                        *o += gv * if broadcast { bd[idx % cols] } else { bd[idx] };
                    }
                });
                acc!(*b, |buf| {
                    if broadcast {
                        for (idx, (&gv, &av)) in g.iter().zip(ad).enumerate() {
                            buf[idx % cols] += gv * av;
                        }
                    } else {
                        for ((o, &gv), &av) in buf.iter_mut().zip(g).zip(ad) {
                            *o += gv * av;
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let ad = self.value(*a).data();
                acc!(*a, |buf| {
                    for ((o, &gv), &x) in buf.iter_mut().zip(g).zip(ad) {
                        if x > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let ad = self.value(*a).data();
                acc!(*a, |buf| {
                    for ((o, &gv), &x) in buf.iter_mut().zip(g).zip(ad) {
                        *o += gv * gelu_grad(x);
                    }
                });
            }
            Op::Scale(a, c) => acc!(*a, |buf| { add_into(buf, g, *c) }),
            Op::AddScalar(a) => acc!(*a, |buf| { add_into(buf, g, 1.0) }),
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let (rows, cols) = node.value.matrix_dims();
                acc!(*a, |buf| {
                    for r in 0..rows {
                        let ys = &y[r * cols..(r + 1) * cols];
                        let gs = &g[r * cols..(r + 1) * cols];
                        let s = dot(ys, gs);
                        for c in 0..cols {
                            buf[r * cols + c] += ys[c] * (gs[c] - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (rows, cols) = self.dims(*x);
                let gn = self.value(*gain).data();
                acc!(*gain, |buf| {
                    for (idx, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                        buf[idx % cols] += gv * h;
                    }
                });
                acc!(*bias, |buf| {
                    for (idx, &gv) in g.iter().enumerate() {
                        buf[idx % cols] += gv;
                    }
                });
                acc!(*x, |buf| {
                    let n = cols as f64;
                    let mut dh = vec![0.0; cols];
                    for r in 0..rows {
                        let off = r * cols;
                        for c in 0..cols {
                            dh[c] = g[off + c] * gn[c];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / n;
                        let mean_dh_h = dh
                            .iter()
                            .zip(&xhat[off..off + cols])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / n;
                        for c in 0..cols {
                            buf[off + c] += rstd[r] * (dh[c] - mean_dh - xhat[off + c] * mean_dh_h);
                        }
                    }
                });
            }
            Op::MeanPool { x, block } => {
                let (rows, cols) = self.dims(*x);
                acc!(*x, |buf| {
                    let inv = 1.0 / *block as f64;
                    for r in 0..rows {
                        let bi = r / block;
                        for c in 0..cols {
                            buf[r * cols + c] += g[bi * cols + c] * inv;
                        }
                    }
                });
            }
            Op::Sum(a) => acc!(*a, |buf| { buf.iter_mut().for_each(|o| *o += g[0]) }),
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                acc!(*a, |buf| { buf.iter_mut().for_each(|o| *o += g[0] / n) });
            }
            Op::RowNorms(a) => {
                let (rows, cols) = self.dims(*a);
                let ad = self.value(*a).data();
                let norms = node.value.data();
                acc!(*a, |buf| {
                    for r in 0..rows {
                        if norms[r] > 0.0 {
                            let f = g[r] / norms[r];
                            for c in 0..cols {
                                buf[r * cols + c] += f * ad[r * cols + c];
                            }
                        }
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let (_, cols) = self.dims(*x);
                acc!(*x, |buf| {
                    for (out_row, &src) in index.iter().enumerate() {
                        add_into(
                            &mut buf[src * cols..(src + 1) * cols],
                            &g[out_row * cols..(out_row + 1) * cols],
                            1.0,
                        );
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *seq, *heads, probs, adj),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (rows, cols) = self.dims(*logits);
                acc!(*logits, |buf| {
                    let f = g[0] / rows as f64;
                    for (r, &y) in labels.iter().enumerate() {
                        for c in 0..cols {
                            let onehot = if c == y { 1.0 } else { 0.0 };
                            buf[r * cols + c] += f * (probs[r * cols + c] - onehot);
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: &[f64],
        adj: &mut [Option<Vec<f64>>],
    ) {
        let (rows, d) = self.dims(q);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut ds = vec![0.0; seq * seq];
        for bi in 0..rows / seq {
            let r0 = bi * seq;
            for h in 0..heads {
                let c0 = h * dh;
                let p = &probs[(bi * heads + h) * seq * seq..(bi * heads + h + 1) * seq * seq];
                let at = |r: usize| (r0 + r) * d + c0..(r0 + r) * d + c0 + dh;
                for i in 0..seq {
                    let go = &g[at(i)];
                    let mut dp_dot = 0.0;
                    for j in 0..seq {
                        let pij = p[i * seq + j];
                        let dvj = &mut dv[at(j)];
                        dvj.iter_mut().zip(go).for_each(|(o, &gg)| *o += pij * gg);
                        let dpij = dot(go, &vd[at(j)]);
                        ds[i * seq + j] = dpij;
                        dp_dot += pij * dpij;
                    }
                    for j in 0..seq {
                        ds[i * seq + j] = p[i * seq + j] * (ds[i * seq + j] - dp_dot) * scale;
                    }
                }
                for i in 0..seq {
                    for j in 0..seq {
                        let s = ds[i * seq + j];
                        if s == 0.0 {
                            continue;
                        }
                        let (ri, rj) = (at(i), at(j));
                        for c in 0..dh {
                            dq[ri.start + c] += s * kd[rj.start + c];
                            dk[rj.start + c] += s * qd[ri.start + c];
                        }
                    }
                }
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].needs_grad {
                add_into(slot(adj, var, delta.len()), &delta, 1.0);
            }
        }
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    adj[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += scale * s);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// `[m, k] x [k, n]`.
pub(crate) fn mm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    // SAFETY: the slices hold m*k, k*n and m*n elements with the row-major
    // strides passed here.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// `out += dc[m, n] x b[k, n]^T`.
fn mm_nt_acc(dc: &[f64], m: usize, n: usize, b: &[f64], k: usize, out: &mut [f64]) {
    debug_assert!(dc.len() >= m * n && b.len() >= k * n && out.len() >= m * k);
    // SAFETY: b is read as its transpose through swapped strides; all
    // extents match the slice lengths checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            n,
            k,
            1.0,
            dc.as_ptr(),
            n as isize,
            1,
            b.as_ptr(),
            1,
            n as isize,
            1.0,
            out.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// `out += a[m, k]^T x dc[m, n]`.
fn mm_tn_acc(a: &[f64], m: usize, k: usize, dc: &[f64], n: usize, out: &mut [f64]) {
    debug_assert!(a.len() >= m * k && dc.len() >= m * n && out.len() >= k * n);
    // SAFETY: as in `mm_nt_acc`, with `a` transposed.
    unsafe {
        matrixmultiply::dgemm(
            k,
            m,
            n,
            1.0,
            a.as_ptr(),
            1,
            k as isize,
            dc.as_ptr(),
            n as isize,
            1,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
