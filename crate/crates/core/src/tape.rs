//! Reverse-mode differentiation tape.
//!
//! Every operation the model, loss, and optimizer need is a method on
//! [`Tape`]. The forward value is computed immediately and the operation is
//! recorded; [`Tape::backward`] replays the record in reverse, accumulating
//! vector-Jacobian products. Nodes are appended in forward order, so the
//! record is topologically sorted by construction.
//!
//! A tape and the tensors holding handles into it are confined to one thread
//! at a time; a [`Tensor`] without a handle (see [`Tensor::detached`]) is a
//! plain value. There is no global state — differentiation scope begins at
//! `Tape::new()` and ends when the tape is dropped.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::{NodeId, NodeRef, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    AddRow { a: NodeId, bias: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: f64 },
    Tanh { a: NodeId },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    MeanRows { a: NodeId },
    GatherRows { table: NodeId, indices: Vec<usize> },
    ConcatRows { parts: Vec<NodeId> },
    L2NormalizeRows { a: NodeId },
    SoftmaxRows { a: NodeId },
    LogSoftmaxRows { a: NodeId },
    CrossEntropyRows { logits: NodeId, targets: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Recording tape for reverse-mode differentiation.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Register a differentiable leaf (a parameter). Data is snapshotted.
    pub fn param(&mut self, value: &Tensor) -> Tensor {
        self.leaf(value, true)
    }

    /// Register a non-differentiable leaf (an input). Data is snapshotted.
    pub fn constant(&mut self, value: &Tensor) -> Tensor {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: &Tensor, needs_grad: bool) -> Tensor {
        self.push(
            value.shape().to_vec(),
            value.data().to_vec(),
            Op::Leaf,
            needs_grad,
        )
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Tensor {
        let index = self.nodes.len();
        self.nodes.push(Node {
            shape: shape.clone(),
            data: data.clone(),
            op,
            needs_grad,
        });
        self.grads.push(None);
        Tensor::with_node(
            shape,
            data,
            NodeRef {
                tape: self.id,
                index,
            },
        )
    }

    /// Node id for a tensor, wrapping plain values as constants on the fly.
    fn ensure(&mut self, t: &Tensor) -> Result<NodeId, TensorError> {
        match t.node() {
            Some(r) if r.tape == self.id => Ok(r.index),
            Some(_) => Err(TensorError::ForeignTape),
            None => {
                let wrapped = self.constant(t);
                Ok(wrapped.node().expect("just pushed").index)
            }
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].data
    }

    // ── Operations ──────────────────────────────────────────────────────

    /// Matrix product `a(m×k) · b(k×n)`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let (m, ka) = a.dims2("matmul")?;
        let (kb, n) = b.dims2("matmul")?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for k in 0..ka {
                let av = a.data()[i * ka + k];
                if av == 0.0 {
                    continue;
                }
                let brow = &b.data()[k * n..(k + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let (ia, ib) = (self.ensure(a)?, self.ensure(b)?);
        let needs = self.needs(ia) || self.needs(ib);
        Ok(self.push(vec![m, n], out, Op::Matmul { a: ia, b: ib }, needs))
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let (m, n) = a.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a.data()[i * n + j];
            }
        }
        let ia = self.ensure(a)?;
        let needs = self.needs(ia);
        Ok(self.push(vec![n, m], out, Op::Transpose { a: ia }, needs))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_op(a, b, "add", |x, y| x + y, |ia, ib| Op::Add { a: ia, b: ib })
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_op(a, b, "sub", |x, y| x - y, |ia, ib| Op::Sub { a: ia, b: ib })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_op(a, b, "mul", |x, y| x * y, |ia, ib| Op::Mul { a: ia, b: ib })
    }

    fn zip_op(
        &mut self,
        a: &Tensor,
        b: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<Tensor, TensorError> {
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let out: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let (ia, ib) = (self.ensure(a)?, self.ensure(b)?);
        let needs = self.needs(ia) || self.needs(ib);
        Ok(self.push(a.shape().to_vec(), out, make(ia, ib), needs))
    }

    /// Add a `1×n` bias row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
        let (m, n) = a.dims2("add_row")?;
        let (bm, bn) = bias.dims2("add_row")?;
        if bm != 1 || bn != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: a.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        let mut out = a.data().to_vec();
        for r in 0..m {
            for j in 0..n {
                out[r * n + j] += bias.data()[j];
            }
        }
        let (ia, ib) = (self.ensure(a)?, self.ensure(bias)?);
        let needs = self.needs(ia) || self.needs(ib);
        Ok(self.push(vec![m, n], out, Op::AddRow { a: ia, bias: ib }, needs))
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, a: &Tensor, factor: f64) -> Result<Tensor, TensorError> {
        let out: Vec<f64> = a.data().iter().map(|x| x * factor).collect();
        let ia = self.ensure(a)?;
        let needs = self.needs(ia);
        Ok(self.push(a.shape().to_vec(), out, Op::Scale { a: ia, factor }, needs))
    }

    pub fn tanh(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let out: Vec<f64> = a.data().iter().map(|x| x.tanh()).collect();
        let ia = self.ensure(a)?;
        let needs = self.needs(ia);
        Ok(self.push(a.shape().to_vec(), out, Op::Tanh { a: ia }, needs))
    }

    pub fn sum_all(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let s: f64 = a.data().iter().sum();
        let ia = self.ensure(a)?;
        let needs = self.needs(ia);
        Ok(self.push(vec![1], vec![s], Op::SumAll { a: ia }, needs))
    }

    pub fn mean_all(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        if a.is_empty() {
            return Err(TensorError::EmptyInput { op: "mean_all" });
        }
        let s: f64 = a.data().iter().sum::<f64>() / a.len() as f64;
        let ia = self.ensure(a)?;
        let needs = self.needs(ia);
        Ok(self.push(vec![1], vec![s], Op::MeanAll { a: ia }, needs))
    }

    /// Column-wise mean across the rows of an `m×n` matrix, as a `1×n` row.
    pub fn mean_rows(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let (m, n) = a.dims2("mean_rows")?;
        if m == 0 {
            return Err(TensorError::EmptyInput { op: "mean_rows" });
        }
        let mut out = vec![0.0; n];
        for r in 0..m {
            for j in 0..n {
                out[j] += a.data()[r * n + j];
            }
        }
        for v in &mut out {
            *v /= m as f64;
        }
        let ia = self.ensure(a)?;
        let needs = self.needs(ia);
        Ok(self.push(vec![1, n], out, Op::MeanRows { a: ia }, needs))
    }

    /// Gather rows of a `v×d` table by index (embedding lookup).
    pub fn gather_rows(&mut self, table: &Tensor, indices: &[usize]) -> Result<Tensor, TensorError> {
        let (v, d) = table.dims2("gather_rows")?;
        if indices.is_empty() {
            return Err(TensorError::EmptyInput { op: "gather_rows" });
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &idx in indices {
            if idx >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: idx,
                    limit: v,
                });
            }
            out.extend_from_slice(&table.data()[idx * d..(idx + 1) * d]);
        }
        let it = self.ensure(table)?;
        let needs = self.needs(it);
        Ok(self.push(
            vec![indices.len(), d],
            out,
            Op::GatherRows {
                table: it,
                indices: indices.to_vec(),
            },
            needs,
        ))
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat_rows" });
        }
        let (_, n) = parts[0].dims2("concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let (pm, pn) = p.dims2("concat_rows")?;
            if pn != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: parts[0].shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
            rows += pm;
            out.extend_from_slice(p.data());
        }
        let mut ids = Vec::with_capacity(parts.len());
        let mut needs = false;
        for p in parts {
            let id = self.ensure(p)?;
            needs |= self.needs(id);
            ids.push(id);
        }
        Ok(self.push(vec![rows, n], out, Op::ConcatRows { parts: ids }, needs))
    }

    /// Divide each row by its Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let (m, n) = a.dims2("l2_normalize_rows")?;
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &a.data()[r * n..(r + 1) * n];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= 1e-12 {
                return Err(TensorError::DegenerateRow {
                    op: "l2_normalize_rows",
                    row: r,
                    norm,
                });
            }
            for (o, x) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = x / norm;
            }
        }
        let ia = self.ensure(a)?;
        let needs = self.needs(ia);
        Ok(self.push(vec![m, n], out, Op::L2NormalizeRows { a: ia }, needs))
    }

    /// Row-wise softmax, computed with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let (m, n) = a.dims2("softmax_rows")?;
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &a.data()[r * n..(r + 1) * n];
            softmax_into(row, &mut out[r * n..(r + 1) * n]);
        }
        let ia = self.ensure(a)?;
        let needs = self.needs(ia);
        Ok(self.push(vec![m, n], out, Op::SoftmaxRows { a: ia }, needs))
    }

    /// Row-wise log-softmax, computed with per-row max subtraction.
    pub fn log_softmax_rows(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let (m, n) = a.dims2("log_softmax_rows")?;
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &a.data()[r * n..(r + 1) * n];
            let lse = log_sum_exp(row);
            for (o, x) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let ia = self.ensure(a)?;
        let needs = self.needs(ia);
        Ok(self.push(vec![m, n], out, Op::LogSoftmaxRows { a: ia }, needs))
    }

    /// Mean over rows of `-log_softmax(logits)[row, target]`.
    pub fn cross_entropy_rows(
        &mut self,
        logits: &Tensor,
        targets: &[usize],
    ) -> Result<Tensor, TensorError> {
        let (m, n) = logits.dims2("cross_entropy_rows")?;
        if targets.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_rows",
                left: vec![m, n],
                right: vec![targets.len()],
            });
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy_rows",
                    index: t,
                    limit: n,
                });
            }
            let row = &logits.data()[r * n..(r + 1) * n];
            total += log_sum_exp(row) - row[t];
        }
        let loss = total / m as f64;
        let il = self.ensure(logits)?;
        let needs = self.needs(il);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropyRows {
                logits: il,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-accumulate gradients from a scalar loss. The gradient of the
    /// loss with respect to itself is 1.
    pub fn backward(&mut self, loss: &Tensor) -> Result<(), TensorError> {
        if !loss.is_scalar() {
            return Err(TensorError::NotAScalar {
                op: "backward",
                shape: loss.shape().to_vec(),
            });
        }
        let root = match loss.node() {
            Some(r) if r.tape == self.id => r.index,
            Some(_) => return Err(TensorError::ForeignTape),
            None => return Ok(()), // plain value: nothing on the tape depends on it
        };
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            let op = self.nodes[id].op.clone();
            self.propagate(&op, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, contrib: &[f64]) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut self.grads[id] {
            Some(buf) => {
                for (b, c) in buf.iter_mut().zip(contrib) {
                    *b += c;
                }
            }
            None => self.grads[id] = Some(contrib.to_vec()),
        }
    }

    fn propagate(&mut self, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                if self.needs(*a) {
                    // dA = G · Bᵀ
                    let bv = self.value(*b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                da[i * k + kk] += gv * bv[kk * n + j];
                            }
                        }
                    }
                    self.accumulate(*a, &da);
                }
                if self.needs(*b) {
                    // dB = Aᵀ · G
                    let av = self.value(*a);
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for kk in 0..k {
                            let avv = av[i * k + kk];
                            if avv == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[kk * n + j] += avv * g[i * n + j];
                            }
                        }
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::Transpose { a } => {
                let (m, n) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::Add { a, b } => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::AddRow { a, bias } => {
                self.accumulate(*a, g);
                if self.needs(*bias) {
                    let n = self.nodes[*bias].shape[1];
                    let m = g.len() / n;
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for j in 0..n {
                            db[j] += g[r * n + j];
                        }
                    }
                    self.accumulate(*bias, &db);
                }
            }
            Op::Sub { a, b } => {
                self.accumulate(*a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da: Vec<f64> = g.iter().zip(self.value(*b)).map(|(gv, bv)| gv * bv).collect();
                    self.accumulate(*a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<f64> = g.iter().zip(self.value(*a)).map(|(gv, av)| gv * av).collect();
                    self.accumulate(*b, &db);
                }
            }
            Op::Scale { a, factor } => {
                let da: Vec<f64> = g.iter().map(|x| x * factor).collect();
                self.accumulate(*a, &da);
            }
            Op::Tanh { a } => {
                // output y is the node following a in the record; recompute from input
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(gv, x)| {
                        let y = x.tanh();
                        gv * (1.0 - y * y)
                    })
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::SumAll { a } => {
                let da = vec![g[0]; self.nodes[*a].data.len()];
                self.accumulate(*a, &da);
            }
            Op::MeanAll { a } => {
                let len = self.nodes[*a].data.len();
                let da = vec![g[0] / len as f64; len];
                self.accumulate(*a, &da);
            }
            Op::MeanRows { a } => {
                let (m, n) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    for j in 0..n {
                        da[r * n + j] = g[j] / m as f64;
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::GatherRows { table, indices } => {
                let (v, d) = (self.nodes[*table].shape[0], self.nodes[*table].shape[1]);
                let mut dt = vec![0.0; v * d];
                for (t, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        dt[idx * d + j] += g[t * d + j];
                    }
                }
                self.accumulate(*table, &dt);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].data.len();
                    let slice = g[offset..offset + len].to_vec();
                    self.accumulate(p, &slice);
                    offset += len;
                }
            }
            Op::L2NormalizeRows { a } => {
                let (m, n) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let av = self.value(*a).to_vec();
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    let x = &av[r * n..(r + 1) * n];
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let y: Vec<f64> = x.iter().map(|v| v / norm).collect();
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = gr.iter().zip(&y).map(|(gv, yv)| gv * yv).sum();
                    for j in 0..n {
                        da[r * n + j] = (gr[j] - y[j] * dot) / norm;
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::SoftmaxRows { a } => {
                let (m, n) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let av = self.value(*a).to_vec();
                let mut da = vec![0.0; m * n];
                let mut y = vec![0.0; n];
                for r in 0..m {
                    softmax_into(&av[r * n..(r + 1) * n], &mut y);
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = gr.iter().zip(&y).map(|(gv, yv)| gv * yv).sum();
                    for j in 0..n {
                        da[r * n + j] = y[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::LogSoftmaxRows { a } => {
                let (m, n) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let av = self.value(*a).to_vec();
                let mut da = vec![0.0; m * n];
                let mut y = vec![0.0; n];
                for r in 0..m {
                    softmax_into(&av[r * n..(r + 1) * n], &mut y);
                    let gr = &g[r * n..(r + 1) * n];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..n {
                        da[r * n + j] = gr[j] - y[j] * gsum;
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::CrossEntropyRows { logits, targets } => {
                let (m, n) = (self.nodes[*logits].shape[0], self.nodes[*logits].shape[1]);
                let lv = self.value(*logits).to_vec();
                let scale = g[0] / m as f64;
                let mut dl = vec![0.0; m * n];
                let mut y = vec![0.0; n];
                for (r, &t) in targets.iter().enumerate() {
                    softmax_into(&lv[r * n..(r + 1) * n], &mut y);
                    for j in 0..n {
                        dl[r * n + j] = (y[j] - if j == t { 1.0 } else { 0.0 }) * scale;
                    }
                }
                self.accumulate(*logits, &dl);
            }
        }
    }

    /// Gradient of the last backward pass w.r.t. `t`, if any flowed to it.
    pub fn grad(&self, t: &Tensor) -> Option<Tensor> {
        let r = t.node()?;
        if r.tape != self.id {
            return None;
        }
        self.grads[r.index].as_ref().map(|g| {
            Tensor::new(self.nodes[r.index].shape.clone(), g.clone())
                .expect("gradient shape mirrors node shape")
        })
    }
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_and_definition() {
        let mut tape = Tape::new();
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::matrix(2, 2, vec![3.0, -1.0, 2.5, 7.0]).unwrap();
        let y = tape.matmul(&eye, &x).unwrap();
        assert_eq!(y.data(), x.data());

        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ta = Tensor::matrix(3, 4, a.clone()).unwrap();
        let tb = Tensor::matrix(4, 2, b.clone()).unwrap();
        let mut tape = Tape::new();
        let c = tape.matmul(&ta, &tb).unwrap();
        // independent element-by-element triple loop
        for i in 0..3 {
            for j in 0..2 {
                let mut expect = 0.0;
                for k in 0..4 {
                    expect += a[i * 4 + k] * b[k * 2 + j];
                }
                assert!(close(c.at(i, j), expect, 1e-12));
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut tape = Tape::new();
        let a = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        let y = tape.l2_normalize_rows(&a).unwrap();
        assert!(close(y.data()[0], 0.6, 1e-15));
        assert!(close(y.data()[1], 0.8, 1e-15));
    }

    #[test]
    fn l2_normalize_idempotent() {
        let mut tape = Tape::new();
        let a = Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 4.0, 0.1, -1.0]).unwrap();
        let y1 = tape.l2_normalize_rows(&a).unwrap();
        let y2 = tape.l2_normalize_rows(&y1).unwrap();
        for (u, v) in y1.data().iter().zip(y2.data()) {
            assert!(close(*u, *v, 1e-12));
        }
    }

    #[test]
    fn l2_normalize_rejects_near_zero_row() {
        let mut tape = Tape::new();
        let a = Tensor::matrix(2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        match tape.l2_normalize_rows(&a) {
            Err(TensorError::DegenerateRow { row, .. }) => assert_eq!(row, 1),
            other => panic!("expected degenerate row error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::new();
        let a = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let y = tape.softmax_rows(&a).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);

        let hot = Tensor::matrix(1, 2, vec![1000.0, 0.0]).unwrap();
        let y = tape.softmax_rows(&hot).unwrap();
        assert!(y.all_finite());
        assert!(close(y.data()[0], 1.0, 1e-15));
        assert!(close(y.data()[1], 0.0, 1e-15));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..6).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let a = Tensor::matrix(2, 3, data).unwrap();
        let mut tape = Tape::new();
        let y = tape.softmax_rows(&a).unwrap();
        for r in 0..2 {
            let s: f64 = (0..3).map(|j| y.at(r, j)).sum();
            assert!(close(s, 1.0, 1e-12));
        }
    }

    #[test]
    fn log_softmax_is_log_of_softmax() {
        let a = Tensor::matrix(2, 3, vec![0.3, -1.2, 2.0, 0.0, 0.5, -0.5]).unwrap();
        let mut tape = Tape::new();
        let s = tape.softmax_rows(&a).unwrap();
        let ls = tape.log_softmax_rows(&a).unwrap();
        for (l, p) in ls.data().iter().zip(s.data()) {
            assert!(close(*l, p.ln(), 1e-9));
        }
    }

    #[test]
    fn cross_entropy_uniform_is_log_n() {
        let mut tape = Tape::new();
        let logits = Tensor::matrix(2, 4, vec![0.7; 8]).unwrap();
        let loss = tape.cross_entropy_rows(&logits, &[0, 3]).unwrap();
        assert!(close(loss.scalar_value().unwrap(), 4.0_f64.ln(), 1e-12));
    }

    #[test]
    fn cross_entropy_confident_limit() {
        let mut tape = Tape::new();
        let logits = Tensor::matrix(1, 3, vec![200.0, 0.0, 0.0]).unwrap();
        let loss = tape.cross_entropy_rows(&logits, &[0]).unwrap();
        assert!(loss.scalar_value().unwrap() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_hand_expanded_formula() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..9).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let targets = [2usize, 0, 1];
        let logits = Tensor::matrix(3, 3, data.clone()).unwrap();
        let mut tape = Tape::new();
        let loss = tape.cross_entropy_rows(&logits, &targets).unwrap();
        // hand-expanded −log p with explicit exponentials
        let mut expect = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &data[r * 3..(r + 1) * 3];
            let denom: f64 = row.iter().map(|x| x.exp()).sum();
            expect += -(row[t].exp() / denom).ln();
        }
        expect /= 3.0;
        assert!(close(loss.scalar_value().unwrap(), expect, 1e-12));
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut tape = Tape::new();
        let logits = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
        assert!(matches!(
            tape.cross_entropy_rows(&logits, &[3]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let loss = tape.sum_all(&x).unwrap();
        tape.backward(&loss).unwrap();
        let g = tape.grad(&x).unwrap();
        assert_eq!(g.data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_linear_map_broadcasts_row_sums() {
        // loss = sum(x · W): d/dx[i,k] = sum_j W[k,j]
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::matrix(2, 2, vec![0.3, -1.0, 2.0, 0.7]).unwrap());
        let w = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = tape.matmul(&x, &w).unwrap();
        let loss = tape.sum_all(&y).unwrap();
        tape.backward(&loss).unwrap();
        let g = tape.grad(&x).unwrap();
        assert_eq!(g.data(), &[6.0, 15.0, 6.0, 15.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let y = tape.scale(&x, 2.0).unwrap();
        assert!(matches!(
            tape.backward(&y),
            Err(TensorError::NotAScalar { .. })
        ));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let c = tape.constant(&Tensor::matrix(1, 2, vec![5.0, 5.0]).unwrap());
        let y = tape.mul(&x, &c).unwrap();
        let loss = tape.sum_all(&y).unwrap();
        tape.backward(&loss).unwrap();
        assert!(tape.grad(&c).is_none());
        assert_eq!(tape.grad(&x).unwrap().data(), &[5.0, 5.0]);
    }

    #[test]
    fn gradient_accumulates_over_multiple_uses() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::scalar(3.0));
        let a = tape.scale(&x, 2.0).unwrap();
        let b = tape.scale(&x, 5.0).unwrap();
        let s = tape.add(&a, &b).unwrap();
        let loss = tape.sum_all(&s).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn foreign_tape_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let x = t1.param(&Tensor::scalar(1.0));
        assert!(matches!(t2.scale(&x, 2.0), Err(TensorError::ForeignTape)));
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let a = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64).sin()).collect()).unwrap();
            let b = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64).cos()).collect()).unwrap();
            let mut tape = Tape::new();
            let c = tape.matmul(&a, &b).unwrap();
            let n = tape.l2_normalize_rows(&c).unwrap();
            let s = tape.softmax_rows(&n).unwrap();
            s.data().to_vec()
        };
        let first = run();
        let second = run();
        assert_eq!(first, second, "bitwise determinism");
    }

    #[test]
    fn matmul_associativity_on_small_random_triples() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(21);
        for _ in 0..10 {
            let a = Tensor::matrix(2, 3, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let b = Tensor::matrix(3, 2, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let c = Tensor::matrix(2, 4, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let mut tape = Tape::new();
            let ab = tape.matmul(&a, &b).unwrap();
            let left = tape.matmul(&ab, &c).unwrap();
            let bc = tape.matmul(&b, &c).unwrap();
            let right = tape.matmul(&a, &bc).unwrap();
            for (l, r) in left.data().iter().zip(right.data()) {
                assert!(close(*l, *r, 1e-9));
            }
        }
    }

    #[test]
    fn every_node_reachable_from_loss_has_matching_grad_shape() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::matrix(2, 3, vec![0.1; 6]).unwrap());
        let w = tape.param(&Tensor::matrix(3, 2, vec![0.2; 6]).unwrap());
        let y = tape.matmul(&x, &w).unwrap();
        let t = tape.tanh(&y).unwrap();
        let loss = tape.mean_all(&t).unwrap();
        tape.backward(&loss).unwrap();
        for tensor in [&x, &w, &y, &t, &loss] {
            let g = tape.grad(tensor).unwrap();
            assert_eq!(g.shape(), tensor.shape());
        }
    }
}
