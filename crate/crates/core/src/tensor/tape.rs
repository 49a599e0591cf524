//! The gradient tape.
//!
//! Each recorded node names the buffers it keeps alive for the backward pass.
//! Those declarations are the ground truth for activation memory: every
//! retained buffer that is not parameter storage is added to
//! [`Tape::saved_scalar_count`] once, the first time any node retains it.

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

type Buf = Arc<Vec<f64>>;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle of a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeRef {
    tape: u64,
    index: usize,
}

enum Op {
    Leaf,
    /// `a` is kept when `b` needs a gradient and vice versa.
    MatMul {
        a: Option<Buf>,
        b: Option<Buf>,
        m: usize,
        k: usize,
        n: usize,
    },
    Add,
    AddRow {
        cols: usize,
    },
    Mul {
        a: Option<Buf>,
        b: Option<Buf>,
    },
    Scale(f64),
    Gelu {
        input: Buf,
    },
    Sigmoid {
        out: Buf,
    },
    Softmax {
        out: Buf,
        cols: usize,
    },
    LayerNorm {
        xhat: Buf,
        rstd: Buf,
        gamma: Option<Buf>,
        d: usize,
    },
    MeanRows {
        rows: usize,
        cols: usize,
    },
    Concat {
        axis: usize,
        sizes: Vec<usize>,
        rows: usize,
        cols: usize,
    },
    SliceRows {
        start: usize,
        len: usize,
        rows: usize,
        cols: usize,
    },
    Attention {
        q: Option<Buf>,
        k: Option<Buf>,
        v: Option<Buf>,
        probs: Buf,
        n: usize,
        m: usize,
        d: usize,
        heads: usize,
    },
    CrossEntropy {
        probs: Buf,
        label: usize,
    },
    Sum {
        numel: usize,
    },
}

struct Node {
    op: Op,
    parents: Vec<Option<usize>>,
    shape: Vec<usize>,
}

/// Records operations on tracked tensors for reverse-mode differentiation.
///
/// Single-threaded; build one tape per sample and per step.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    saved_scalars: Cell<usize>,
    retained: RefCell<HashSet<usize>>,
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
            nodes: RefCell::new(Vec::new()),
            saved_scalars: Cell::new(0),
            retained: RefCell::new(HashSet::new()),
        }
    }

    /// Scalars retained for backward so far, excluding parameter storage.
    pub fn saved_scalar_count(&self) -> usize {
        self.saved_scalars.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Starts tracking `t` as a differentiable leaf. The returned tensor shares
    /// `t`'s buffer.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        let node = self.push_node(Op::Leaf, Vec::new(), t.shape().to_vec());
        t.detach().with_node(node)
    }

    // -- bookkeeping ---------------------------------------------------------

    fn push_node(&self, op: Op, parents: Vec<Option<usize>>, shape: Vec<usize>) -> NodeRef {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        debug_assert!(parents.iter().flatten().all(|&p| p < index));
        nodes.push(Node { op, parents, shape });
        NodeRef {
            tape: self.id,
            index,
        }
    }

    fn check(&self, inputs: &[&Tensor]) -> Result<bool> {
        let mut recording = false;
        for t in inputs {
            if let Some(node) = t.node() {
                if node.tape != self.id {
                    return Err(Error::Contract(
                        "tensor is tracked by a different tape".to_string(),
                    ));
                }
                recording = true;
            }
        }
        Ok(recording)
    }

    fn retain(&self, t: &Tensor) -> Buf {
        let buf = Arc::clone(t.buffer());
        if !t.is_parameter() {
            self.count_buffer(&buf);
        }
        buf
    }

    fn retain_new(&self, data: Vec<f64>) -> Buf {
        let buf = Arc::new(data);
        self.count_buffer(&buf);
        buf
    }

    fn count_buffer(&self, buf: &Buf) {
        let key = Arc::as_ptr(buf) as usize;
        if self.retained.borrow_mut().insert(key) {
            self.saved_scalars.set(self.saved_scalars.get() + buf.len());
        }
    }

    fn finish(&self, op: Op, inputs: &[&Tensor], out: Tensor) -> Tensor {
        let parents = inputs.iter().map(|t| t.node().map(|n| n.index)).collect();
        let node = self.push_node(op, parents, out.shape().to_vec());
        out.with_node(node)
    }

    // -- operations ----------------------------------------------------------

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let rec = self.check(&[a, b])?;
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::dim("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let out = Tensor::from_parts(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n));
        if !rec {
            return Ok(out);
        }
        let op = Op::MatMul {
            a: b.requires_grad().then(|| self.retain(a)),
            b: a.requires_grad().then(|| self.retain(b)),
            m,
            k,
            n,
        };
        Ok(self.finish(op, &[a, b], out))
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let rec = self.check(&[a, b])?;
        if a.shape() != b.shape() {
            return Err(Error::dim("add", a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        if !rec {
            return Ok(out);
        }
        Ok(self.finish(Op::Add, &[a, b], out))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let rec = self.check(&[x, bias])?;
        let (_, cols) = x.dims2();
        if bias.numel() != cols || x.shape().is_empty() {
            return Err(Error::dim("add_row", x.shape(), bias.shape()));
        }
        let b = bias.data();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % cols])
            .collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        if !rec {
            return Ok(out);
        }
        Ok(self.finish(Op::AddRow { cols }, &[x, bias], out))
    }

    /// `x · w + b`
    pub fn linear(&self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let xw = self.matmul(x, w)?;
        self.add_row(&xw, b)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let rec = self.check(&[a, b])?;
        if a.shape() != b.shape() {
            return Err(Error::dim("mul", a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        if !rec {
            return Ok(out);
        }
        let op = Op::Mul {
            a: b.requires_grad().then(|| self.retain(a)),
            b: a.requires_grad().then(|| self.retain(b)),
        };
        Ok(self.finish(op, &[a, b], out))
    }

    pub fn scale(&self, x: &Tensor, s: f64) -> Result<Tensor> {
        let rec = self.check(&[x])?;
        let out = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v * s).collect());
        if !rec {
            return Ok(out);
        }
        Ok(self.finish(Op::Scale(s), &[x], out))
    }

    pub fn gelu(&self, x: &Tensor) -> Result<Tensor> {
        let rec = self.check(&[x])?;
        let out = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().map(|&v| kernels::gelu(v)).collect(),
        );
        if !rec {
            return Ok(out);
        }
        let op = Op::Gelu {
            input: self.retain(x),
        };
        Ok(self.finish(op, &[x], out))
    }

    pub fn sigmoid(&self, x: &Tensor) -> Result<Tensor> {
        let rec = self.check(&[x])?;
        let out = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().map(|&v| kernels::sigmoid(v)).collect(),
        );
        if !rec {
            return Ok(out);
        }
        let op = Op::Sigmoid {
            out: self.retain(&out),
        };
        Ok(self.finish(op, &[x], out))
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&self, x: &Tensor) -> Result<Tensor> {
        let rec = self.check(&[x])?;
        if x.shape().is_empty() {
            return Err(Error::dim("softmax_rows", x.shape(), &[1]));
        }
        let (_, cols) = x.dims2();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(cols) {
            kernels::softmax_in_place(row);
        }
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        if !rec {
            return Ok(out);
        }
        let op = Op::Softmax {
            out: self.retain(&out),
            cols,
        };
        Ok(self.finish(op, &[x], out))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layernorm(&self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let rec = self.check(&[x, gamma, beta])?;
        let d = *x.shape().last().unwrap_or(&0);
        if d == 0 || gamma.numel() != d || beta.numel() != d {
            return Err(Error::dim("layernorm", x.shape(), gamma.shape()));
        }
        let rows = x.numel() / d;
        let ln = kernels::layernorm(x.data(), gamma.data(), beta.data(), rows, d, eps);
        let out = Tensor::from_parts(x.shape().to_vec(), ln.y);
        if !rec {
            return Ok(out);
        }
        let op = Op::LayerNorm {
            xhat: self.retain_new(ln.xhat),
            rstd: self.retain_new(ln.rstd),
            gamma: x.requires_grad().then(|| self.retain(gamma)),
            d,
        };
        Ok(self.finish(op, &[x, gamma, beta], out))
    }

    /// Averages the rows of an `m×n` tensor into a `1×n` tensor.
    pub fn mean_rows(&self, x: &Tensor) -> Result<Tensor> {
        let rec = self.check(&[x])?;
        let (rows, cols) = x.dims2();
        if rows == 0 {
            return Err(Error::dim("mean_rows", x.shape(), &[1]));
        }
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            for (acc, v) in data.iter_mut().zip(x.row(r)) {
                *acc += v;
            }
        }
        for v in &mut data {
            *v /= rows as f64;
        }
        let out = Tensor::from_parts(vec![1, cols], data);
        if !rec {
            return Ok(out);
        }
        Ok(self.finish(Op::MeanRows { rows, cols }, &[x], out))
    }

    /// Concatenates matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let rec = self.check(parts)?;
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".to_string()))?;
        let (r0, c0) = first.dims2();
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.dims2();
            match axis {
                0 if c == c0 => sizes.push(r),
                1 if r == r0 => sizes.push(c),
                0 | 1 => return Err(Error::dim("concat", first.shape(), p.shape())),
                _ => {
                    return Err(Error::Index {
                        what: "concat axis",
                        index: axis,
                        len: 2,
                    })
                }
            }
        }
        let total: usize = sizes.iter().sum();
        let (rows, cols) = if axis == 0 { (total, c0) } else { (r0, total) };
        let mut data = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for p in parts {
                data.extend_from_slice(p.data());
            }
        } else {
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(p.row(r));
                }
            }
        }
        let out = Tensor::from_parts(vec![rows, cols], data);
        if !rec {
            return Ok(out);
        }
        let op = Op::Concat {
            axis,
            sizes,
            rows,
            cols,
        };
        Ok(self.finish(op, parts, out))
    }

    pub fn slice_rows(&self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let rec = self.check(&[x])?;
        let (rows, cols) = x.dims2();
        if start + len > rows {
            return Err(Error::Index {
                what: "slice_rows",
                index: start + len,
                len: rows,
            });
        }
        let data = x.data()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::from_parts(vec![len, cols], data);
        if !rec {
            return Ok(out);
        }
        let op = Op::SliceRows {
            start,
            len,
            rows,
            cols,
        };
        Ok(self.finish(op, &[x], out))
    }

    /// Multi-head scaled dot-product attention of `q` (n×d) over keys `k`
    /// and values `v` (m×d), scaled by `1/sqrt(d / heads)`.
    ///
    /// Retains the attention probabilities whenever it records, `v` when
    /// `q` or `k` needs a gradient, `k` when `q` does, and `q` when `k` does.
    pub fn attention(&self, q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
        let rec = self.check(&[q, k, v])?;
        if q.shape().len() != 2
            || k.shape().len() != 2
            || k.shape() != v.shape()
            || q.shape()[1] != k.shape()[1]
        {
            return Err(Error::dim("attention", q.shape(), k.shape()));
        }
        let (n, d) = (q.shape()[0], q.shape()[1]);
        let m = k.shape()[0];
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        let (out, probs) = kernels::attention(q.data(), k.data(), v.data(), n, m, d, heads);
        let out = Tensor::from_parts(vec![n, d], out);
        if !rec {
            return Ok(out);
        }
        let scores_need = q.requires_grad() || k.requires_grad();
        let op = Op::Attention {
            probs: self.retain_new(probs),
            q: k.requires_grad().then(|| self.retain(q)),
            k: q.requires_grad().then(|| self.retain(k)),
            v: scores_need.then(|| self.retain(v)),
            n,
            m,
            d,
            heads,
        };
        Ok(self.finish(op, &[q, k, v], out))
    }

    /// `-log softmax(logits)[label]` as a scalar.
    pub fn cross_entropy(&self, logits: &Tensor, label: usize) -> Result<Tensor> {
        let rec = self.check(&[logits])?;
        let c = logits.numel();
        if label >= c {
            return Err(Error::Index {
                what: "class label",
                index: label,
                len: c,
            });
        }
        let mut probs = logits.data().to_vec();
        kernels::softmax_in_place(&mut probs);
        let max = logits
            .data()
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + logits
                .data()
                .iter()
                .map(|v| (v - max).exp())
                .sum::<f64>()
                .ln();
        let out = Tensor::scalar(lse - logits.data()[label]);
        if !rec {
            return Ok(out);
        }
        let op = Op::CrossEntropy {
            probs: self.retain_new(probs),
            label,
        };
        Ok(self.finish(op, &[logits], out))
    }

    pub fn sum(&self, x: &Tensor) -> Result<Tensor> {
        let rec = self.check(&[x])?;
        let out = Tensor::scalar(x.data().iter().sum());
        if !rec {
            return Ok(out);
        }
        Ok(self.finish(Op::Sum { numel: x.numel() }, &[x], out))
    }

    // -- backward ------------------------------------------------------------

    /// Reverse pass from a scalar `loss`. The returned map holds one gradient
    /// per watched leaf that `loss` depends on.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let root = loss
            .node()
            .ok_or_else(|| Error::Contract("loss is not tracked by any tape".to_string()))?;
        if root.tape != self.id {
            return Err(Error::Contract(
                "loss belongs to a different tape".to_string(),
            ));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.index + 1];
        grads[root.index] = Some(vec![1.0]);
        let mut leaves = HashMap::new();

        for idx in (0..=root.index).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            let p = &node.parents;
            match &node.op {
                Op::Leaf => {
                    leaves.insert(idx, Tensor::from_parts(node.shape.clone(), g));
                }
                Op::MatMul { a, b, m, k, n } => {
                    if let (Some(pa), Some(b)) = (p[0], b) {
                        accumulate(&mut grads, pa, kernels::matmul_bt(&g, b, *m, *k, *n));
                    }
                    if let (Some(pb), Some(a)) = (p[1], a) {
                        accumulate(&mut grads, pb, kernels::matmul_at(a, &g, *m, *k, *n));
                    }
                }
                Op::Add => {
                    if let Some(pa) = p[0] {
                        accumulate(&mut grads, pa, g.clone());
                    }
                    if let Some(pb) = p[1] {
                        accumulate(&mut grads, pb, g);
                    }
                }
                Op::AddRow { cols } => {
                    if let Some(pb) = p[1] {
                        let mut db = vec![0.0; *cols];
                        for row in g.chunks(*cols) {
                            for (acc, v) in db.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut grads, pb, db);
                    }
                    if let Some(px) = p[0] {
                        accumulate(&mut grads, px, g);
                    }
                }
                Op::Mul { a, b } => {
                    if let (Some(pa), Some(b)) = (p[0], b) {
                        accumulate(
                            &mut grads,
                            pa,
                            g.iter().zip(b.iter()).map(|(x, y)| x * y).collect(),
                        );
                    }
                    if let (Some(pb), Some(a)) = (p[1], a) {
                        accumulate(
                            &mut grads,
                            pb,
                            g.iter().zip(a.iter()).map(|(x, y)| x * y).collect(),
                        );
                    }
                }
                Op::Scale(s) => {
                    if let Some(px) = p[0] {
                        accumulate(&mut grads, px, g.iter().map(|v| v * s).collect());
                    }
                }
                Op::Gelu { input } => {
                    if let Some(px) = p[0] {
                        let dx = g
                            .iter()
                            .zip(input.iter())
                            .map(|(gv, &x)| gv * kernels::gelu_grad(x))
                            .collect();
                        accumulate(&mut grads, px, dx);
                    }
                }
                Op::Sigmoid { out } => {
                    if let Some(px) = p[0] {
                        let dx = g
                            .iter()
                            .zip(out.iter())
                            .map(|(gv, y)| gv * y * (1.0 - y))
                            .collect();
                        accumulate(&mut grads, px, dx);
                    }
                }
                Op::Softmax { out, cols } => {
                    if let Some(px) = p[0] {
                        let mut dx = vec![0.0; g.len()];
                        for ((dxr, gr), yr) in dx
                            .chunks_mut(*cols)
                            .zip(g.chunks(*cols))
                            .zip(out.chunks(*cols))
                        {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for ((d, gv), y) in dxr.iter_mut().zip(gr).zip(yr) {
                                *d = y * (gv - dot);
                            }
                        }
                        accumulate(&mut grads, px, dx);
                    }
                }
                Op::LayerNorm {
                    xhat,
                    rstd,
                    gamma,
                    d,
                } => {
                    let d = *d;
                    if let Some(pg) = p[1] {
                        let mut dg = vec![0.0; d];
                        for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for c in 0..d {
                                dg[c] += gr[c] * hr[c];
                            }
                        }
                        accumulate(&mut grads, pg, dg);
                    }
                    if let Some(pb) = p[2] {
                        let mut db = vec![0.0; d];
                        for gr in g.chunks(d) {
                            for c in 0..d {
                                db[c] += gr[c];
                            }
                        }
                        accumulate(&mut grads, pb, db);
                    }
                    if let (Some(px), Some(gamma)) = (p[0], gamma) {
                        let mut dx = vec![0.0; g.len()];
                        for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                            let dh: Vec<f64> =
                                gr.iter().zip(gamma.iter()).map(|(a, b)| a * b).collect();
                            let mean_dh = dh.iter().sum::<f64>() / d as f64;
                            let mean_dh_h =
                                dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            for c in 0..d {
                                dx[r * d + c] = rstd[r] * (dh[c] - mean_dh - hr[c] * mean_dh_h);
                            }
                        }
                        accumulate(&mut grads, px, dx);
                    }
                }
                Op::MeanRows { rows, cols } => {
                    if let Some(px) = p[0] {
                        let inv = 1.0 / *rows as f64;
                        let mut dx = Vec::with_capacity(rows * cols);
                        for _ in 0..*rows {
                            dx.extend(g.iter().map(|v| v * inv));
                        }
                        accumulate(&mut grads, px, dx);
                    }
                }
                Op::Concat {
                    axis,
                    sizes,
                    rows,
                    cols,
                } => {
                    let mut offset = 0;
                    for (parent, &size) in p.iter().zip(sizes) {
                        if let Some(pi) = parent {
                            let part = if *axis == 0 {
                                g[offset * cols..(offset + size) * cols].to_vec()
                            } else {
                                let mut v = Vec::with_capacity(rows * size);
                                for r in 0..*rows {
                                    v.extend_from_slice(
                                        &g[r * cols + offset..r * cols + offset + size],
                                    );
                                }
                                v
                            };
                            accumulate(&mut grads, *pi, part);
                        }
                        offset += size;
                    }
                }
                Op::SliceRows {
                    start,
                    len,
                    rows,
                    cols,
                } => {
                    if let Some(px) = p[0] {
                        let mut dx = vec![0.0; rows * cols];
                        dx[start * cols..(start + len) * cols].copy_from_slice(&g);
                        accumulate(&mut grads, px, dx);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    probs,
                    n,
                    m,
                    d,
                    heads,
                } => {
                    let (dq, dk, dv) = attention_backward(
                        &g,
                        q.as_deref().map(|x| x.as_slice()),
                        k.as_deref().map(|x| x.as_slice()),
                        v.as_deref().map(|x| x.as_slice()),
                        probs,
                        (*n, *m, *d, *heads),
                        (p[0].is_some(), p[1].is_some(), p[2].is_some()),
                    );
                    if let (Some(pq), Some(dq)) = (p[0], dq) {
                        accumulate(&mut grads, pq, dq);
                    }
                    if let (Some(pk), Some(dk)) = (p[1], dk) {
                        accumulate(&mut grads, pk, dk);
                    }
                    if let (Some(pv), Some(dv)) = (p[2], dv) {
                        accumulate(&mut grads, pv, dv);
                    }
                }
                Op::CrossEntropy { probs, label } => {
                    if let Some(px) = p[0] {
                        let mut dx: Vec<f64> = probs.iter().map(|pv| pv * g[0]).collect();
                        dx[*label] -= g[0];
                        accumulate(&mut grads, px, dx);
                    }
                }
                Op::Sum { numel } => {
                    if let Some(px) = p[0] {
                        accumulate(&mut grads, px, vec![g[0]; *numel]);
                    }
                }
            }
        }

        Ok(Gradients {
            tape: self.id,
            grads: leaves,
        })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, g: Vec<f64>) {
    match &mut grads[idx] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

type AttnGrads = (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>);

fn attention_backward(
    g: &[f64],
    q: Option<&[f64]>,
    k: Option<&[f64]>,
    v: Option<&[f64]>,
    probs: &[f64],
    (n, m, d, heads): (usize, usize, usize, usize),
    (need_q, need_k, need_v): (bool, bool, bool),
) -> AttnGrads {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = need_q.then(|| vec![0.0; n * d]);
    let mut dk = need_k.then(|| vec![0.0; m * d]);
    let mut dv = need_v.then(|| vec![0.0; m * d]);
    let mut dp = vec![0.0; m];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let p = &probs[(h * n + i) * m..(h * n + i + 1) * m];
            let gi = &g[i * d + off..i * d + off + dh];
            if let Some(dv) = dv.as_mut() {
                for j in 0..m {
                    for c in 0..dh {
                        dv[j * d + off + c] += p[j] * gi[c];
                    }
                }
            }
            if !(need_q || need_k) {
                continue;
            }
            let v = v.expect("values retained when scores need gradients");
            for j in 0..m {
                dp[j] = gi
                    .iter()
                    .zip(&v[j * d + off..j * d + off + dh])
                    .map(|(a, b)| a * b)
                    .sum();
            }
            let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for j in 0..m {
                let ds = p[j] * (dp[j] - dot) * scale;
                if let Some(dq) = dq.as_mut() {
                    let k = k.expect("keys retained when queries need gradients");
                    for c in 0..dh {
                        dq[i * d + off + c] += ds * k[j * d + off + c];
                    }
                }
                if let Some(dk) = dk.as_mut() {
                    let q = q.expect("queries retained when keys need gradients");
                    for c in 0..dh {
                        dk[j * d + off + c] += ds * q[i * d + off + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Gradients of one backward pass, keyed by watched leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        let node = t.node()?;
        if node.tape != self.tape {
            return None;
        }
        self.grads.get(&node.index)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Every gradient buffer in the map.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.values()
    }
}
