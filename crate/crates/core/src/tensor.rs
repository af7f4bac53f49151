//! Reverse-mode automatic differentiation over dense, row-major `f64` tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Values are
//! immutable once recorded; [`Graph::backward`] replays the recorded rules in
//! reverse creation order and returns a [`Gradients`] table holding one
//! accumulator per node that requires a gradient.
//!
//! Broadcasting is deliberately narrow: a single-element tensor may be
//! combined with any tensor, and a bias row may be added to every row of a
//! matrix ([`Graph::add_bias`]). Everything else must match exactly.

use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("index {index} out of range in {op} (limit {limit})")]
    Index {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("contract violated in {op}: {msg}")]
    Contract { op: &'static str, msg: String },
}

fn contract(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Contract { op, msg: msg.into() }
}

/// Dense row-major tensor value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(contract(
                "tensor",
                format!("dimensions must be positive, got {shape:?}"),
            ));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n]).expect("positive dimensions")
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(TensorError::Shape {
                op: "from_rows",
                left: vec![cols],
                right: vec![bad.len()],
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension of a matrix (1 for vectors).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(TensorError::Shape {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }
}

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    MeanRows(Var),
}

struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Operation record of one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf holding a trainable value.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf sharing storage with an existing value (parameters).
    pub fn shared_leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        let t = self.value(v);
        if !t.is_matrix() {
            return Err(contract(op, format!("expected a matrix, got shape {:?}", t.shape())));
        }
        Ok((t.shape[0], t.shape[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, n) = self.matrix("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    fn broadcast_pair(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || self.value(b).len() == 1 {
            Ok(sa.to_vec())
        } else if self.value(a).len() == 1 {
            Ok(sb.to_vec())
        } else {
            Err(TensorError::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            })
        }
    }

    /// Elementwise sum; either operand may be a single element.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let shape = self.broadcast_pair("add", a, b)?;
        let out = zip_broadcast(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    /// Adds a bias row `[d]` (or `[1×d]`) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let d = self.value(x).cols();
        if self.value(bias).len() != d {
            return Err(TensorError::Shape {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % d])
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias(x, bias), rg))
    }

    /// Elementwise product; either operand may be a single element.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let shape = self.broadcast_pair("mul", a, b)?;
        let out = zip_broadcast(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v * s).collect(),
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Softmax along `axis`, stabilised by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Index {
                op: "softmax",
                index: axis,
                limit: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(src[base + j * inner]);
                }
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    total += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= total;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, outer, len, inner }, rg))
    }

    /// Normalises each row (last axis) to zero mean and unit variance, then
    /// applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let d = self.value(x).cols();
        for p in [gamma, beta] {
            if self.value(p).len() != d {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.value(x).data();
        let rows = src.len() / d;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t
                .data
                .iter()
                .map(|&v| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)))
                .collect(),
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| sigmoid(v)).collect(),
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let (n, c) = self.matrix("cross_entropy_logits", logits)?;
        if targets.len() != n {
            return Err(TensorError::Shape {
                op: "cross_entropy_logits",
                left: vec![n, c],
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::Index {
                op: "cross_entropy_logits",
                index: bad,
                limit: c,
            });
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &src[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            loss += log_z - row[t];
            for j in 0..c {
                probs[r * c + j] = (row[j] - log_z).exp();
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Row gather `table[ids]`; the gradient scatters additively.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (v, d) = self.matrix("gather_rows", table)?;
        if ids.is_empty() {
            return Err(contract("gather_rows", "empty id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Index {
                op: "gather_rows",
                index: bad,
                limit: v,
            });
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or_else(|| contract("concat_rows", "no inputs"))?;
        let (_, d) = self.matrix("concat_rows", first)?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.matrix("concat_rows", p)?;
            if c != d {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            out.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![rows, d], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, d) = self.matrix("slice_rows", x)?;
        if len == 0 || start + len > r {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: start + len,
                limit: r,
            });
        }
        let out = self.value(x).data()[start * d..(start + len) * d].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![len, d], out)?, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or_else(|| contract("concat_cols", "no inputs"))?;
        let (r, _) = self.matrix("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.matrix("concat_cols", p)?;
            if pr != r {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..r {
                out[i * total + offset..i * total + offset + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![r, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.matrix("slice_cols", x)?;
        if len == 0 || start + len > c {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                limit: c,
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![r, len], out)?, Op::SliceCols { x, start }, rg))
    }

    /// Column means of a matrix, as a `[1×d]` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, d) = self.matrix("mean_rows", x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; d];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(&src[i * d..(i + 1) * d]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![1, d], out)?, Op::MeanRows(x), rg))
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(self.finish(grads));
        }
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.apply_rule(id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Ok(self.finish(grads))
    }

    fn finish(&self, mut grads: Vec<Option<Vec<f64>>>) -> Gradients {
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[id].is_none() {
                grads[id] = Some(vec![0.0; node.value.len()]);
            } else if !node.requires_grad {
                grads[id] = None;
            }
        }
        Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
            grads,
        }
    }

    fn apply_rule(&self, id: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                let n = self.value(*b).shape[1];
                if self.requires_grad(*a) {
                    // dA = dC · Bᵀ
                    let bd = self.value(*b).data();
                    self.accumulate(grads, *a, |g| gemm(m, n, k, dy, (n, 1), bd, (1, n), g));
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · dC
                    let ad = self.value(*a).data();
                    self.accumulate(grads, *b, |g| gemm(k, m, n, ad, (1, k), dy, (n, 1), g));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                self.accumulate(grads, *a, |g| {
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += dy[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |g| reduce_into(g, dy, |d, _| d, out.len()));
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, |g| add_into(g, dy));
                let d = self.value(*bias).len();
                self.accumulate(grads, *bias, |g| {
                    for (i, v) in dy.iter().enumerate() {
                        g[i % d] += v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |g| {
                    reduce_into(g, dy, |d, i| d * bd[if bd.len() == 1 { 0 } else { i }], out.len())
                });
                self.accumulate(grads, *b, |g| {
                    reduce_into(g, dy, |d, i| d * ad[if ad.len() == 1 { 0 } else { i }], out.len())
                });
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d * s));
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |g| g.iter_mut().for_each(|g| *g += dy[0]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                self.accumulate(grads, *x, |g| g.iter_mut().for_each(|g| *g += dy[0] / n));
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = out.data();
                self.accumulate(grads, *x, |g| {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for j in 0..*len {
                                let k = base + j * inner;
                                dot += dy[k] * y[k];
                            }
                            for j in 0..*len {
                                let k = base + j * inner;
                                g[k] += y[k] * (dy[k] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma).data();
                let d = gv.len();
                let rows = xhat.len() / d;
                self.accumulate(grads, *x, |g| {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for c in 0..d {
                            let v = dy[r * d + c] * gv[c];
                            dxhat[c] = v;
                            s1 += v;
                            s2 += v * xhat[r * d + c];
                        }
                        let scale = rstd[r] / d as f64;
                        for c in 0..d {
                            g[r * d + c] += scale * (d as f64 * dxhat[c] - s1 - xhat[r * d + c] * s2);
                        }
                    }
                });
                self.accumulate(grads, *gamma, |g| {
                    for (i, v) in dy.iter().enumerate() {
                        g[i % d] += v * xhat[i];
                    }
                });
                self.accumulate(grads, *beta, |g| {
                    for (i, v) in dy.iter().enumerate() {
                        g[i % d] += v;
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                self.accumulate(grads, *x, |g| {
                    for ((g, d), &v) in g.iter_mut().zip(dy).zip(xd) {
                        let cdf = 0.5 * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
                        let pdf = (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
                        *g += d * (cdf + v * pdf);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                self.accumulate(grads, *x, |g| {
                    for ((g, d), y) in g.iter_mut().zip(dy).zip(y) {
                        *g += d * y * (1.0 - y);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = targets.len();
                let c = probs.len() / n;
                let s = dy[0] / n as f64;
                self.accumulate(grads, *logits, |g| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            g[r * c + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = self.value(*table).cols();
                self.accumulate(grads, *table, |g| {
                    for (r, &i) in ids.iter().enumerate() {
                        for c in 0..d {
                            g[i * d + c] += dy[r * d + c];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, |g| add_into(g, &dy[offset..offset + n]));
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let d = self.value(*x).cols();
                self.accumulate(grads, *x, |g| add_into(&mut g[start * d..start * d + dy.len()], dy));
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate(grads, p, |g| {
                        for i in 0..rows {
                            add_into(
                                &mut g[i * w..(i + 1) * w],
                                &dy[i * total + offset..i * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).cols();
                let w = out.cols();
                self.accumulate(grads, *x, |g| {
                    for i in 0..out.rows() {
                        add_into(&mut g[i * c + start..i * c + start + w], &dy[i * w..(i + 1) * w]);
                    }
                });
            }
            Op::MeanRows(x) => {
                let t = self.value(*x);
                let (r, d) = (t.rows(), t.cols());
                self.accumulate(grads, *x, |g| {
                    for i in 0..r {
                        for c in 0..d {
                            g[i * d + c] += dy[c] / r as f64;
                        }
                    }
                });
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.requires_grad(v) {
            return;
        }
        let n = self.value(v).len();
        let g = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(g);
    }
}

/// Gradient table produced by [`Graph::backward`].
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of `v`; present iff `v` requires a gradient.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.shapes[v.0].clone(),
            data: g.clone(),
        })
    }

    pub fn data(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn zip_broadcast(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match (a.len(), b.len()) {
        (n, m) if n == m => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        (_, 1) => a.iter().map(|&x| f(x, b[0])).collect(),
        _ => b.iter().map(|&y| f(a[0], y)).collect(),
    }
}

fn add_into(g: &mut [f64], dy: &[f64]) {
    for (g, d) in g.iter_mut().zip(dy) {
        *g += d;
    }
}

/// Accumulates `map(dy[i], i)` into `g`, summing everything into `g[0]` when
/// `g` is a broadcast scalar.
fn reduce_into(g: &mut [f64], dy: &[f64], map: impl Fn(f64, usize) -> f64, n: usize) {
    if g.len() == n {
        for (i, (g, &d)) in g.iter_mut().zip(dy).enumerate() {
            *g += map(d, i);
        }
    } else {
        g[0] += dy.iter().enumerate().map(|(i, &d)| map(d, i)).sum::<f64>();
    }
}

/// `c += a · b` with `a` as `m×k` and `b` as `k×n`, both given by
/// (row stride, column stride). `c` is dense row-major `m×n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() == m * n);
    // SAFETY: the slices cover every index touched for the given dimensions
    // and strides (asserted above), and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Finite-difference verification of a scalar function of one tensor.
///
/// Returns the maximum over coordinates of
/// `|analytic - central| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let loss = f(&mut g, xv)?;
    let analytic = g.backward(loss)?.get(xv).expect("leaf requires grad");

    let eval = |t: Tensor| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let v = g.leaf(t, false);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data[i] += h;
        let mut minus = x.clone();
        minus.data[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn identity_matmul_backward_all_ones() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let b = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(), true);
        let c = g.matmul(i, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[1.0; 4]);
        assert!(grads.get(i).is_none());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
    }

    #[test]
    fn matmul_matches_finite_differences() {
        let b = rand_tensor(&[4, 2], 2);
        let f = |g: &mut Graph, x: Var| {
            let bv = g.constant(b.clone());
            let c = g.matmul(x, bv)?;
            let sq = g.mul(c, c)?;
            Ok(g.sum(sq))
        };
        let err = grad_check(f, &rand_tensor(&[3, 4], 1), 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
        let a = rand_tensor(&[3, 4], 3);
        let f = |g: &mut Graph, x: Var| {
            let av = g.constant(a.clone());
            let c = g.matmul(av, x)?;
            let sq = g.mul(c, c)?;
            Ok(g.sum(sq))
        };
        let err = grad_check(f, &rand_tensor(&[4, 2], 4), 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(Tensor::new(vec![2], vec![2f64.ln(), 0.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        assert!((g.value(y).data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        // exp(-1000) underflows to 0 in f64; an exact oracle gives
        // 1 / (1 + e^-1000) which rounds to 1.0.
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);
        assert!(g.value(y).data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_over_first_axis_of_matrix() {
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&[3, 4], 9));
        let y = g.softmax(x, 0).unwrap();
        let t = g.value(y);
        for c in 0..4 {
            let s: f64 = (0..3).map(|r| t.at(r, c)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(matches!(g.softmax(x, 2), Err(TensorError::Index { .. })));
    }

    #[test]
    fn softmax_grad_check_both_axes() {
        let w = rand_tensor(&[3, 4], 11);
        for axis in 0..2 {
            let w = w.clone();
            let f = move |g: &mut Graph, x: Var| {
                let y = g.softmax(x, axis)?;
                let wv = g.constant(w.clone());
                let p = g.mul(y, wv)?;
                Ok(g.sum(p))
            };
            let err = grad_check(f, &rand_tensor(&[3, 4], 12), 1e-5).unwrap();
            assert!(err < 1e-6, "axis {axis}: {err}");
        }
    }

    #[test]
    fn layer_norm_constant_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[2, 4], 3.0));
        let gamma = g.constant(Tensor::ones(&[4]));
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let beta = g.constant(Tensor::filled(&[4], 0.7));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn layer_norm_random_row_statistics() {
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&[1, 16], 5));
        let gamma = g.constant(Tensor::ones(&[16]));
        let beta = g.constant(Tensor::zeros(&[16]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        let out = g.value(y).data();
        // Direct recomputation of the moments.
        let mean = out.iter().sum::<f64>() / 16.0;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-9);
        let src = rand_tensor(&[1, 16], 5);
        let m0 = src.data().iter().sum::<f64>() / 16.0;
        let v0 = src.data().iter().map(|v| (v - m0).powi(2)).sum::<f64>() / 16.0;
        assert!((var - v0 / (v0 + 1e-5)).abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn layer_norm_grad_check() {
        let gamma = rand_tensor(&[5], 21);
        let beta = rand_tensor(&[5], 22);
        let w = rand_tensor(&[3, 5], 23);
        let f = |g: &mut Graph, x: Var| {
            let (gm, bt, wv) = (
                g.constant(gamma.clone()),
                g.constant(beta.clone()),
                g.constant(w.clone()),
            );
            let y = g.layer_norm(x, gm, bt, 1e-5)?;
            let p = g.mul(y, wv)?;
            Ok(g.sum(p))
        };
        assert!(grad_check(f, &rand_tensor(&[3, 5], 24), 1e-5).unwrap() < 1e-6);
        let x = rand_tensor(&[3, 5], 25);
        let f = |g: &mut Graph, gm: Var| {
            let (xv, bt, wv) = (g.constant(x.clone()), g.constant(beta.clone()), g.constant(w.clone()));
            let y = g.layer_norm(xv, gm, bt, 1e-5)?;
            let p = g.mul(y, wv)?;
            Ok(g.sum(p))
        };
        assert!(grad_check(f, &gamma, 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let ce = g.cross_entropy_logits(l, &[0]).unwrap();
        assert!((g.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-15);

        let l = g.constant(Tensor::new(vec![1, 2], vec![10.0, -10.0]).unwrap());
        let ce = g.cross_entropy_logits(l, &[0]).unwrap();
        assert!(g.value(ce).item() < 1e-8);

        let l = g.constant(Tensor::zeros(&[1, 45]));
        let ce = g.cross_entropy_logits(l, &[7]).unwrap();
        assert!((g.value(ce).item() - 45f64.ln()).abs() < 1e-12);
        assert!((g.value(ce).item() - 3.8067).abs() < 1e-4);

        let err = g.cross_entropy_logits(l, &[45]).unwrap_err();
        assert!(matches!(
            err,
            TensorError::Index {
                index: 45,
                limit: 45,
                ..
            }
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut g = Graph::new();
        let l = g.leaf(rand_tensor(&[3, 4], 31), true);
        let ce = g.cross_entropy_logits(l, &[0, 3, 1]).unwrap();
        let grad = g.backward(ce).unwrap().get(l).unwrap();
        let p = g.softmax(l, 1).unwrap();
        let probs = g.value(p);
        for (r, t) in [0usize, 3, 1].iter().enumerate() {
            for c in 0..4 {
                let expect = (probs.at(r, c) - if c == *t { 1.0 } else { 0.0 }) / 3.0;
                assert!((grad.at(r, c) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn product_and_sum_gradients() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let y = g.leaf(Tensor::scalar(3.0), true);
        let l = g.mul(x, y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 3.0);
        assert_eq!(grads.get(y).unwrap().item(), 2.0);

        let mut g = Graph::new();
        let x = g.leaf(rand_tensor(&[2, 3], 1), true);
        let s = g.sum(x);
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(g.backward(x), Err(TensorError::Contract { .. })));
    }

    #[test]
    fn two_layer_composition_matches_finite_differences() {
        let w1 = rand_tensor(&[4, 6], 41);
        let b1 = rand_tensor(&[6], 42);
        let w2 = rand_tensor(&[6, 3], 43);
        let f = |g: &mut Graph, x: Var| {
            let (w1, b1, w2) = (g.constant(w1.clone()), g.constant(b1.clone()), g.constant(w2.clone()));
            let h = g.matmul(x, w1)?;
            let h = g.add_bias(h, b1)?;
            let h = g.gelu(h);
            let o = g.matmul(h, w2)?;
            g.cross_entropy_logits(o, &[2, 0])
        };
        assert!(grad_check(f, &rand_tensor(&[2, 4], 44), 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn grad_check_trivial_functions() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(grad_check(|g, x| Ok(g.sum(x)), &x, 1e-5).unwrap() < 1e-9);
        let f = |g: &mut Graph, x: Var| {
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        };
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let l = f(&mut g, xv).unwrap();
        assert_eq!(g.backward(l).unwrap().get(xv).unwrap().data(), &[2.0, 4.0]);
        assert!(grad_check(f, &x, 1e-5).unwrap() < 1e-8);
    }

    #[test]
    fn reuse_accumulates_path_gradients() {
        let w = rand_tensor(&[3, 3], 51);
        let x0 = rand_tensor(&[2, 3], 52);
        let path_a = |g: &mut Graph, x: Var| -> Result<Var, TensorError> {
            let wv = g.constant(w.clone());
            let y = g.matmul(x, wv)?;
            let y = g.gelu(y);
            Ok(g.sum(y))
        };
        let path_b = |g: &mut Graph, x: Var| -> Result<Var, TensorError> {
            let s = g.softmax(x, 1)?;
            let s = g.mul(s, x)?;
            Ok(g.sum(s))
        };
        let single = |f: &dyn Fn(&mut Graph, Var) -> Result<Var, TensorError>| {
            let mut g = Graph::new();
            let x = g.leaf(x0.clone(), true);
            let l = f(&mut g, x).unwrap();
            g.backward(l).unwrap().get(x).unwrap()
        };
        let ga = single(&path_a);
        let gb = single(&path_b);
        let mut g = Graph::new();
        let x = g.leaf(x0.clone(), true);
        let a = path_a(&mut g, x).unwrap();
        let b = path_b(&mut g, x).unwrap();
        let l = g.add(a, b).unwrap();
        let both = g.backward(l).unwrap().get(x).unwrap();
        for i in 0..both.len() {
            assert!((both.data()[i] - ga.data()[i] - gb.data()[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn structural_ops_grad_check() {
        let w = rand_tensor(&[5, 7], 61);
        let f = |g: &mut Graph, x: Var| {
            let t = g.transpose(x)?; // 4x3
            let a = g.slice_rows(t, 1, 2)?;
            let b = g.slice_cols(x, 1, 2)?; // 3x2
            let bt = g.transpose(b)?; // 2x3
            let c = g.concat_cols(&[a, bt])?; // 2x6
            let c2 = g.concat_rows(&[c, c])?; // 4x6
            let m = g.mean_rows(c2)?;
            let gathered = g.gather_rows(x, &[0, 2, 2])?;
            let gm = g.mean_rows(gathered)?;
            let wv = g.constant(w.clone());
            let ws = g.slice_rows(wv, 0, 1)?;
            let ws = g.slice_cols(ws, 0, 6)?;
            let p = g.mul(m, ws)?;
            let s1 = g.sum(p);
            let s2 = g.mean(gm);
            let sc = g.scale(s2, 0.3);
            let sig = g.sigmoid(sc);
            g.add(s1, sig)
        };
        assert!(grad_check(f, &rand_tensor(&[3, 4], 62), 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn broadcast_rules() {
        let mut g = Graph::new();
        let a = g.leaf(rand_tensor(&[2, 3], 71), true);
        let s = g.leaf(Tensor::scalar(2.0), true);
        let p = g.mul(a, s).unwrap();
        let q = g.add(p, s).unwrap();
        let l = g.sum(q);
        let grads = g.backward(l).unwrap();
        let a_sum: f64 = g.value(a).data().iter().sum();
        assert!((grads.get(s).unwrap().item() - (a_sum + 6.0)).abs() < 1e-12);
        let bad = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(a, bad), Err(TensorError::Shape { .. })));
        let bias = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.add_bias(a, bias), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(rand_tensor(&[4, 5], 81), true);
            let w = g.leaf(rand_tensor(&[5, 5], 82), true);
            let h = g.matmul(x, w).unwrap();
            let h = g.softmax(h, 1).unwrap();
            let h = g.matmul(h, w).unwrap();
            let l = g.cross_entropy_logits(h, &[0, 1, 2, 3]).unwrap();
            let grads = g.backward(l).unwrap();
            (grads.get(x).unwrap(), grads.get(w).unwrap())
        };
        let (a, b) = run();
        let (c, d) = run();
        assert!(a.data().iter().zip(c.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(b.data().iter().zip(d.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn tensor_invariants() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!((t.rows(), t.cols()), (2, 3));
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_slices_are_distributions(values in prop::collection::vec(-50.0f64..50.0, 12)) {
                let mut g = Graph::new();
                let x = g.constant(Tensor::new(vec![3, 4], values).unwrap());
                for axis in 0..2 {
                    let y = g.softmax(x, axis).unwrap();
                    let t = g.value(y);
                    prop_assert!(t.data().iter().all(|&v| v >= 0.0));
                    if axis == 1 {
                        for r in 0..3 {
                            prop_assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                        }
                    } else {
                        for c in 0..4 {
                            prop_assert!(((0..3).map(|r| t.at(r, c)).sum::<f64>() - 1.0).abs() < 1e-9);
                        }
                    }
                }
            }
        }
    }
}
