//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation in creation order. Values are computed
//! eagerly; [`Graph::backward`] walks the record in reverse and accumulates
//! vector-Jacobian products into every node that (transitively) depends on a
//! leaf created with `requires_grad`.
//!
//! A graph is single-use and single-threaded. Build a fresh one per forward.

use std::sync::Arc;

use crate::error::{CoraError, Result};
use crate::numerics::kernels::{gemm, sigmoid};
use crate::numerics::Tensor;

/// Probability clamp applied before the logarithm in [`Graph::bce`].
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Compressed sparse row matrix, used for graph propagation.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub rows: usize,
    pub cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.rows, self.cols]);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                t.row_mut(r)[c] += v;
            }
        }
        t
    }

    /// Dense product `self * x` where `x` is `cols x d`.
    pub fn matmul_dense(&self, x: &[f64], d: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * d];
        for r in 0..self.rows {
            let dst = &mut out[r * d..(r + 1) * d];
            for (c, v) in self.row(r) {
                for (o, xi) in dst.iter_mut().zip(&x[c * d..(c + 1) * d]) {
                    *o += v * xi;
                }
            }
        }
        out
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Sigmoid(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    CausalSoftmax { x: Var, rows: usize, cols: usize },
    RmsNorm { x: Var, gain: Var, eps: f64, cols: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Reshape(Var),
    GatherRows { table: Var, ids: Vec<usize>, cols: usize },
    SliceRows { x: Var, start: usize, cols: usize },
    SliceCols { x: Var, start: usize, len: usize, cols: usize },
    ConcatRows(Vec<Var>),
    ConcatCols { parts: Vec<Var>, widths: Vec<usize> },
    MeanRows { x: Var, rows: usize },
    SumCols { x: Var, cols: usize },
    Sum(Var),
    Mean(Var),
    GatherElems { x: Var, idx: Vec<usize> },
    Bce { p: Var, labels: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, vocab: usize },
    SpMM { matrix: Arc<Csr>, x: Var, d: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients(Vec<Option<Vec<f64>>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.0.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
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

    fn push(&mut self, what: &str, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if cfg!(debug_assertions) && value.iter().any(|v| !v.is_finite()) {
            return Err(CoraError::NonFinite(what.to_string()));
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("graph nodes are well formed")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Leaf carrying the tensor's values; differentiable iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: t.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.input(t.shape(), t.data().to_vec(), false)
            .expect("tensor shapes are valid")
    }

    pub fn input(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(CoraError::dim(format!(
                "input shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        self.nodes.push(Node {
            shape: shape.to_vec(),
            value: data,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn expect_2d(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(CoraError::dim(format!("{what} expects a 2-D operand, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.expect_2d(a, "matmul")?;
        let (k2, n) = self.expect_2d(b, "matmul")?;
        if k != k2 {
            return Err(CoraError::dim(format!("matmul [{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b, m, k, n }, ng)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(CoraError::dim(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.ng(a) || self.ng(b);
        self.push("add", self.shape(a).to_vec(), out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let ng = self.ng(a) || self.ng(b);
        self.push("sub", self.shape(a).to_vec(), out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        self.push("mul", self.shape(a).to_vec(), out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let ng = self.ng(a);
        self.push("scale", self.shape(a).to_vec(), out, Op::Scale(a, c), ng)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x * sigmoid(x)).collect();
        let ng = self.ng(a);
        self.push("silu", self.shape(a).to_vec(), out, Op::Silu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let ng = self.ng(a);
        self.push("sigmoid", self.shape(a).to_vec(), out, Op::Sigmoid(a), ng)
    }

    /// Softmax along `axis`, stabilised by subtracting the maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(CoraError::dim(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let ng = self.ng(x);
        self.push("softmax", shape, out, Op::Softmax { x, outer, len, inner }, ng)
    }

    /// Row softmax of a `rows x cols` score matrix where row `i` may only see
    /// columns `j <= i + (cols - rows)`. Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.expect_2d(x, "causal_softmax")?;
        if cols < rows {
            return Err(CoraError::dim("causal_softmax needs cols >= rows"));
        }
        let offset = cols - rows;
        let src = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let visible = r + offset + 1;
            let row = &src[r * cols..r * cols + visible];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[r * cols..r * cols + visible];
            let mut total = 0.0;
            for (d, s) in dst.iter_mut().zip(row) {
                *d = (s - max).exp();
                total += *d;
            }
            dst.iter_mut().for_each(|d| *d /= total);
        }
        let ng = self.ng(x);
        self.push("causal_softmax", vec![rows, cols], out, Op::CausalSoftmax { x, rows, cols }, ng)
    }

    /// Row-wise `gain * x / sqrt(mean(x^2) + eps)` over the last axis.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if self.value(gain).len() != cols {
            return Err(CoraError::dim(format!(
                "rms_norm gain has {} entries, rows have {cols}",
                self.value(gain).len()
            )));
        }
        let src = self.value(x);
        let g = self.value(gain);
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for j in 0..cols {
                out[r * cols + j] = g[j] * row[j] * inv;
            }
        }
        let ng = self.ng(x) || self.ng(gain);
        let shape = self.shape(x).to_vec();
        self.push("rms_norm", shape, out, Op::RmsNorm { x, gain, eps, cols }, ng)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.expect_2d(x, "transpose")?;
        let src = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        let ng = self.ng(x);
        self.push("transpose", vec![cols, rows], out, Op::Transpose { x, rows, cols }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(CoraError::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let out = self.value(x).to_vec();
        let ng = self.ng(x);
        self.push("reshape", shape.to_vec(), out, Op::Reshape(x), ng)
    }

    /// Embedding lookup: rows `ids` of a 2-D table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.expect_2d(table, "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(CoraError::Index(format!("row {bad} of a table with {rows} rows")));
        }
        if ids.is_empty() {
            return Err(CoraError::dim("gather_rows with no ids"));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let ng = self.ng(table);
        self.push(
            "gather_rows",
            vec![ids.len(), cols],
            out,
            Op::GatherRows { table, ids: ids.to_vec(), cols },
            ng,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.expect_2d(x, "slice_rows")?;
        if len == 0 || start + len > rows {
            return Err(CoraError::dim(format!("rows {start}..{} of {rows}", start + len)));
        }
        let out = self.value(x)[start * cols..(start + len) * cols].to_vec();
        let ng = self.ng(x);
        self.push("slice_rows", vec![len, cols], out, Op::SliceRows { x, start, cols }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.expect_2d(x, "slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(CoraError::dim(format!("cols {start}..{} of {cols}", start + len)));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let ng = self.ng(x);
        self.push("slice_cols", vec![rows, len], out, Op::SliceCols { x, start, len, cols }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| CoraError::dim("concat_rows of nothing"))?;
        let (_, cols) = self.expect_2d(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.expect_2d(p, "concat_rows")?;
            if c != cols {
                return Err(CoraError::dim(format!("concat_rows widths {cols} vs {c}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push("concat_rows", vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| CoraError::dim("concat_cols of nothing"))?;
        let (rows, _) = self.expect_2d(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.expect_2d(p, "concat_cols")?;
            if r != rows {
                return Err(CoraError::dim(format!("concat_cols heights {rows} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            "concat_cols",
            vec![rows, total],
            out,
            Op::ConcatCols { parts: parts.to_vec(), widths },
            ng,
        )
    }

    /// Mean over rows: `[rows x cols] -> [1 x cols]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.expect_2d(x, "mean_rows")?;
        let src = self.value(x);
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(&src[r * cols..(r + 1) * cols]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        let ng = self.ng(x);
        self.push("mean_rows", vec![1, cols], out, Op::MeanRows { x, rows }, ng)
    }

    /// Sum over the last axis: `[rows x cols] -> [rows]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        let out = self.value(x).chunks(cols).map(|c| c.iter().sum()).collect();
        let ng = self.ng(x);
        self.push("sum_cols", vec![rows], out, Op::SumCols { x, cols }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        let ng = self.ng(x);
        self.push("sum", vec![1], vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(x);
        self.push("mean", vec![1], vec![s], Op::Mean(x), ng)
    }

    /// Picks flat elements `idx` into a 1-D result.
    pub fn gather_elems(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(CoraError::Index(format!("element {bad} of {}", src.len())));
        }
        let out = idx.iter().map(|&i| src[i]).collect();
        let ng = self.ng(x);
        self.push("gather_elems", vec![idx.len()], out, Op::GatherElems { x, idx: idx.to_vec() }, ng)
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 `labels`.
    ///
    /// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the
    /// logarithm; the gradient is evaluated at the clamped value.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        let probs = self.value(p);
        if probs.len() != labels.len() {
            return Err(CoraError::dim(format!(
                "bce: {} probabilities, {} labels",
                probs.len(),
                labels.len()
            )));
        }
        if let Some(y) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(CoraError::Validation(format!("label {y} is not 0 or 1")));
        }
        let n = labels.len() as f64;
        let loss = probs
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        let ng = self.ng(p);
        self.push("bce", vec![1], vec![loss], Op::Bce { p, labels: labels.to_vec() }, ng)
    }

    /// Mean next-token cross-entropy over the rows with a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, vocab) = self.expect_2d(logits, "cross_entropy")?;
        if targets.len() != rows {
            return Err(CoraError::dim(format!("{} targets for {rows} rows", targets.len())));
        }
        let counted = targets.iter().flatten().count();
        if counted == 0 {
            return Err(CoraError::dim("cross_entropy without targets"));
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(CoraError::Index(format!("target {bad} outside vocabulary {vocab}")));
        }
        let src = self.value(logits);
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                let row = &src[r * vocab..(r + 1) * vocab];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - row[*t];
            }
        }
        loss /= counted as f64;
        let ng = self.ng(logits);
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec(), vocab },
            ng,
        )
    }

    /// Sparse-dense product `matrix * x`.
    pub fn spmm(&mut self, matrix: &Arc<Csr>, x: Var) -> Result<Var> {
        let (rows, d) = self.expect_2d(x, "spmm")?;
        if rows != matrix.cols {
            return Err(CoraError::dim(format!(
                "spmm [{}x{}] x [{rows}x{d}]",
                matrix.rows, matrix.cols
            )));
        }
        let out = matrix.matmul_dense(self.value(x), d);
        let ng = self.ng(x);
        self.push("spmm", vec![matrix.rows, d], out, Op::SpMM { matrix: Arc::clone(matrix), x, d }, ng)
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if !self.ng(root) {
            return Gradients(grads);
        }
        grads[root.0] = Some(vec![1.0; self.value(root).len()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients(grads)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.ng(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (self.value(a), self.value(b));
                acc(a, &mut |ga| gemm(m, n, k, g, false, bv, true, ga, 1.0));
                acc(b, &mut |gb| gemm(k, m, n, av, true, g, false, gb, 1.0));
            }
            &Op::Add(a, b) => {
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                acc(a, &mut |ga| {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                });
                acc(b, &mut |gb| {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                });
            }
            &Op::Scale(a, c) => acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            &Op::Silu(a) => {
                let av = self.value(a);
                acc(a, &mut |ga| {
                    for ((x, gi), &xi) in ga.iter_mut().zip(g).zip(av) {
                        let s = sigmoid(xi);
                        *x += gi * s * (1.0 + xi * (1.0 - s));
                    }
                });
            }
            &Op::Sigmoid(a) => {
                let y = &node.value;
                acc(a, &mut |ga| {
                    for ((x, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *x += gi * yi * (1.0 - yi);
                    }
                });
            }
            &Op::Softmax { x, outer, len, inner } => {
                let y = &node.value;
                acc(x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            &Op::CausalSoftmax { x, rows, cols } => {
                let y = &node.value;
                let offset = cols - rows;
                acc(x, &mut |gx| {
                    for r in 0..rows {
                        let span = r * cols..r * cols + r + offset + 1;
                        let dot: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a * b).sum();
                        for j in span {
                            gx[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            &Op::RmsNorm { x, gain, eps, cols } => {
                let xv = self.value(x);
                let gv = self.value(gain);
                let rows = xv.len() / cols;
                let inv: Vec<f64> = xv
                    .chunks(cols)
                    .map(|row| 1.0 / (row.iter().map(|v| v * v).sum::<f64>() / cols as f64 + eps).sqrt())
                    .collect();
                acc(x, &mut |gx| {
                    for r in 0..rows {
                        let base = r * cols;
                        let s = inv[r];
                        // d/dx_i of g_i x_i s with s = (mean x^2 + eps)^{-1/2}
                        let dot: f64 = (0..cols).map(|j| g[base + j] * gv[j] * xv[base + j]).sum();
                        let coef = s * s * s * dot / cols as f64;
                        for j in 0..cols {
                            gx[base + j] += g[base + j] * gv[j] * s - xv[base + j] * coef;
                        }
                    }
                });
                acc(gain, &mut |gg| {
                    for r in 0..rows {
                        for j in 0..cols {
                            gg[j] += g[r * cols + j] * xv[r * cols + j] * inv[r];
                        }
                    }
                });
            }
            &Op::Transpose { x, rows, cols } => acc(x, &mut |gx| {
                for i in 0..rows {
                    for j in 0..cols {
                        gx[i * cols + j] += g[j * rows + i];
                    }
                }
            }),
            &Op::Reshape(x) => acc(x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b)),
            Op::GatherRows { table, ids, cols } => {
                let cols = *cols;
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            gt[id * cols + j] += g[r * cols + j];
                        }
                    }
                });
            }
            &Op::SliceRows { x, start, cols } => acc(x, &mut |gx| {
                for (dst, src) in gx[start * cols..start * cols + g.len()].iter_mut().zip(g) {
                    *dst += src;
                }
            }),
            &Op::SliceCols { x, start, len, cols } => acc(x, &mut |gx| {
                for (r, chunk) in g.chunks(len).enumerate() {
                    for (j, v) in chunk.iter().enumerate() {
                        gx[r * cols + start + j] += v;
                    }
                }
            }),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let part = &g[offset..offset + len];
                    acc(p, &mut |gp| gp.iter_mut().zip(part).for_each(|(a, b)| *a += b));
                    offset += len;
                }
            }
            Op::ConcatCols { parts, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut start = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    acc(p, &mut |gp| {
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + start + j];
                            }
                        }
                    });
                    start += w;
                }
            }
            &Op::MeanRows { x, rows } => acc(x, &mut |gx| {
                let cols = g.len();
                for r in 0..rows {
                    for j in 0..cols {
                        gx[r * cols + j] += g[j] / rows as f64;
                    }
                }
            }),
            &Op::SumCols { x, cols } => acc(x, &mut |gx| {
                for (i, v) in gx.iter_mut().enumerate() {
                    *v += g[i / cols];
                }
            }),
            &Op::Sum(x) => acc(x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            &Op::Mean(x) => acc(x, &mut |gx| {
                let n = gx.len() as f64;
                gx.iter_mut().for_each(|v| *v += g[0] / n);
            }),
            Op::GatherElems { x, idx } => acc(*x, &mut |gx| {
                for (k, &i) in idx.iter().enumerate() {
                    gx[i] += g[k];
                }
            }),
            Op::Bce { p, labels } => {
                let pv = self.value(*p);
                let n = labels.len() as f64;
                acc(*p, &mut |gp| {
                    for ((x, &pi), &y) in gp.iter_mut().zip(pv).zip(labels) {
                        let pc = pi.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                        *x += g[0] * (-y / pc + (1.0 - y) / (1.0 - pc)) / n;
                    }
                });
            }
            Op::CrossEntropy { logits, targets, vocab } => {
                let lv = self.value(*logits);
                let vocab = *vocab;
                let counted = targets.iter().flatten().count() as f64;
                acc(*logits, &mut |gl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        let row = &lv[r * vocab..(r + 1) * vocab];
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for j in 0..vocab {
                            let p = (row[j] - max).exp() / total;
                            let y = if j == *t { 1.0 } else { 0.0 };
                            gl[r * vocab + j] += g[0] * (p - y) / counted;
                        }
                    }
                });
            }
            Op::SpMM { matrix, x, d } => {
                let d = *d;
                acc(*x, &mut |gx| {
                    for r in 0..matrix.rows {
                        for (c, v) in matrix.row(r) {
                            for j in 0..d {
                                gx[c * d + j] += v * g[r * d + j];
                            }
                        }
                    }
                });
            }
        }
    }
}
