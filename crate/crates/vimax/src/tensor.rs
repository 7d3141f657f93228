//! Reverse-mode automatic differentiation over dense 64-bit-float tensors.
//!
//! A [`Tape`] records every operation of one forward pass (define-by-run, one
//! tape per minibatch); [`Tape::backward`] replays the record in reverse and
//! accumulates gradients into each node. Parameters live outside the tape as
//! [`Tensor`] values and are inserted as leaves each step; after backward the
//! caller pulls leaf gradients back out with [`Tape::grad`].
//!
//! The op set is exactly what MLP classifiers with Gaussian latent layers and
//! kernel-matrix penalties need: matmul, bias broadcast, elementwise
//! arithmetic, reductions, softmax cross-entropy and an MMD node. No
//! convolutions, no higher-order derivatives.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Dense row-major f64 tensor with an optional same-shape gradient
/// accumulator. Scalars have shape `[]`, vectors `[n]`, matrices `[r, c]`.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::contract(format!(
                "tensor shape {:?} requires {} values, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v], grad: None }
    }

    /// A trainable parameter: gradient accumulator allocated and zeroed.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let mut t = Tensor::new(shape, data)?;
        t.grad = Some(vec![0.0; t.data.len()]);
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `delta` into the gradient accumulator (allocating it if absent).
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let g = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node inside one [`Tape`]. Only valid for the tape that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Relu { x: Var },
    Add { a: Var, b: Var },
    /// Matrix plus a row vector broadcast over every row (bias addition).
    AddRow { x: Var, row: Var, cols: usize },
    AddConst { x: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Exp { x: Var },
    Square { x: Var },
    Scale { x: Var, c: f64 },
    Sum { x: Var },
    Mean { x: Var },
    /// Column range `[start, end)` of a matrix.
    SliceCols { x: Var, start: usize, end: usize, cols: usize },
    Clamp { x: Var, lo: f64, hi: f64 },
    /// Fixed-weight linear functional `sum_i w_i * x_i` (weights constant).
    Dot { x: Var, w: Vec<f64> },
    /// Mean over the batch of -log softmax(logits)[label]; saves the softmax.
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    /// Biased V-statistic MMD^2 between the rows of `z` and constant prior
    /// samples, with the rational kernel k(a,b) = dim/(dim + |a-b|^2).
    /// Differentiable w.r.t. `z` only.
    Mmd { z: Var, prior: Vec<f64>, prior_rows: usize },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

/// Computation graph for a single forward/backward pass.
///
/// Nodes are stored in creation order, which is a topological order by
/// construction; backward walks it in exact reverse.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Number of output rows below which matmul stays single-threaded.
const PAR_ROWS: usize = 16;

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node { shape, value, grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Inserts an external tensor as a leaf (copies its current values).
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf)
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, Op::Leaf))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated at `v` by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    /// Value of a scalar node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.value.len() != 1 {
            return Err(Error::contract(format!(
                "expected scalar node, got shape {:?}",
                n.shape
            )));
        }
        Ok(n.value[0])
    }

    fn rows_cols(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.nodes[v.0].shape {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape {
                op,
                lhs: self.nodes[v.0].shape.clone(),
                rhs: vec![],
            }),
        }
    }

    // ── Forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.rows_cols(a, "matmul")?;
        let (kb, n) = self.rows_cols(b, "matmul")?;
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let out = matmul_raw(&self.nodes[a.0].value, &self.nodes[b.0].value, m, ka, n);
        Ok(self.push(vec![m, n], out, Op::Matmul { a, b, m, k: ka, n }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, value, Op::Relu { x })
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, value, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, value, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, value, Op::Mul { a, b }))
    }

    /// `x[r×c] + row[c]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(x, "add_row")?;
        if *self.nodes[row.0].shape != [c] {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[row.0].shape.clone(),
            });
        }
        let mut value = self.nodes[x.0].value.clone();
        let rv = &self.nodes[row.0].value;
        for i in 0..r {
            for j in 0..c {
                value[i * c + j] += rv[j];
            }
        }
        Ok(self.push(vec![r, c], value, Op::AddRow { x, row, cols: c }))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| v + c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, value, Op::AddConst { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| v.exp()).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, value, Op::Exp { x })
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| v * v).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, value, Op::Square { x })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, value, Op::Scale { x, c })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.iter().sum();
        self.push(vec![], vec![s], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len().max(1);
        let s: f64 = self.nodes[x.0].value.iter().sum();
        self.push(vec![], vec![s / n as f64], Op::Mean { x })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.rows_cols(x, "slice_cols")?;
        if start >= end || end > c {
            return Err(Error::contract(format!(
                "slice_cols range {}..{} out of bounds for {} columns",
                start, end, c
            )));
        }
        let w = end - start;
        let src = &self.nodes[x.0].value;
        let mut value = Vec::with_capacity(r * w);
        for i in 0..r {
            value.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        Ok(self.push(vec![r, w], value, Op::SliceCols { x, start, end, cols: c }))
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes through only where
    /// the input lies strictly inside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| v.clamp(lo, hi)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, value, Op::Clamp { x, lo, hi })
    }

    /// Linear functional with constant weights: `sum_i w[i] * x[i]`.
    pub fn dot(&mut self, x: Var, w: &[f64]) -> Result<Var> {
        if self.nodes[x.0].value.len() != w.len() {
            return Err(Error::contract(format!(
                "dot weight length {} vs node size {}",
                w.len(),
                self.nodes[x.0].value.len()
            )));
        }
        let s: f64 = self.nodes[x.0].value.iter().zip(w).map(|(a, b)| a * b).sum();
        Ok(self.push(vec![], vec![s], Op::Dot { x, w: w.to_vec() }))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
    /// per-row max subtraction. Backward yields `(softmax - onehot) / batch`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.rows_cols(logits, "softmax_cross_entropy")?;
        if labels.len() != b {
            return Err(Error::contract(format!(
                "softmax_cross_entropy: {} labels for batch of {}",
                labels.len(),
                b
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::contract(format!(
                "label {} out of range for {} classes",
                bad, c
            )));
        }
        let src = &self.nodes[logits.0].value;
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &src[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                probs[i * c + j] = e;
                denom += e;
            }
            for j in 0..c {
                probs[i * c + j] /= denom;
            }
            loss -= (row[labels[i]] - mx - denom.ln()).max(f64::MIN);
        }
        loss /= b as f64;
        Ok(self.push(
            vec![],
            vec![loss],
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
        ))
    }

    /// Biased V-statistic estimate of squared MMD between the rows of `z`
    /// and the constant `prior` rows, using k(a,b) = dim/(dim + |a-b|^2).
    /// Gradients flow into `z` only.
    pub fn mmd(&mut self, z: Var, prior: &Tensor) -> Result<Var> {
        let (b, k) = self.rows_cols(z, "mmd")?;
        let (m, kp) = match *prior.shape() {
            [m, kp] => (m, kp),
            _ => {
                return Err(Error::Shape {
                    op: "mmd",
                    lhs: vec![b, k],
                    rhs: prior.shape().to_vec(),
                })
            }
        };
        if k != kp {
            return Err(Error::Shape { op: "mmd", lhs: vec![b, k], rhs: vec![m, kp] });
        }
        if b < 2 || m < 2 {
            return Err(Error::contract(format!(
                "mmd requires both sample sets to have >= 2 rows, got {} and {}",
                b, m
            )));
        }
        let v = crate::objectives::mmd_vstat(&self.nodes[z.0].value, prior.data(), k)?;
        Ok(self.push(
            vec![],
            vec![v],
            Op::Mmd { z, prior: prior.data().to_vec(), prior_rows: m },
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Seeds `d loss / d loss = 1` and accumulates gradients into every node
    /// in exact reverse creation order. Gradients add up across calls; the
    /// caller zeroes external accumulators between steps.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.nodes[loss.0].grad[0] += 1.0;

        for id in (0..self.nodes.len()).rev() {
            // Take the node's gradient out to appease the borrow checker while
            // writing into its inputs' gradients.
            let g = std::mem::take(&mut self.nodes[id].grad);
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Matmul { a, b, m, k, n } => {
                    let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                    // a.grad += g . b^T
                    let ga = matmul_bt_raw(&g, &self.nodes[b.0].value, m, n, k);
                    add_into(&mut self.nodes[a.0].grad, &ga);
                    // b.grad += a^T . g
                    let gb = matmul_at_raw(&self.nodes[a.0].value, &g, m, k, n);
                    add_into(&mut self.nodes[b.0].grad, &gb);
                }
                Op::Relu { x } => {
                    let x = *x;
                    let (xs, gx) = value_grad(&mut self.nodes, x.0, id);
                    for i in 0..g.len() {
                        if xs[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    add_into(&mut self.nodes[a.0].grad, &g);
                    add_into(&mut self.nodes[b.0].grad, &g);
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    add_into(&mut self.nodes[a.0].grad, &g);
                    sub_into(&mut self.nodes[b.0].grad, &g);
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let gb: Vec<f64> = self.nodes[a.0]
                        .value
                        .iter()
                        .zip(&g)
                        .map(|(av, gi)| av * gi)
                        .collect();
                    let ga: Vec<f64> = self.nodes[b.0]
                        .value
                        .iter()
                        .zip(&g)
                        .map(|(bv, gi)| bv * gi)
                        .collect();
                    add_into(&mut self.nodes[a.0].grad, &ga);
                    add_into(&mut self.nodes[b.0].grad, &gb);
                }
                Op::AddRow { x, row, cols } => {
                    let (x, row, c) = (*x, *row, *cols);
                    add_into(&mut self.nodes[x.0].grad, &g);
                    let gr = &mut self.nodes[row.0].grad;
                    for (i, gi) in g.iter().enumerate() {
                        gr[i % c] += gi;
                    }
                }
                Op::AddConst { x } => {
                    let x = *x;
                    add_into(&mut self.nodes[x.0].grad, &g);
                }
                Op::Exp { x } => {
                    let x = *x;
                    // d exp = exp(x) dx, use the saved output value.
                    let out: Vec<f64> =
                        self.nodes[id].value.iter().zip(&g).map(|(o, gi)| o * gi).collect();
                    add_into(&mut self.nodes[x.0].grad, &out);
                }
                Op::Square { x } => {
                    let x = *x;
                    let (xs, gx) = value_grad(&mut self.nodes, x.0, id);
                    for i in 0..g.len() {
                        gx[i] += 2.0 * xs[i] * g[i];
                    }
                }
                Op::Scale { x, c } => {
                    let (x, c) = (*x, *c);
                    let gx = &mut self.nodes[x.0].grad;
                    for (gi, go) in gx.iter_mut().zip(&g) {
                        *gi += c * go;
                    }
                }
                Op::Sum { x } => {
                    let x = *x;
                    let gx = &mut self.nodes[x.0].grad;
                    for gi in gx.iter_mut() {
                        *gi += g[0];
                    }
                }
                Op::Mean { x } => {
                    let x = *x;
                    let n = self.nodes[x.0].value.len().max(1) as f64;
                    let gx = &mut self.nodes[x.0].grad;
                    for gi in gx.iter_mut() {
                        *gi += g[0] / n;
                    }
                }
                Op::SliceCols { x, start, end, cols } => {
                    let (x, start, end, c) = (*x, *start, *end, *cols);
                    let w = end - start;
                    let gx = &mut self.nodes[x.0].grad;
                    for i in 0..g.len() / w {
                        for j in 0..w {
                            gx[i * c + start + j] += g[i * w + j];
                        }
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    let (x, lo, hi) = (*x, *lo, *hi);
                    let (xs, gx) = value_grad(&mut self.nodes, x.0, id);
                    for i in 0..g.len() {
                        if xs[i] > lo && xs[i] < hi {
                            gx[i] += g[i];
                        }
                    }
                }
                Op::Dot { x, w } => {
                    let x = *x;
                    let w = w.clone();
                    let gx = &mut self.nodes[x.0].grad;
                    for (gi, wi) in gx.iter_mut().zip(&w) {
                        *gi += wi * g[0];
                    }
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let logits = *logits;
                    let b = labels.len();
                    let c = probs.len() / b;
                    let mut gl = vec![0.0; probs.len()];
                    for i in 0..b {
                        for j in 0..c {
                            let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                            gl[i * c + j] = (probs[i * c + j] - onehot) / b as f64 * g[0];
                        }
                    }
                    add_into(&mut self.nodes[logits.0].grad, &gl);
                }
                Op::Mmd { z, prior, prior_rows } => {
                    let zv = *z;
                    let m = *prior_rows;
                    let b = self.nodes[zv.0].shape[0];
                    let k = self.nodes[zv.0].shape[1];
                    let gz = mmd_grad_z(&self.nodes[zv.0].value, prior, b, m, k, g[0]);
                    add_into(&mut self.nodes[zv.0].grad, &gz);
                }
            }
            self.nodes[id].grad = g;
        }
        Ok(())
    }
}

/// Splits mutable access: value slice of node `src`, grad slice of node `src`,
/// where `src != cur`. Used by ops whose backward reads their own input value.
fn value_grad(nodes: &mut [Node], src: usize, cur: usize) -> (&[f64], &mut [f64]) {
    debug_assert_ne!(src, cur);
    let node = &mut nodes[src];
    // Value and grad are disjoint fields of the same node.
    let value: &[f64] = unsafe { std::slice::from_raw_parts(node.value.as_ptr(), node.value.len()) };
    (value, &mut node.grad)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sub_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d -= s;
    }
}

/// `C[m×n] = A[m×k] . B[k×n]`, row-major. Parallel over output rows; each row
/// is reduced serially in a fixed order, so results are bitwise deterministic
/// regardless of thread count.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let body = |(i, row): (usize, &mut [f64])| {
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                row[j] += aip * brow[j];
            }
        }
    };
    if m >= PAR_ROWS {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
    out
}

/// `C[m×k] = G[m×n] . B^T` where B is `[k×n]` (i.e. C = G . B transposed).
fn matmul_bt_raw(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    let body = |(i, row): (usize, &mut [f64])| {
        let grow = &g[i * n..(i + 1) * n];
        for (p, slot) in row.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += grow[j] * brow[j];
            }
            *slot = s;
        }
    };
    if m >= PAR_ROWS {
        out.par_chunks_mut(k).enumerate().for_each(body);
    } else {
        out.chunks_mut(k).enumerate().for_each(body);
    }
    out
}

/// `C[k×n] = A^T . G` where A is `[m×k]`, G is `[m×n]`.
fn matmul_at_raw(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    let body = |(p, row): (usize, &mut [f64])| {
        for i in 0..m {
            let aip = a[i * k + p];
            let grow = &g[i * n..(i + 1) * n];
            for j in 0..n {
                row[j] += aip * grow[j];
            }
        }
    };
    if k >= PAR_ROWS {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
    out
}

/// Gradient of the V-statistic MMD^2 w.r.t. the rows of `z`, scaled by the
/// upstream gradient `g`. Prior rows are constants.
fn mmd_grad_z(z: &[f64], prior: &[f64], b: usize, m: usize, k: usize, g: f64) -> Vec<f64> {
    let kf = k as f64;
    let mut gz = vec![0.0; b * k];
    // d/du k(u,v) = -2*kf/(kf+d)^2 * (u-v), d = |u-v|^2
    // Term 1: (1/b^2) sum_{i,j} k(z_i, z_j); each unordered pair appears twice.
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue; // distance 0, zero gradient
            }
            let mut d = 0.0;
            for t in 0..k {
                let diff = z[i * k + t] - z[j * k + t];
                d += diff * diff;
            }
            let coef = -2.0 * kf / ((kf + d) * (kf + d)) / (b * b) as f64 * g;
            for t in 0..k {
                let diff = z[i * k + t] - z[j * k + t];
                gz[i * k + t] += coef * diff;
                gz[j * k + t] -= coef * diff;
            }
        }
    }
    // Cross term: -(2/(b m)) sum_{i,j} k(z_i, p_j).
    for i in 0..b {
        for j in 0..m {
            let mut d = 0.0;
            for t in 0..k {
                let diff = z[i * k + t] - prior[j * k + t];
                d += diff * diff;
            }
            let coef = 2.0 * 2.0 * kf / ((kf + d) * (kf + d)) / (b * m) as f64 * g;
            for t in 0..k {
                let diff = z[i * k + t] - prior[j * k + t];
                gz[i * k + t] += coef * diff;
            }
        }
    }
    gz
}
