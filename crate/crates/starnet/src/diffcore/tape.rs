//! Reverse-mode differentiation over a linear tape.
//!
//! Operations append nodes to the tape during the forward pass; parents
//! always precede children, so backward is a single reverse sweep.
//! Gradients accumulate in a fixed order, making repeated backward
//! passes over the same graph bit-identical.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Sigmoid(Var),
    Tanh(Var),
    /// Per-column max over rows; payload is the winning row per column.
    ColwiseMax(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    TileRows(Var),
    SumAll(Var),
    Scale(Var, f64),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    tag: &'static str,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            tag: "",
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Attach a census tag to a node (see [`Tape::census_rows`]).
    pub fn tag(&mut self, v: Var, tag: &'static str) {
        self.nodes[v.0].tag = tag;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of `v`, or zeros if `v` was unreachable from the loss.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros_like(&self.nodes[v.0].value),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Total row count of nodes carrying `tag`, a structural proxy for
    /// how many per-row applications of that operation the graph holds.
    pub fn census_rows(&self, tag: &'static str) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.tag == tag)
            .map(|n| n.value.rows())
            .sum()
    }

    pub fn census_count(&self, tag: &'static str) -> usize {
        self.nodes.iter().filter(|n| n.tag == tag).count()
    }

    /// Element count of the widest node on the tape.
    pub fn max_node_elems(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len()).max().unwrap_or(0)
    }

    // ── forward operations ───────────────────────────────────────────

    /// Matrix product under the 2-D interpretation (rank-1 = one row).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = (bv.rows(), bv.cols());
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += av.at(i, p) * bv.at(p, j);
                }
                out[i * n + j] = acc;
            }
        }
        Ok(self.push(Tensor::unchecked(vec![m, n], out), Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let (m, n) = (av.rows(), av.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av.at(i, j);
            }
        }
        self.push(Tensor::unchecked(vec![n, m], out), Op::Transpose(a))
    }

    fn ewise(&mut self, a: Var, b: Var, op: &'static str) -> Result<(Vec<f64>, Vec<usize>)> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.rows() != bv.rows() || av.cols() != bv.cols() {
            return Err(Error::ShapeMismatch {
                op,
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| match op {
                "add" => x + y,
                "sub" => x - y,
                _ => x * y,
            })
            .collect();
        Ok((data, av.shape().to_vec()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (data, shape) = self.ewise(a, b, "add")?;
        Ok(self.push(Tensor::unchecked(shape, data), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (data, shape) = self.ewise(a, b, "sub")?;
        Ok(self.push(Tensor::unchecked(shape, data), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (data, shape) = self.ewise(a, b, "mul")?;
        Ok(self.push(Tensor::unchecked(shape, data), Op::Mul(a, b)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|&x| -x).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::unchecked(shape, data), Op::Neg(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::unchecked(shape, data), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|&x| x.tanh()).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::unchecked(shape, data), Op::Tanh(a))
    }

    /// Per-column maximum over the rows of an [N x D] matrix.
    /// Gradient routes each column entirely to the winning row;
    /// ties go to the lowest row index.
    pub fn colwise_max(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (n, d) = (av.rows(), av.cols());
        if n == 0 {
            return Err(Error::EmptySet {
                context: "colwise_max over zero rows",
            });
        }
        let mut out = vec![0.0; d];
        let mut winners = vec![0usize; d];
        for j in 0..d {
            let mut best = av.at(0, j);
            let mut row = 0;
            for i in 1..n {
                let v = av.at(i, j);
                if v > best {
                    best = v;
                    row = i;
                }
            }
            out[j] = best;
            winners[j] = row;
        }
        Ok(self.push(Tensor::unchecked(vec![d], out), Op::ColwiseMax(a, winners)))
    }

    /// Columns `[start, start+len)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (m, n) = (av.rows(), av.cols());
        if start + len > n {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                left: av.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let mut out = vec![0.0; m * len];
        for i in 0..m {
            for j in 0..len {
                out[i * len + j] = av.at(i, start + j);
            }
        }
        Ok(self.push(Tensor::unchecked(vec![m, len], out), Op::SliceCols(a, start)))
    }

    /// Horizontal concatenation; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let m = self.nodes[parts[0].0].value.rows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            if pv.rows() != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![m],
                    right: pv.shape().to_vec(),
                });
            }
            let w = pv.cols();
            for i in 0..m {
                for j in 0..w {
                    out[i * total + off + j] = pv.at(i, j);
                }
            }
            off += w;
        }
        Ok(self.push(
            Tensor::unchecked(vec![m, total], out),
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Repeat a single-row tensor `n` times.
    pub fn tile_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.rows() != 1 {
            return Err(Error::ShapeMismatch {
                op: "tile_rows",
                left: av.shape().to_vec(),
                right: vec![n],
            });
        }
        let d = av.cols();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(av.data());
        }
        Ok(self.push(Tensor::unchecked(vec![n, d], out), Op::TileRows(a)))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|&x| c * x).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::unchecked(shape, data), Op::Scale(a, c))
    }

    // ── backward ─────────────────────────────────────────────────────

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Reverse sweep from a scalar loss. Populates gradients of every
    /// node that the loss depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                left: self.nodes[loss.0].value.shape().to_vec(),
                right: vec![1],
            });
        }
        let seed = Tensor::unchecked(
            self.nodes[loss.0].value.shape().to_vec(),
            vec![1.0],
        );
        self.nodes[loss.0].grad = Some(seed);

        for idx in (0..=loss.0).rev() {
            let g = match self.nodes[idx].grad.take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_rules(idx, &g);
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, update: impl FnOnce(&Tensor) -> Tensor) {
        let value_shape = self.nodes[v.0].value.shape().to_vec();
        let grad = self
            .nodes[v.0]
            .grad
            .take()
            .unwrap_or_else(|| Tensor::zeros(value_shape));
        self.nodes[v.0].grad = Some(update(&grad));
    }

    fn apply_rules(&mut self, idx: usize, g: &Tensor) {
        // Ops are matched by value; parents are Vars into earlier slots.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                self.accum(a, |old| {
                    let mut out = old.clone();
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g.at(i, j) * bv.at(p, j);
                            }
                            let cur = out.data()[i * k + p];
                            out.data_mut()[i * k + p] = cur + acc;
                        }
                    }
                    out
                });
                self.accum(b, |old| {
                    let mut out = old.clone();
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += av.at(i, p) * g.at(i, j);
                            }
                            let cur = out.data()[p * n + j];
                            out.data_mut()[p * n + j] = cur + acc;
                        }
                    }
                    out
                });
            }
            Op::Transpose(a) => {
                let a = *a;
                let (m, n) = (g.rows(), g.cols());
                self.accum(a, |old| {
                    let mut out = old.clone();
                    let cols = out.cols();
                    for i in 0..m {
                        for j in 0..n {
                            let cur = out.data()[j * cols + i];
                            out.data_mut()[j * cols + i] = cur + g.at(i, j);
                        }
                    }
                    out
                });
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                for v in [a, b] {
                    self.accum(v, |old| {
                        let mut out = old.clone();
                        for (o, gi) in out.data_mut().iter_mut().zip(g.data()) {
                            *o += gi;
                        }
                        out
                    });
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, |old| {
                    let mut out = old.clone();
                    for (o, gi) in out.data_mut().iter_mut().zip(g.data()) {
                        *o += gi;
                    }
                    out
                });
                self.accum(b, |old| {
                    let mut out = old.clone();
                    for (o, gi) in out.data_mut().iter_mut().zip(g.data()) {
                        *o -= gi;
                    }
                    out
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                self.accum(a, |old| {
                    let mut out = old.clone();
                    for ((o, gi), bi) in out.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gi * bi;
                    }
                    out
                });
                self.accum(b, |old| {
                    let mut out = old.clone();
                    for ((o, gi), ai) in out.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gi * ai;
                    }
                    out
                });
            }
            Op::Neg(a) => {
                let a = *a;
                self.accum(a, |old| {
                    let mut out = old.clone();
                    for (o, gi) in out.data_mut().iter_mut().zip(g.data()) {
                        *o -= gi;
                    }
                    out
                });
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let y = self.nodes[idx].value.clone();
                self.accum(a, |old| {
                    let mut out = old.clone();
                    for ((o, gi), yi) in out.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gi * yi * (1.0 - yi);
                    }
                    out
                });
            }
            Op::Tanh(a) => {
                let a = *a;
                let y = self.nodes[idx].value.clone();
                self.accum(a, |old| {
                    let mut out = old.clone();
                    for ((o, gi), yi) in out.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gi * (1.0 - yi * yi);
                    }
                    out
                });
            }
            Op::ColwiseMax(a, winners) => {
                let a = *a;
                let winners = winners.clone();
                self.accum(a, |old| {
                    let mut out = old.clone();
                    let cols = out.cols();
                    for (j, &row) in winners.iter().enumerate() {
                        let cur = out.data()[row * cols + j];
                        out.data_mut()[row * cols + j] = cur + g.data()[j];
                    }
                    out
                });
            }
            Op::SliceCols(a, start) => {
                let (a, start) = (*a, *start);
                let (m, w) = (g.rows(), g.cols());
                self.accum(a, |old| {
                    let mut out = old.clone();
                    let cols = out.cols();
                    for i in 0..m {
                        for j in 0..w {
                            let cur = out.data()[i * cols + start + j];
                            out.data_mut()[i * cols + start + j] = cur + g.at(i, j);
                        }
                    }
                    out
                });
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let m = g.rows();
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.cols();
                    self.accum(p, |old| {
                        let mut out = old.clone();
                        let cols = out.cols();
                        for i in 0..m {
                            for j in 0..w {
                                let cur = out.data()[i * cols + j];
                                out.data_mut()[i * cols + j] = cur + g.at(i, off + j);
                            }
                        }
                        out
                    });
                    off += w;
                }
            }
            Op::TileRows(a) => {
                let a = *a;
                let (n, d) = (g.rows(), g.cols());
                self.accum(a, |old| {
                    let mut out = old.clone();
                    for j in 0..d {
                        let mut acc = 0.0;
                        for i in 0..n {
                            acc += g.at(i, j);
                        }
                        out.data_mut()[j] += acc;
                    }
                    out
                });
            }
            Op::SumAll(a) => {
                let a = *a;
                let gs = g.first();
                self.accum(a, |old| {
                    let mut out = old.clone();
                    for o in out.data_mut() {
                        *o += gs;
                    }
                    out
                });
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                self.accum(a, |old| {
                    let mut out = old.clone();
                    for (o, gi) in out.data_mut().iter_mut().zip(g.data()) {
                        *o += c * gi;
                    }
                    out
                });
            }
        }
    }

    /// Gradients of a set of named leaves, for optimizer consumption.
    pub fn gradients(&self, leaves: &[(String, Var)]) -> HashMap<String, Tensor> {
        leaves
            .iter()
            .map(|(name, v)| (name.clone(), self.grad_or_zeros(*v)))
            .collect()
    }
}
