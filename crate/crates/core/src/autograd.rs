//! A small reverse-mode tape over [`Matrix`] values.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse and returns gradients for every node that depends on a
//! trainable leaf. Parameters are borrowed into the tape, so building a graph
//! over a large parameter store does not copy it.

use std::borrow::Cow;

use crate::tensor::{gemm, matmul_t, Matrix};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sentinel for [`Graph::gather`]: the output element is zero.
pub const GATHER_ZERO: u32 = u32::MAX;

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    DivCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ClampMin(Var, f64),
    Silu(Var),
    EluPlusOne(Var),
    Tanh(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Softmax { x: Var },
    Gather { x: Var, idx: Vec<u32> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    ColSum(Var),
    Mean(Var),
    RowCosine { a: Var, b: Matrix, norms: Vec<(f64, f64)> },
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(Cow::Owned(m), Op::Leaf, false)
    }

    /// A borrowed leaf. `trainable` decides whether gradients flow to it.
    pub fn leaf(&mut self, m: &'a Matrix, trainable: bool) -> Var {
        self.push(Cow::Borrowed(m), Op::Leaf, trainable)
    }

    /// An owned trainable leaf.
    pub fn leaf_owned(&mut self, m: Matrix) -> Var {
        self.push(Cow::Owned(m), Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let v = matmul_t(self.value(a), ta, self.value(b), tb);
        self.push_op(v, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.push_op(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        self.push_op(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push_op(v, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row expects a 1x{c} row");
        let rv = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..r {
            for (o, b) in out.row_mut(i).iter_mut().zip(&rv) {
                *o += b;
            }
        }
        self.push_op(out, Op::AddRow(a, row), &[a, row])
    }

    /// Multiplies every row of `a` elementwise by a `1×c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "mul_row expects a 1x{c} row");
        let rv = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..r {
            for (o, b) in out.row_mut(i).iter_mut().zip(&rv) {
                *o *= b;
            }
        }
        self.push_op(out, Op::MulRow(a, row), &[a, row])
    }

    /// Divides row `i` of `a` by `col[i]` (`col` is `r×1`).
    pub fn div_col(&mut self, a: Var, col: Var) -> Var {
        let (r, _) = self.shape(a);
        assert_eq!(self.shape(col), (r, 1), "div_col expects a {r}x1 column");
        let mut out = self.value(a).clone();
        for i in 0..r {
            let d = self.value(col).data()[i];
            for o in out.row_mut(i) {
                *o /= d;
            }
        }
        self.push_op(out, Op::DivCol(a, col), &[a, col])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push_op(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push_op(v, Op::AddScalar(a), &[a])
    }

    /// `max(x, floor)`; clamped entries pass no gradient.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let v = self.value(a).map(|x| x.max(floor));
        self.push_op(v, Op::ClampMin(a, floor), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(silu);
        self.push_op(v, Op::Silu(a), &[a])
    }

    /// `elu(x) + 1`, the positive feature map used by linear attention.
    pub fn elu_plus_one(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x + 1.0 } else { x.exp() });
        self.push_op(v, Op::EluPlusOne(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push_op(v, Op::Tanh(a), &[a])
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let mut out = Matrix::zeros(r, c);
        let mut rstd = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for (o, v) in out.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        self.push_op(out, Op::LayerNorm { x, rstd }, &[x])
    }

    /// Row-wise softmax. Columns with `mask[c] == false` get probability 0;
    /// at least one column must be unmasked.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        if let Some(m) = mask {
            assert_eq!(m.len(), c, "softmax mask length");
            assert!(m.iter().any(|&b| b), "softmax with every column masked");
        }
        let keep = |j: usize| mask.is_none_or(|m| m[j]);
        let mut out = Matrix::zeros(r, c);
        for i in 0..r {
            let row = xv.row(i);
            let mx = (0..c)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let o = out.row_mut(i);
            let mut s = 0.0;
            for j in 0..c {
                if keep(j) {
                    o[j] = (row[j] - mx).exp();
                    s += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= s;
            }
        }
        self.push_op(out, Op::Softmax { x }, &[x])
    }

    /// `out.data[i] = x.data[idx[i]]`, or zero where `idx[i] == GATHER_ZERO`.
    pub fn gather(&mut self, x: Var, idx: Vec<u32>, rows: usize, cols: usize) -> Var {
        assert_eq!(idx.len(), rows * cols, "gather index length");
        let src = self.value(x).data();
        let data = idx
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { src[i as usize] })
            .collect();
        self.push_op(Matrix::new(rows, cols, data), Op::Gather { x, idx }, &[x])
    }

    /// Selects whole rows of `x` (embedding lookup, shifts, permutations).
    pub fn select_rows(&mut self, x: Var, rows: &[Option<usize>]) -> Var {
        let (_, c) = self.shape(x);
        let mut idx = Vec::with_capacity(rows.len() * c);
        for r in rows {
            match r {
                Some(r) => idx.extend((0..c).map(|j| (r * c + j) as u32)),
                None => idx.extend(std::iter::repeat_n(GATHER_ZERO, c)),
            }
        }
        self.gather(x, idx, rows.len(), c)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(x);
        assert!(start + len <= c, "slice_cols out of range");
        let mut idx = Vec::with_capacity(r * len);
        for i in 0..r {
            idx.extend((start..start + len).map(|j| (i * c + j) as u32));
        }
        self.gather(x, idx, r, len)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let n = rows * cols;
        assert_eq!(self.value(x).len(), n, "reshape size mismatch");
        self.gather(x, (0..n as u32).collect(), rows, cols)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_rows(&mats);
        self.push_op(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(r, total);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), r, "concat_cols height mismatch");
            for i in 0..r {
                out.row_mut(i)[off..off + pv.cols()].copy_from_slice(pv.row(i));
            }
            off += pv.cols();
        }
        self.push_op(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Column sums, `1×c`.
    pub fn col_sum(&mut self, x: Var) -> Var {
        let v = self.value(x).col_sum();
        self.push_op(v, Op::ColSum(x), &[x])
    }

    /// Mean of all entries, `1×1`.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = Matrix::scalar(self.value(x).mean());
        self.push_op(v, Op::Mean(x), &[x])
    }

    /// Mean of `(a - target)^2` over all entries.
    pub fn mse(&mut self, a: Var, target: &Matrix) -> Var {
        let t = self.constant(target.clone());
        let d = self.sub(a, t);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Per-row cosine similarity between `a` and the constant `b`, `r×1`.
    /// Rows where `|a|·|b| < eps` yield 0 and pass no gradient.
    pub fn row_cosine(&mut self, a: Var, b: &Matrix, eps: f64) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), b.shape(), "row_cosine shape mismatch");
        let r = av.rows();
        let mut out = Matrix::zeros(r, 1);
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let (x, y) = (av.row(i), b.row(i));
            let na = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na * nb < eps {
                norms.push((0.0, 0.0));
                continue;
            }
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            out.data_mut()[i] = dot / (na * nb);
            norms.push((na, nb));
        }
        self.push_op(out, Op::RowCosine { a, b: b.clone(), norms }, &[a])
    }

    /// Reverse pass from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar loss");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        // Only leaves and the nodes callers asked about matter; intermediate
        // gradients are kept since they are cheap to hold until drop.
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Matrix>],
        v: Var,
        shape: (usize, usize),
        f: impl FnOnce(&mut Matrix),
    ) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Matrix::zeros(shape.0, shape.1));
        }
        f(slot.as_mut().unwrap());
    }

    fn backprop(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    let shape = av.shape();
                    self.accumulate_with(grads, *a, shape, |acc| {
                        if *ta {
                            gemm(1.0, bv, *tb, g, true, 1.0, acc);
                        } else {
                            gemm(1.0, g, false, bv, !*tb, 1.0, acc);
                        }
                    });
                }
                if self.nodes[b.0].needs_grad {
                    let shape = bv.shape();
                    self.accumulate_with(grads, *b, shape, |acc| {
                        if *tb {
                            gemm(1.0, g, true, av, *ta, 1.0, acc);
                        } else {
                            gemm(1.0, av, !*ta, g, false, 1.0, acc);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, g.zip_map(bv, |x, y| x * y));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, g.zip_map(av, |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *row, g.col_sum());
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(*a), self.value(*row));
                if self.nodes[a.0].needs_grad {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        for (x, s) in ga.row_mut(r).iter_mut().zip(rv.data()) {
                            *x *= s;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[row.0].needs_grad {
                    self.accumulate(grads, *row, g.zip_map(av, |x, y| x * y).col_sum());
                }
            }
            Op::DivCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                if self.nodes[a.0].needs_grad {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let d = cv.data()[r];
                        for x in ga.row_mut(r) {
                            *x /= d;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[col.0].needs_grad {
                    let gc = Matrix::from_fn(cv.rows(), 1, |r, _| {
                        let d = cv.data()[r];
                        let dot: f64 = g.row(r).iter().zip(av.row(r)).map(|(p, q)| p * q).sum();
                        -dot / (d * d)
                    });
                    self.accumulate(grads, *col, gc);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::ClampMin(a, floor) => {
                let ga = g.zip_map(self.value(*a), |gy, x| if x >= *floor { gy } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Silu(a) => {
                let av = self.value(*a);
                let ga = g.zip_map(av, |gy, x| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    gy * s * (1.0 + x * (1.0 - s))
                });
                self.accumulate(grads, *a, ga);
            }
            Op::EluPlusOne(a) => {
                let av = self.value(*a);
                let ga = Matrix::new(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(av.data())
                        .zip(out.data())
                        .map(|((gy, x), y)| if *x > 0.0 { *gy } else { gy * y })
                        .collect(),
                );
                self.accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = g.zip_map(out, |gy, y| gy * (1.0 - y * y));
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm { x, rstd } => {
                let (r, c) = out.shape();
                let mut gx = Matrix::zeros(r, c);
                for i in 0..r {
                    let (y, gy) = (out.row(i), g.row(i));
                    let mg = gy.iter().sum::<f64>() / c as f64;
                    let mgy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for ((o, gyj), yj) in gx.row_mut(i).iter_mut().zip(gy).zip(y) {
                        *o = rstd[i] * (gyj - mg - yj * mgy);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax { x } => {
                let (r, c) = out.shape();
                let mut gx = Matrix::zeros(r, c);
                for i in 0..r {
                    let (y, gy) = (out.row(i), g.row(i));
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for ((o, yj), gyj) in gx.row_mut(i).iter_mut().zip(y).zip(gy) {
                        *o = yj * (gyj - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Gather { x, idx } => {
                let shape = self.shape(*x);
                self.accumulate_with(grads, *x, shape, |acc| {
                    let d = acc.data_mut();
                    for (&j, gv) in idx.iter().zip(g.data()) {
                        if j != GATHER_ZERO {
                            d[j as usize] += gv;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.nodes[p.0].needs_grad {
                        let slice = g.data()[off * c..(off + r) * c].to_vec();
                        self.accumulate(grads, p, Matrix::new(r, c, slice));
                    }
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.nodes[p.0].needs_grad {
                        let gp = Matrix::from_fn(r, c, |i, j| g.get(i, off + j));
                        self.accumulate(grads, p, gp);
                    }
                    off += c;
                }
            }
            Op::ColSum(x) => {
                let (r, c) = self.shape(*x);
                let gx = Matrix::from_fn(r, c, |_, j| g.data()[j]);
                self.accumulate(grads, *x, gx);
            }
            Op::Mean(x) => {
                let (r, c) = self.shape(*x);
                let s = g.item() / (r * c) as f64;
                self.accumulate(grads, *x, Matrix::filled(r, c, s));
            }
            Op::RowCosine { a, b, norms } => {
                let av = self.value(*a);
                let (r, c) = av.shape();
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    let (na, nb) = norms[i];
                    if na == 0.0 {
                        continue;
                    }
                    let cos = out.data()[i];
                    let gi = g.data()[i];
                    for ((o, x), y) in ga.row_mut(i).iter_mut().zip(av.row(i)).zip(b.row(i)) {
                        *o = gi * (y / (na * nb) - cos * x / (na * na));
                    }
                }
                self.accumulate(grads, *a, ga);
            }
        }
    }
}
