//! Reverse-mode automatic differentiation over small dense f64 matrices,
//! the Adam optimizer and the JSON checkpoint format.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn row(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    /// Stacks equally long rows. An empty slice gives a `0 x cols` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    lhs: (1, cols),
                    rhs: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let o = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, b) in o.iter_mut().zip(b) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, rhs: &Self) {
        debug_assert_eq!(self.shape(), rhs.shape());
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of an elementwise binary op is broadcast.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Div(Var, Var, Broadcast),
    Scale(Var, f64),
    AddScalar(Var),
    Transpose(Var),
    Relu(Var),
    Sin(Var),
    Cos(Var),
    Square(Var),
    ClampMin(Var, f64),
    SoftmaxRows(Var),
    LayerNormRows(Var, f64),
    MaskedHadamard(Var, Tensor),
    RenormalizeMasked(Var, Tensor),
    Mse(Var, Var),
    SumAll(Var),
    SumRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Arena recording every operation of a forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient; zeros if `v` was never reached by `backward`.
    pub fn grad(&self, v: Var) -> Tensor {
        match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => {
                let (r, c) = self.shape(v);
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.grads.clear();
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(Broadcast::Same)
        } else if tb.rows == 1 && tb.cols == ta.cols {
            Ok(Broadcast::Row)
        } else if tb.shape() == (1, 1) {
            Ok(Broadcast::Scalar)
        } else {
            Err(mismatch(op, ta, tb))
        }
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Broadcast)> {
        let kind = self.broadcast_kind(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let cols = ta.cols;
        let data = ta
            .data
            .iter()
            .enumerate()
            .map(|(k, &x)| {
                let y = match kind {
                    Broadcast::Same => tb.data[k],
                    Broadcast::Row => tb.data[k % cols],
                    Broadcast::Scalar => tb.data[0],
                };
                f(x, y)
            })
            .collect();
        Ok((
            Tensor {
                rows: ta.rows,
                cols,
                data,
            },
            kind,
        ))
    }

    /// `a + b`; `b` may also be a `1 x cols` row or a `1 x 1` scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, k) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b, k)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, k) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b, k)))
    }

    /// Elementwise product with the same broadcasting as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, k) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b, k)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, k) = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b, k)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sin);
        self.push(v, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::cos);
        self.push(v, Op::Cos(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn clamp_min(&mut self, a: Var, min: f64) -> Var {
        let v = self.value(a).map(|x| x.max(min));
        self.push(v, Op::ClampMin(a, min))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        for r in 0..t.rows {
            let row = &mut out.data[r * t.cols..(r + 1) * t.cols];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` without affine
    /// parameters.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        for r in 0..t.rows {
            let row = &mut out.data[r * t.cols..(r + 1) * t.cols];
            let (mean, inv) = row_stats(row, eps);
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
        }
        self.push(out, Op::LayerNormRows(a, eps))
    }

    /// Elementwise product with a constant mask.
    pub fn masked_hadamard(&mut self, a: Var, mask: &Tensor) -> Result<Var> {
        let t = self.value(a);
        if t.shape() != mask.shape() {
            return Err(mismatch("masked_hadamard", t, mask));
        }
        let v = t.zip_map(mask, |x, m| x * m);
        Ok(self.push(v, Op::MaskedHadamard(a, mask.clone())))
    }

    /// Rescales each row of a masked, row-stochastic matrix so the surviving
    /// entries sum to one. Rows whose mask is all ones pass through untouched
    /// and rows whose mask is all zeros become uniform.
    pub fn renormalize_masked_rows(&mut self, a: Var, mask: &Tensor) -> Result<Var> {
        let t = self.value(a);
        if t.shape() != mask.shape() {
            return Err(mismatch("renormalize_masked_rows", t, mask));
        }
        let mut out = t.clone();
        for r in 0..t.rows {
            let m = mask.row_slice(r);
            let row = &mut out.data[r * t.cols..(r + 1) * t.cols];
            match row_mask_kind(m) {
                RowMask::Full => {}
                RowMask::Empty => {
                    log::warn!("attention row {r} fully masked, using uniform weights");
                    row.fill(1.0 / t.cols as f64);
                }
                RowMask::Partial => {
                    let s: f64 = row.iter().sum();
                    for x in row.iter_mut() {
                        *x /= s;
                    }
                }
            }
        }
        Ok(self.push(out, Op::RenormalizeMasked(a, mask.clone())))
    }

    /// Mean squared difference, `1 x 1`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mse", ta, tb));
        }
        let n = ta.len().max(1) as f64;
        let s: f64 = ta.data.iter().zip(&tb.data).map(|(x, y)| (x - y) * (x - y)).sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b)))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// Column sums as a `1 x cols` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(1, t.cols);
        for r in 0..t.rows {
            for (o, x) in out.data.iter_mut().zip(t.row_slice(r)) {
                *o += x;
            }
        }
        self.push(out, Op::SumRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows;
        for p in parts {
            if self.value(*p).rows != rows {
                return Err(mismatch("concat_cols", self.value(parts[0]), self.value(*p)));
            }
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let t = self.value(*p);
                out.data[r * cols + off..r * cols + off + t.cols].copy_from_slice(t.row_slice(r));
                off += t.cols;
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols != cols {
                return Err(mismatch("concat_rows", self.value(parts[0]), t));
            }
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        Ok(self.push(Tensor { rows, cols, data }, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.cols {
            return Err(mismatch("slice_cols", t, &Tensor::zeros(t.rows, start + len)));
        }
        let mut out = Tensor::zeros(t.rows, len);
        for r in 0..t.rows {
            out.data[r * len..(r + 1) * len].copy_from_slice(&t.row_slice(r)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.rows {
            return Err(mismatch("slice_rows", t, &Tensor::zeros(start + len, t.cols)));
        }
        let data = t.data[start * t.cols..(start + len) * t.cols].to_vec();
        let out = Tensor {
            rows: len,
            cols: t.cols,
            data,
        };
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows) {
            return Err(mismatch("gather_rows", t, &Tensor::zeros(bad + 1, t.cols)));
        }
        let mut data = Vec::with_capacity(idx.len() * t.cols);
        for &i in idx {
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor {
            rows: idx.len(),
            cols: t.cols,
            data,
        };
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec())))
    }

    /// Accumulates `d loss / d v` into every node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::NonScalarRoot(shape));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            if self.grads.len() < self.nodes.len() {
                self.grads.resize(self.nodes.len(), None);
            }
            match &mut self.grads[i] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Tensor| match &mut adj[v.0] {
            Some(t) => t.add_assign(&d),
            slot => *slot = Some(d),
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g.matmul(&val(*b).transpose()).expect("shapes checked in forward");
                let db = val(*a).transpose().matmul(g).expect("shapes checked in forward");
                acc(*a, da);
                acc(*b, db);
            }
            Op::Add(a, b, k) => {
                acc(*a, g.clone());
                acc(*b, reduce(g, *k));
            }
            Op::Sub(a, b, k) => {
                acc(*a, g.clone());
                acc(*b, reduce(&g.map(|x| -x), *k));
            }
            Op::Mul(a, b, k) => {
                let (ta, tb) = (val(*a), val(*b));
                let tb_full = expand(tb, *k, ta.rows, ta.cols);
                acc(*a, g.zip_map(&tb_full, |x, y| x * y));
                acc(*b, reduce(&g.zip_map(ta, |x, y| x * y), *k));
            }
            Op::Div(a, b, k) => {
                let (ta, tb) = (val(*a), val(*b));
                let tb_full = expand(tb, *k, ta.rows, ta.cols);
                acc(*a, g.zip_map(&tb_full, |x, y| x / y));
                let gb_full = Tensor {
                    rows: ta.rows,
                    cols: ta.cols,
                    data: (0..ta.len())
                        .map(|j| -g.data[j] * ta.data[j] / (tb_full.data[j] * tb_full.data[j]))
                        .collect(),
                };
                acc(*b, reduce(&gb_full, *k));
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Relu(a) => acc(*a, g.zip_map(val(*a), |d, x| if x > 0.0 { d } else { 0.0 })),
            Op::Sin(a) => acc(*a, g.zip_map(val(*a), |d, x| d * x.cos())),
            Op::Cos(a) => acc(*a, g.zip_map(val(*a), |d, x| -d * x.sin())),
            Op::Square(a) => acc(*a, g.zip_map(val(*a), |d, x| 2.0 * d * x)),
            Op::ClampMin(a, m) => acc(*a, g.zip_map(val(*a), |d, x| if x > *m { d } else { 0.0 })),
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let mut d = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols {
                        d.data[r * y.cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                acc(*a, d);
            }
            Op::LayerNormRows(a, eps) => {
                let (x, y) = (val(*a), &self.nodes[i].value);
                let n = x.cols as f64;
                let mut d = Tensor::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    let (_, inv) = row_stats(x.row_slice(r), *eps);
                    let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                    let g_mean = gr.iter().sum::<f64>() / n;
                    let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for c in 0..x.cols {
                        d.data[r * x.cols + c] = inv * (gr[c] - g_mean - yr[c] * gy_mean);
                    }
                }
                acc(*a, d);
            }
            Op::MaskedHadamard(a, mask) => acc(*a, g.zip_map(mask, |d, m| d * m)),
            Op::RenormalizeMasked(a, mask) => {
                let x = val(*a);
                let mut d = Tensor::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    let gr = g.row_slice(r);
                    let dr = &mut d.data[r * x.cols..(r + 1) * x.cols];
                    match row_mask_kind(mask.row_slice(r)) {
                        RowMask::Full => dr.copy_from_slice(gr),
                        RowMask::Empty => {}
                        RowMask::Partial => {
                            let xr = x.row_slice(r);
                            let s: f64 = xr.iter().sum();
                            let gx: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                            for c in 0..x.cols {
                                dr[c] = gr[c] / s - gx / (s * s);
                            }
                        }
                    }
                }
                acc(*a, d);
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let k = 2.0 * g.item() / ta.len().max(1) as f64;
                let da = ta.zip_map(tb, |x, y| k * (x - y));
                acc(*b, da.map(|x| -x));
                acc(*a, da);
            }
            Op::SumAll(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Tensor::filled(r, c, g.item()));
            }
            Op::SumRows(a) => {
                let (r, _) = val(*a).shape();
                acc(*a, expand(g, Broadcast::Row, r, g.cols));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (rows, cols) = val(*p).shape();
                    let mut d = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        d.data[r * cols..(r + 1) * cols].copy_from_slice(&g.row_slice(r)[off..off + cols]);
                    }
                    off += cols;
                    acc(*p, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let (rows, cols) = val(*p).shape();
                    let d = Tensor {
                        rows,
                        cols,
                        data: g.data[off * cols..(off + rows) * cols].to_vec(),
                    };
                    off += rows;
                    acc(*p, d);
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = val(*a).shape();
                let mut d = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    d.data[r * cols + start..r * cols + start + g.cols].copy_from_slice(g.row_slice(r));
                }
                acc(*a, d);
            }
            Op::SliceRows(a, start) => {
                let (rows, cols) = val(*a).shape();
                let mut d = Tensor::zeros(rows, cols);
                d.data[start * cols..(start + g.rows) * cols].copy_from_slice(&g.data);
                acc(*a, d);
            }
            Op::GatherRows(a, idx) => {
                let (rows, cols) = val(*a).shape();
                let mut d = Tensor::zeros(rows, cols);
                for (k, &src) in idx.iter().enumerate() {
                    for c in 0..cols {
                        d.data[src * cols + c] += g.data[k * cols + c];
                    }
                }
                acc(*a, d);
            }
        }
    }
}

enum RowMask {
    Full,
    Empty,
    Partial,
}

fn row_mask_kind(m: &[f64]) -> RowMask {
    if m.iter().all(|&v| v == 1.0) {
        RowMask::Full
    } else if m.iter().all(|&v| v == 0.0) {
        RowMask::Empty
    } else {
        RowMask::Partial
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn expand(t: &Tensor, k: Broadcast, rows: usize, cols: usize) -> Tensor {
    match k {
        Broadcast::Same => t.clone(),
        Broadcast::Row => Tensor {
            rows,
            cols,
            data: (0..rows * cols).map(|j| t.data[j % cols]).collect(),
        },
        Broadcast::Scalar => Tensor::filled(rows, cols, t.data[0]),
    }
}

fn reduce(g: &Tensor, k: Broadcast) -> Tensor {
    match k {
        Broadcast::Same => g.clone(),
        Broadcast::Row => {
            let mut out = Tensor::zeros(1, g.cols);
            for r in 0..g.rows {
                for (o, x) in out.data.iter_mut().zip(g.row_slice(r)) {
                    *o += x;
                }
            }
            out
        }
        Broadcast::Scalar => Tensor::scalar(g.data.iter().sum()),
    }
}

/// Named, ordered collection of learnable matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> usize {
        if let Some(&i) = self.index.get(name) {
            self.values[i] = value;
            return i;
        }
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), self.values.len() - 1);
        self.values.len() - 1
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    /// Registers every parameter as a leaf, in store order.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

impl AdamState {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::LengthMismatch(params.len(), grads.len()));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(mismatch("adam_step", p, g));
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for j in 0..p.data.len() {
            let gj = g.data[j];
            m.data[j] = b1 * m.data[j] + (1.0 - b1) * gj;
            v.data[j] = b2 * v.data[j] + (1.0 - b2) * gj * gj;
            let m_hat = m.data[j] / c1;
            let v_hat = v.data[j] / c2;
            p.data[j] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| &g.data).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.data.iter_mut()).for_each(|v| *v *= s);
    }
    norm
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StoredParam {
    shape: (usize, usize),
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: serde_json::Value,
    params: BTreeMap<String, StoredParam>,
}

/// Serializes parameters plus an opaque configuration value to JSON.
pub fn save_checkpoint(params: &ParamStore, config: serde_json::Value) -> Result<String> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        config,
        params: params
            .names
            .iter()
            .zip(&params.values)
            .map(|(n, t)| {
                (
                    n.clone(),
                    StoredParam {
                        shape: t.shape(),
                        data: t.data.clone(),
                    },
                )
            })
            .collect(),
    };
    Ok(serde_json::to_string(&file)?)
}

/// Parses a checkpoint; parameters come back in name order.
pub fn load_checkpoint(text: &str) -> Result<(ParamStore, serde_json::Value)> {
    let file: CheckpointFile = serde_json::from_str(text)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", file.version)));
    }
    let mut store = ParamStore::new();
    for (name, p) in file.params {
        let t = Tensor::from_vec(p.shape.0, p.shape.1, p.data)
            .map_err(|_| Error::Checkpoint(format!("parameter {name}: data does not match shape")))?;
        store.insert(&name, t);
    }
    Ok((store, file.config))
}

/// Largest relative discrepancy between analytic and central-difference
/// gradients of a scalar function of several matrix inputs.
///
/// The relative error of one entry is `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn gradient_check(inputs: &[Tensor], h: f64, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).item())
    };
    let mut worst = 0.0_f64;
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v);
        for j in 0..inputs[k].len() {
            let x0 = inputs[k].data[j];
            probe[k].data[j] = x0 + h;
            let fp = eval(&probe)?;
            probe[k].data[j] = x0 - h;
            let fm = eval(&probe)?;
            probe[k].data[j] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
