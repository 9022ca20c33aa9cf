//! Dense 2-D tensors and a reverse-mode gradient tape.
//!
//! Every value is a row-major `rows × cols` matrix of `f64`; vectors are
//! `1 × n` rows and scalars are `1 × 1`. A [`Graph`] records each operation
//! as it is evaluated, so the graph can have a different shape for every
//! episode. [`Graph::backward`] walks the tape in reverse and returns a
//! [`Gradients`] value holding the adjoint of every node; the adjoints of
//! parameter leaves can then be folded into a [`ParamStore`].
//!
//! ```
//! use seqlink::tensor::{Graph, ParamStore, Tensor};
//!
//! let mut params = ParamStore::default();
//! let diag = params.add("diag", Tensor::row(vec![0.5, 2.0, 1.0]));
//!
//! let mut g = Graph::new();
//! let x = g.constant(Tensor::row(vec![1.0, -1.0, 2.0]));
//! let y = g.constant(Tensor::row(vec![2.0, 3.0, 1.0]));
//! let b = g.param(&params, diag);
//! let s = g.bilinear(x, b, y).unwrap();
//! assert_eq!(g.scalar(s), -3.0);
//!
//! let grads = g.backward(s).unwrap();
//! // d(score)/d(diag_i) = x_i * y_i
//! assert_eq!(grads.param(diag).unwrap().data(), &[2.0, -3.0, 2.0]);
//! ```

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// A `1 × n` row vector.
    pub fn row(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::row(vec![value])
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    left: (1, cols),
                    right: (1, r.len()),
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

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a trainable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors with same-shape gradient buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let (r, c) = value.shape();
        self.names.push(name.into());
        self.values.push(value);
        self.grads.push(Tensor::zeros(r, c));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `scale` times the parameter adjoints in `grads` into the buffers.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (id, var) in &grads.params {
            if let Some(g) = &grads.nodes[var.0] {
                for (dst, src) in self.grads[id.0].data.iter_mut().zip(&g.data) {
                    *dst += scale * src;
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    /// Copies values (not gradients) from another store with the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.names != self.names {
            return Err(Error::invalid("parameter layouts differ"));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(Error::Shape {
                    op: "copy_values_from",
                    left: dst.shape(),
                    right: src.shape(),
                });
            }
            dst.data.copy_from_slice(&src.data);
        }
        Ok(())
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Sum(Var),
    Bilinear(Var, Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    HConcat(Vec<Var>),
    VStack(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    SelectCols(Var, Vec<usize>),
    MaxRows(Var, Vec<usize>),
    LayerNorm(Var, Vec<f64>),
    Mask(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode tape. Build with [`Graph::new`] for evaluation or
/// [`Graph::training`] to enable dropout.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    param_index: HashMap<ParamId, Var>,
    rng: Option<ChaCha8Rng>,
    branches: Option<u64>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose dropout masks are drawn from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Self {
            rng: Some(rng),
            ..Self::default()
        }
    }

    /// Start fingerprinting every discrete choice made while building the
    /// tape: ReLU activity, row maxima and selected indices.
    pub fn track_branches(&mut self) {
        self.branches = Some(0xcbf2_9ce4_8422_2325);
    }

    /// Fingerprint of the discrete choices so far, if tracking is on. Two
    /// tapes with equal fingerprints lie on the same smooth piece.
    pub fn branch_fingerprint(&self) -> Option<u64> {
        self.branches
    }

    fn note(&mut self, items: impl IntoIterator<Item = u64>) {
        if let Some(h) = self.branches.as_mut() {
            for x in items {
                *h = (*h ^ x).wrapping_mul(0x0100_0000_01b3);
            }
            *h = (*h ^ 0xff).wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Value of a `1 × 1` node (first entry otherwise).
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_index.get(&id) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf);
        self.param_index.insert(id, v);
        self.params.push((id, v));
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data: ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    fn row_broadcast(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(Error::Shape {
                op,
                left: sa,
                right: sr,
            });
        }
        Ok(())
    }

    /// Adds a `1 × m` row to every row of an `n × m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, row)?;
        let (ta, tr) = (self.value(a), self.value(row));
        let mut t = ta.clone();
        for r in 0..t.rows {
            for c in 0..t.cols {
                t.data[r * t.cols + c] += tr.data[c];
            }
        }
        Ok(self.push(t, Op::AddRow(a, row)))
    }

    /// Multiplies every row of an `n × m` matrix by a `1 × m` row
    /// (right-multiplication by a diagonal matrix).
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, row)?;
        let (ta, tr) = (self.value(a), self.value(row));
        let mut t = ta.clone();
        for r in 0..t.rows {
            for c in 0..t.cols {
                t.data[r * t.cols + c] *= tr.data[c];
            }
        }
        Ok(self.push(t, Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let mut t = self.value(a).clone();
        t.data.iter_mut().for_each(|v| *v *= k);
        self.push(t, Op::Scale(a, k))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::Shape {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let t = matmul(self.value(a), self.value(b));
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = transpose(self.value(a));
        self.push(t, Op::Transpose(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        t.data.iter_mut().for_each(|v| *v = v.max(0.0));
        if self.branches.is_some() {
            let active: Vec<u64> = t.data.iter().map(|&v| u64::from(v > 0.0)).collect();
            self.note(active);
        }
        self.push(t, Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// `Σ_i x_i · diag_i · y_i` for three same-shape operands.
    pub fn bilinear(&mut self, x: Var, diag: Var, y: Var) -> Result<Var> {
        self.same_shape("bilinear", x, diag)?;
        self.same_shape("bilinear", x, y)?;
        let (tx, td, ty) = (self.value(x), self.value(diag), self.value(y));
        let s = tx
            .data
            .iter()
            .zip(&td.data)
            .zip(&ty.data)
            .map(|((a, b), c)| a * b * c)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::Bilinear(x, diag, y)))
    }

    /// Row-wise softmax (max-subtracted).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.is_empty() {
            return Err(Error::Empty("softmax"));
        }
        let mut t = ta.clone();
        for r in 0..t.rows {
            softmax_in_place(&mut t.data[r * t.cols..(r + 1) * t.cols]);
        }
        Ok(self.push(t, Op::Softmax(a)))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.is_empty() {
            return Err(Error::Empty("log_softmax"));
        }
        let mut t = ta.clone();
        for r in 0..t.rows {
            let row = &mut t.data[r * t.cols..(r + 1) * t.cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(self.push(t, Op::LogSoftmax(a)))
    }

    /// Concatenates along columns; all parts need the same row count.
    pub fn hconcat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("hconcat"))?;
        let rows = self.shape(first).0;
        let mut cols = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.0 != rows {
                return Err(Error::Shape {
                    op: "hconcat",
                    left: self.shape(first),
                    right: s,
                });
            }
            cols += s.1;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        Ok(self.push(Tensor { rows, cols, data }, Op::HConcat(parts.to_vec())))
    }

    /// Stacks along rows; all parts need the same column count.
    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("vstack"))?;
        let cols = self.shape(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols != cols {
                return Err(Error::Shape {
                    op: "vstack",
                    left: self.shape(first),
                    right: t.shape(),
                });
            }
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        Ok(self.push(Tensor { rows, cols, data }, Op::VStack(parts.to_vec())))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= ta.rows) {
            return Err(Error::invalid(format!("row {bad} out of range for {:?}", ta.shape())));
        }
        let mut data = Vec::with_capacity(idx.len() * ta.cols);
        for &i in idx {
            data.extend_from_slice(ta.row_slice(i));
        }
        let t = Tensor {
            rows: idx.len(),
            cols: ta.cols,
            data,
        };
        self.note(idx.iter().map(|&i| i as u64));
        Ok(self.push(t, Op::SelectRows(a, idx.to_vec())))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.select_rows(a, &[i])
    }

    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= ta.cols) {
            return Err(Error::invalid(format!(
                "column {bad} out of range for {:?}",
                ta.shape()
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * ta.rows);
        for r in 0..ta.rows {
            for &c in idx {
                data.push(ta.data[r * ta.cols + c]);
            }
        }
        let t = Tensor {
            rows: ta.rows,
            cols: idx.len(),
            data,
        };
        self.note(idx.iter().map(|&i| i as u64));
        Ok(self.push(t, Op::SelectCols(a, idx.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.select_cols(a, &idx)
    }

    /// Single entry as a `1 × 1` node.
    pub fn entry(&mut self, a: Var, r: usize, c: usize) -> Result<Var> {
        let row = self.row(a, r)?;
        self.select_cols(row, &[c])
    }

    /// Column-wise maximum over rows: `n × m → 1 × m`. The gradient flows to
    /// the first maximal row of each column.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rows == 0 {
            return Err(Error::Empty("max_rows"));
        }
        let mut arg = vec![0usize; ta.cols];
        let mut data = vec![f64::NEG_INFINITY; ta.cols];
        for r in 0..ta.rows {
            for c in 0..ta.cols {
                let v = ta.data[r * ta.cols + c];
                if v > data[c] {
                    data[c] = v;
                    arg[c] = r;
                }
            }
        }
        let t = Tensor::row(data);
        self.note(arg.iter().map(|&i| i as u64));
        Ok(self.push(t, Op::MaxRows(a, arg)))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let mut t = ta.clone();
        let mut inv_std = Vec::with_capacity(t.rows);
        for r in 0..t.rows {
            let row = &mut t.data[r * t.cols..(r + 1) * t.cols];
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        self.push(t, Op::LayerNorm(a, inv_std))
    }

    /// Inverted dropout. Identity on evaluation graphs or when `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let Some(rng) = self.rng.as_mut() else {
            return a;
        };
        let keep = 1.0 - rate;
        let n = self.nodes[a.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mut t = self.value(a).clone();
        for (v, m) in t.data.iter_mut().zip(&mask) {
            *v *= m;
        }
        self.push(t, Op::Mask(a, mask))
    }

    /// Runs reverse accumulation from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                left: shape,
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            nodes: grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accum(grads, *a, g.clone());
                accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accum(grads, *a, g.clone());
                accum(grads, *b, map(g, |v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                accum(grads, *a, zip(g, tb, |x, y| x * y));
                accum(grads, *b, zip(g, ta, |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                accum(grads, *a, g.clone());
                accum(grads, *row, col_sums(g));
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (self.value(*a), self.value(*row));
                let mut ga = g.clone();
                let mut gr = Tensor::zeros(1, tr.cols);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        let k = r * g.cols + c;
                        ga.data[k] = g.data[k] * tr.data[c];
                        gr.data[c] += g.data[k] * ta.data[k];
                    }
                }
                accum(grads, *a, ga);
                accum(grads, *row, gr);
            }
            Op::Scale(a, k) => accum(grads, *a, map(g, |v| v * k)),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                accum(grads, *a, matmul(g, &transpose(tb)));
                accum(grads, *b, matmul(&transpose(ta), g));
            }
            Op::Transpose(a) => accum(grads, *a, transpose(g)),
            Op::Relu(a) => {
                let ta = self.value(*a);
                accum(grads, *a, zip(g, ta, |gv, x| if x > 0.0 { gv } else { 0.0 }));
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                accum(grads, *a, Tensor::filled(r, c, g.data[0]));
            }
            Op::Bilinear(x, d, y) => {
                let (tx, td, ty) = (self.value(*x), self.value(*d), self.value(*y));
                let s = g.data[0];
                accum(grads, *x, zip(td, ty, |b, c| s * b * c));
                accum(grads, *d, zip(tx, ty, |a, c| s * a * c));
                accum(grads, *y, zip(tx, td, |a, b| s * a * b));
            }
            Op::Softmax(a) => {
                let mut ga = Tensor::zeros(out.rows, out.cols);
                for r in 0..out.rows {
                    let (y, gy) = (out.row_slice(r), g.row_slice(r));
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for c in 0..out.cols {
                        ga.data[r * out.cols + c] = y[c] * (gy[c] - dot);
                    }
                }
                accum(grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let mut ga = Tensor::zeros(out.rows, out.cols);
                for r in 0..out.rows {
                    let (y, gy) = (out.row_slice(r), g.row_slice(r));
                    let total: f64 = gy.iter().sum();
                    for c in 0..out.cols {
                        ga.data[r * out.cols + c] = gy[c] - y[c].exp() * total;
                    }
                }
                accum(grads, *a, ga);
            }
            Op::HConcat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (rows, cols) = self.shape(*p);
                    let mut gp = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        gp.data[r * cols..(r + 1) * cols].copy_from_slice(&g.row_slice(r)[offset..offset + cols]);
                    }
                    offset += cols;
                    accum(grads, *p, gp);
                }
            }
            Op::VStack(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (rows, cols) = self.shape(*p);
                    let n = rows * cols;
                    let gp = Tensor {
                        rows,
                        cols,
                        data: g.data[offset..offset + n].to_vec(),
                    };
                    offset += n;
                    accum(grads, *p, gp);
                }
            }
            Op::SelectRows(a, idx) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                for (k, &src) in idx.iter().enumerate() {
                    for c in 0..cols {
                        ga.data[src * cols + c] += g.data[k * cols + c];
                    }
                }
                accum(grads, *a, ga);
            }
            Op::SelectCols(a, idx) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    for (k, &src) in idx.iter().enumerate() {
                        ga.data[r * cols + src] += g.data[r * idx.len() + k];
                    }
                }
                accum(grads, *a, ga);
            }
            Op::MaxRows(a, arg) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                for (c, &r) in arg.iter().enumerate() {
                    ga.data[r * cols + c] = g.data[c];
                }
                accum(grads, *a, ga);
            }
            Op::LayerNorm(a, inv_std) => {
                let mut ga = Tensor::zeros(out.rows, out.cols);
                let n = out.cols as f64;
                for (r, inv) in inv_std.iter().enumerate() {
                    let (xh, gy) = (out.row_slice(r), g.row_slice(r));
                    let mean_g = gy.iter().sum::<f64>() / n;
                    let mean_gx = gy.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
                    let row = &mut ga.data[r * out.cols..(r + 1) * out.cols];
                    for (c, v) in row.iter_mut().enumerate() {
                        *v = inv * (gy[c] - mean_g - xh[c] * mean_gx);
                    }
                }
                accum(grads, *a, ga);
            }
            Op::Mask(a, mask) => {
                let mut ga = g.clone();
                for (v, m) in ga.data.iter_mut().zip(mask) {
                    *v *= m;
                }
                accum(grads, *a, ga);
            }
        }
    }
}

/// Adjoints from one [`Graph::backward`] call.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Adjoint of any node, `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }
}

fn accum(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        rows: t.rows,
        cols: t.cols,
        data: t.data.iter().map(|v| f(*v)).collect(),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect(),
    }
}

fn col_sums(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, t.cols);
    for r in 0..t.rows {
        for c in 0..t.cols {
            out.data[c] += t.data[r * t.cols + c];
        }
    }
    out
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        rows: n,
        cols: m,
        data: out,
    }
}

pub(crate) fn transpose(a: &Tensor) -> Tensor {
    let mut out = vec![0.0; a.data.len()];
    for r in 0..a.rows {
        for c in 0..a.cols {
            out[c * a.rows + r] = a.data[r * a.cols + c];
        }
    }
    Tensor {
        rows: a.cols,
        cols: a.rows,
        data: out,
    }
}

/// Max-subtracted softmax over a slice.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    v.iter_mut().for_each(|x| *x /= total);
}

/// Softmax of a plain vector.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// `Σ_i x_i · diag_i · y_i` on plain slices.
pub fn bilinear_score(x: &[f64], diag: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != diag.len() || y.len() != diag.len() {
        return Err(Error::Shape {
            op: "bilinear_score",
            left: (1, x.len()),
            right: (1, y.len().max(diag.len())),
        });
    }
    Ok(x.iter().zip(diag).zip(y).map(|((a, b), c)| a * b * c).sum())
}

/// Indices of the `k` largest entries, highest first; ties keep the earlier index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Index of the maximum entry; ties keep the earlier index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn fd_check(build: impl Fn(&mut Graph, &[Var]) -> Var, inputs: &[Tensor]) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss).unwrap();
        let h = 1e-5;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[k]).cloned().unwrap_or(Tensor::zeros(t.rows, t.cols));
            for e in 0..t.len() {
                let eval = |delta: f64| {
                    let mut g = Graph::new();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut t = t.clone();
                            if j == k {
                                t.data[e] += delta;
                            }
                            g.constant(t)
                        })
                        .collect();
                    let l = build(&mut g, &vars);
                    g.scalar(l)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data[e];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel <= 1e-4, "input {k} entry {e}: analytic {a} numeric {numeric}");
            }
        }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn bilinear_examples() {
        assert_eq!(bilinear_score(&[1.0, 2.0], &[1.0, 1.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert_eq!(bilinear_score(&[1.0, 2.0], &[0.0, 0.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert_eq!(
            bilinear_score(&[1.0, -1.0, 2.0], &[0.5, 2.0, 1.0], &[2.0, 3.0, 1.0]).unwrap(),
            -3.0
        );
        assert!(bilinear_score(&[1.0], &[1.0, 1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn bilinear_mismatch_on_graph_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(vec![1.0, 2.0]));
        let b = g.constant(Tensor::row(vec![1.0]));
        assert!(g.bilinear(a, b, a).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let big = softmax(&[1000.0, 0.0]).unwrap();
        assert!((big[0] - 1.0).abs() < 1e-12 && big[1] >= 0.0 && big[1] < 1e-300);
        let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        for (a, b) in p.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn softmax_first_entry_gradient_sums_to_zero() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::row(vec![0.3, -1.2, 2.0, 0.0]));
        let p = g.softmax(v).unwrap();
        let first = g.select_cols(p, &[0]).unwrap();
        let grads = g.backward(first).unwrap();
        let total: f64 = grads.wrt(v).unwrap().data().iter().sum();
        assert!(total.abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::row(vec![1.0, 2.0]));
        assert!(g.backward(v).is_err());
    }

    #[test]
    fn param_gradients_accumulate_across_calls() {
        let mut ps = ParamStore::default();
        let id = ps.add("b", Tensor::row(vec![1.0, 1.0]));
        for _ in 0..2 {
            let mut g = Graph::new();
            let x = g.constant(Tensor::row(vec![2.0, 3.0]));
            let b = g.param(&ps, id);
            let s = g.bilinear(x, b, x).unwrap();
            let grads = g.backward(s).unwrap();
            ps.accumulate(&grads, 1.0);
        }
        assert_eq!(ps.grad(id).data(), &[8.0, 18.0]);
        ps.zero_grad();
        assert_eq!(ps.grad(id).data(), &[0.0, 0.0]);
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let inputs = vec![
                rand_tensor(&mut rng, 3, 4),
                rand_tensor(&mut rng, 4, 2),
                rand_tensor(&mut rng, 1, 2),
                rand_tensor(&mut rng, 1, 4),
            ];
            fd_check(
                |g, v| {
                    let a = g.mul_row(v[0], v[3]).unwrap();
                    let h = g.matmul(a, v[1]).unwrap();
                    let h = g.add_row(h, v[2]).unwrap();
                    let n = g.layer_norm(h, 1e-5);
                    let t = g.transpose(n);
                    let s = g.softmax(t).unwrap();
                    let m = g.max_rows(s).unwrap();
                    let ls = g.log_softmax(h).unwrap();
                    let sel = g.select_rows(ls, &[2, 0]).unwrap();
                    let c = g.hconcat(&[sel, sel]).unwrap();
                    let st = g.vstack(&[m, m]).unwrap();
                    let ct = g.transpose(c);
                    let q = g.matmul(ct, st).unwrap();
                    let r = g.relu(q);
                    let x = g.scale(r, 0.7);
                    let y = g.sum(x);
                    let b = g.bilinear(v[3], v[3], v[3]).unwrap();
                    let b2 = g.mul(b, b).unwrap();
                    let z = g.sub(y, b2).unwrap();
                    g.add(z, b).unwrap()
                },
                &inputs,
            );
        }
    }

    #[test]
    fn dropout_is_identity_without_rng() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::row(vec![1.0, 2.0, 3.0]));
        let d = g.dropout(v, 0.5);
        assert_eq!(d, v);

        let mut g = Graph::training(ChaCha8Rng::seed_from_u64(1));
        let v = g.constant(Tensor::row(vec![1.0; 64]));
        let d = g.dropout(v, 0.5);
        let vals = g.value(d).data();
        assert!(vals.iter().all(|x| *x == 0.0 || *x == 2.0));
        assert!(vals.contains(&0.0));
    }

    #[test]
    fn top_k_breaks_ties_by_index() {
        assert_eq!(top_k_indices(&[1.0, 3.0, 3.0, 0.5], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[1.0, 2.0], 5), vec![1, 0]);
        assert_eq!(argmax(&[0.2, 0.7, 0.7]), 1);
    }
}
