//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation as a node holding its value. Parents
//! always have smaller indices than their children, so walking the node list
//! backwards is a reverse topological order and each node is visited once.

use std::sync::Arc;

use crate::scalar::Scalar;
use crate::tensor::matrix::{dot, Matrix};
use crate::tensor::TensorError;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Softplus,
    Relu,
    Exp,
    Ln,
    Abs,
    Sqrt,
    Recip,
    Square,
    Neg,
}

/// Sparse linear scatter from per-source scalars onto output cells.
///
/// `weights[k]` lists `(cell, weight)` pairs receiving source `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatPlan {
    pub cells: usize,
    pub weights: Vec<Vec<(usize, f64)>>,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Const,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Sum(Var),
    Unary(Var, Unary),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, shift: Var, xhat: Matrix<T>, inv_std: Vec<T> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Cosine { a: Var, b: Var, eps: T },
    RowMax(Var, Vec<usize>),
    Focal { scores: Var, labels: Vec<T>, alpha: T, gamma: T },
    Splat(Var, Arc<SplatPlan>),
    Reshape(Var),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    tracked: bool,
}

/// Computation graph for one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Score clamp used by the focal loss.
pub const FOCAL_CLAMP: f64 = 1e-7;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn record(&mut self, value: Matrix<T>, op: Op<T>, parents: &[Var]) -> Var {
        let tracked = self.tracked(parents);
        self.push(value, op, tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.record(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a * bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).matmul_t(self.value(b))?;
        Ok(self.record(value, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.record(value, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y).map_err(|_| self.shape_err("add", a, b))?;
        Ok(self.record(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y).map_err(|_| self.shape_err("sub", a, b))?;
        Ok(self.record(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y).map_err(|_| self.shape_err("mul", a, b))?;
        Ok(self.record(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(self.shape_err("add_row", a, row));
        }
        let mut value = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for i in 0..r {
            for (x, &b) in value.row_mut(i).iter_mut().zip(&bias) {
                *x = *x + b;
            }
        }
        Ok(self.record(value, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let value = self.value(a).scale(k);
        self.record(value, Op::Scale(a, k), &[a])
    }

    /// Multiplies every entry of `a` by the 1x1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        if self.shape(s) != (1, 1) {
            return Err(self.shape_err("scale_by", a, s));
        }
        let k = self.scalar_value(s);
        let value = self.value(a).scale(k);
        Ok(self.record(value, Op::ScaleBy(a, s), &[a, s]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.record(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let value = self.value(a).map(|x| unary_forward(kind, x));
        self.record(value, Op::Unary(a, kind), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Neg)
    }

    /// Row-wise softmax with max-shift.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for r in 0..x.rows() {
            let row = value.row_mut(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        self.record(value, Op::Softmax(a), &[a])
    }

    /// Row-wise layer normalization followed by `gain * x + shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: T) -> Result<Var, TensorError> {
        let (rows, cols) = self.shape(x);
        if cols < 2 {
            return Err(TensorError::DegenerateRow(cols));
        }
        if self.shape(gain) != (1, cols) {
            return Err(self.shape_err("layer_norm gain", x, gain));
        }
        if self.shape(shift) != (1, cols) {
            return Err(self.shape_err("layer_norm shift", x, shift));
        }
        let n = T::of(cols as f64);
        let input = self.value(x);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = input.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(shift).data().to_vec();
        let mut value = xhat.clone();
        for r in 0..rows {
            for ((o, &gi), &bi) in value.row_mut(r).iter_mut().zip(&g).zip(&b) {
                *o = *o * gi + bi;
            }
        }
        Ok(self.record(value, Op::LayerNorm { x, gain, shift, xhat, inv_std }, &[x, gain, shift]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::Empty("concat_rows"))?;
        let cols = self.shape(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.shape(p).1 != cols {
                return Err(self.shape_err("concat_rows", first, p));
            }
            rows += self.shape(p).0;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        Ok(self.record(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::Empty("concat_cols"))?;
        let rows = self.shape(first).0;
        let mut cols = 0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(self.shape_err("concat_cols", first, p));
            }
            cols += self.shape(p).1;
        }
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let part = self.value(p);
            let w = part.cols();
            for r in 0..rows {
                value.row_mut(r)[offset..offset + w].copy_from_slice(part.row(r));
            }
            offset += w;
        }
        Ok(self.record(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `start..start + width` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var, TensorError> {
        let (rows, cols) = self.shape(a);
        if start + width > cols {
            return Err(TensorError::Index { index: start + width, len: cols });
        }
        let src = self.value(a);
        let mut value = Matrix::zeros(rows, width);
        for r in 0..rows {
            value.row_mut(r).copy_from_slice(&src.row(r)[start..start + width]);
        }
        Ok(self.record(value, Op::SliceCols(a, start), &[a]))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(a).select_rows(indices)?;
        Ok(self.record(value, Op::GatherRows(a, indices.to_vec()), &[a]))
    }

    /// Pairwise cosine similarities between the rows of `a` and `b`,
    /// `u·v / (‖u‖‖v‖ + eps)` clamped to `[-1, 1]`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var, eps: T) -> Result<Var, TensorError> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ca != cb {
            return Err(self.shape_err("cosine", a, b));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let na: Vec<T> = (0..ra).map(|i| dot(av.row(i), av.row(i)).sqrt()).collect();
        let nb: Vec<T> = (0..rb).map(|j| dot(bv.row(j), bv.row(j)).sqrt()).collect();
        let mut value = Matrix::zeros(ra, rb);
        for i in 0..ra {
            for j in 0..rb {
                let c = dot(av.row(i), bv.row(j)) / (na[i] * nb[j] + eps);
                value.set(i, j, c.max(-T::one()).min(T::one()));
            }
        }
        Ok(self.record(value, Op::Cosine { a, b, eps }, &[a, b]))
    }

    /// Maximum of each row as an `rows x 1` column; ties go to the lowest column index.
    pub fn row_max(&mut self, a: Var) -> Result<Var, TensorError> {
        let x = self.value(a);
        if x.cols() == 0 {
            return Err(TensorError::Empty("row_max"));
        }
        let mut arg = Vec::with_capacity(x.rows());
        let mut data = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let (best, val) = argmax(x.row(r));
            arg.push(best);
            data.push(val);
        }
        let value = Matrix::column_vector(&data);
        Ok(self.record(value, Op::RowMax(a, arg), &[a]))
    }

    /// Summed focal loss of scores against binary labels.
    ///
    /// Scores are clamped to `[FOCAL_CLAMP, 1 - FOCAL_CLAMP]`; the gradient is
    /// zero where clamping is active.
    pub fn focal_loss(&mut self, scores: Var, labels: &[T], alpha: T, gamma: T) -> Result<Var, TensorError> {
        let s = self.value(scores);
        if s.len() != labels.len() {
            return Err(TensorError::Shape { op: "focal_loss", left: s.shape(), right: (labels.len(), 1) });
        }
        let total = s.data().iter().zip(labels).map(|(&p, &y)| focal_value(p, y, alpha, gamma)).sum::<T>();
        let value = Matrix::scalar(total);
        Ok(self.record(value, Op::Focal { scores, labels: labels.to_vec(), alpha, gamma }, &[scores]))
    }

    /// Scatters per-source scalars (`sources x 1`) onto `plan.cells` outputs.
    pub fn splat(&mut self, values: Var, plan: Arc<SplatPlan>) -> Result<Var, TensorError> {
        let v = self.value(values);
        if v.shape() != (plan.weights.len(), 1) {
            return Err(TensorError::Shape { op: "splat", left: v.shape(), right: (plan.weights.len(), 1) });
        }
        let mut out = vec![T::zero(); plan.cells];
        for (k, list) in plan.weights.iter().enumerate() {
            let x = v.data()[k];
            for &(cell, w) in list {
                out[cell] = out[cell] + T::of(w) * x;
            }
        }
        let value = Matrix::column_vector(&out);
        Ok(self.record(value, Op::Splat(values, plan), &[values]))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, TensorError> {
        let value = Matrix::from_vec(rows, cols, self.value(a).data().to_vec())?;
        Ok(self.record(value, Op::Reshape(a), &[a]))
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::Shape { op, left: self.shape(a), right: self.shape(b) }
    }

    /// Reverse pass from a 1x1 root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>, TensorError> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(TensorError::NonScalarRoot(shape));
        }
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Matrix::scalar(T::one()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(grad) = grads[idx].take() else { continue };
            self.propagate(idx, &grad, &mut grads)?;
            grads[idx] = Some(grad);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) -> Result<(), TensorError> {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, delta: Matrix<T>| -> Result<(), TensorError> {
            if !self.nodes[v.0].tracked {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                acc(*a, g.matmul_t(bv)?)?;
                acc(*b, av.t_matmul(g)?)?;
            }
            Op::MatMulT(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                let av = self.value(*a);
                let bv = self.value(*b);
                acc(*a, g.matmul(bv)?)?;
                acc(*b, g.t_matmul(av)?)?;
            }
            Op::Transpose(a) => acc(*a, g.transpose())?,
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-T::one()))?;
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                acc(*a, g.zip_map(bv, |x, y| x * y)?)?;
                acc(*b, g.zip_map(av, |x, y| x * y)?)?;
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone())?;
                let mut col_sum = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &x) in col_sum.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o = *o + x;
                    }
                }
                acc(*row, col_sum)?;
            }
            Op::Scale(a, k) => acc(*a, g.scale(*k))?,
            Op::ScaleBy(a, s) => {
                let k = self.scalar_value(*s);
                let av = self.value(*a);
                acc(*a, g.scale(k))?;
                let ds = g.data().iter().zip(av.data()).fold(T::zero(), |t, (&x, &y)| t + x * y);
                acc(*s, Matrix::scalar(ds))?;
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Matrix::filled(r, c, g.item()))?;
            }
            Op::Unary(a, kind) => {
                let x = self.value(*a);
                let y = &node.value;
                let mut d = g.clone();
                for ((o, &xi), &yi) in d.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                    *o = *o * unary_derivative(*kind, xi, yi);
                }
                acc(*a, d)?;
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let inner = dot(gr, yr);
                    for ((o, &yi), &gi) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yi * (gi - inner);
                    }
                }
                acc(*a, d)?;
            }
            Op::LayerNorm { x, gain, shift, xhat, inv_std } => {
                let (rows, cols) = xhat.shape();
                let n = T::of(cols as f64);
                let gv = self.value(*gain).data().to_vec();
                let mut dx = Matrix::zeros(rows, cols);
                let mut dgain = Matrix::zeros(1, cols);
                let mut dshift = Matrix::zeros(1, cols);
                for r in 0..rows {
                    let gr = g.row(r);
                    let xr = xhat.row(r);
                    let dxhat: Vec<T> = gr.iter().zip(&gv).map(|(&a, &b)| a * b).collect();
                    let sum_d = dxhat.iter().copied().sum::<T>();
                    let sum_dx = dot(&dxhat, xr);
                    for c in 0..cols {
                        dx.set(r, c, inv_std[r] / n * (n * dxhat[c] - sum_d - xr[c] * sum_dx));
                        dgain.set(0, c, dgain.get(0, c) + gr[c] * xr[c]);
                        dshift.set(0, c, dshift.get(0, c) + gr[c]);
                    }
                }
                acc(*x, dx)?;
                acc(*gain, dgain)?;
                acc(*shift, dshift)?;
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let data = g.data()[start * c..(start + r) * c].to_vec();
                    acc(p, Matrix::from_vec(r, c, data)?)?;
                    start += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let mut d = Matrix::zeros(r, c);
                    for i in 0..r {
                        d.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + c]);
                    }
                    acc(p, d)?;
                    offset += c;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let w = g.cols();
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    d.row_mut(i)[*start..*start + w].copy_from_slice(g.row(i));
                }
                acc(*a, d)?;
            }
            Op::GatherRows(a, indices) => {
                let (r, c) = self.shape(*a);
                let mut d = Matrix::zeros(r, c);
                for (k, &i) in indices.iter().enumerate() {
                    for (o, &x) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o = *o + x;
                    }
                }
                acc(*a, d)?;
            }
            Op::Cosine { a, b, eps } => {
                let (da, db) = cosine_backward(self.value(*a), self.value(*b), &node.value, g, *eps);
                acc(*a, da)?;
                acc(*b, db)?;
            }
            Op::RowMax(a, arg) => {
                let (r, c) = self.shape(*a);
                let mut d = Matrix::zeros(r, c);
                for (i, &j) in arg.iter().enumerate() {
                    d.set(i, j, g.get(i, 0));
                }
                acc(*a, d)?;
            }
            Op::Focal { scores, labels, alpha, gamma } => {
                let s = self.value(*scores);
                let k = g.item();
                let data = s
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&p, &y)| k * focal_derivative(p, y, *alpha, *gamma))
                    .collect();
                acc(*scores, Matrix::from_vec(s.rows(), s.cols(), data)?)?;
            }
            Op::Splat(values, plan) => {
                let mut d = vec![T::zero(); plan.weights.len()];
                for (k, list) in plan.weights.iter().enumerate() {
                    d[k] = list.iter().fold(T::zero(), |t, &(cell, w)| t + T::of(w) * g.data()[cell]);
                }
                acc(*values, Matrix::column_vector(&d))?;
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Matrix::from_vec(r, c, g.data().to_vec())?)?;
            }
        }
        Ok(())
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the root.
    pub fn wrt(&self, v: Var, shape: (usize, usize)) -> Matrix<T> {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

fn argmax<T: Scalar>(row: &[T]) -> (usize, T) {
    let mut best = 0;
    let mut val = row[0];
    for (j, &x) in row.iter().enumerate().skip(1) {
        if x > val {
            best = j;
            val = x;
        }
    }
    (best, val)
}

fn unary_forward<T: Scalar>(kind: Unary, x: T) -> T {
    match kind {
        Unary::Sigmoid => {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        }
        Unary::Softplus => {
            if x > T::of(30.0) {
                x
            } else {
                x.max(T::zero()) + (-x.abs()).exp().ln_1p()
            }
        }
        Unary::Relu => x.max(T::zero()),
        Unary::Exp => x.exp(),
        Unary::Ln => x.ln(),
        Unary::Abs => x.abs(),
        Unary::Sqrt => x.sqrt(),
        Unary::Recip => T::one() / x,
        Unary::Square => x * x,
        Unary::Neg => -x,
    }
}

fn unary_derivative<T: Scalar>(kind: Unary, x: T, y: T) -> T {
    match kind {
        Unary::Sigmoid => y * (T::one() - y),
        Unary::Softplus => unary_forward(Unary::Sigmoid, x),
        Unary::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Unary::Exp => y,
        Unary::Ln => T::one() / x,
        Unary::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        Unary::Sqrt => T::of(0.5) / y,
        Unary::Recip => -y * y,
        Unary::Square => T::of(2.0) * x,
        Unary::Neg => -T::one(),
    }
}

fn clamp_score<T: Scalar>(p: T) -> (T, bool) {
    let lo = T::of(FOCAL_CLAMP);
    let hi = T::one() - lo;
    if p < lo {
        (lo, true)
    } else if p > hi {
        (hi, true)
    } else {
        (p, false)
    }
}

/// `FL(s, 1) = -α(1-s)^γ ln s`, `FL(s, 0) = -(1-α) s^γ ln(1-s)`, linear in the label.
pub(crate) fn focal_value<T: Scalar>(p: T, y: T, alpha: T, gamma: T) -> T {
    let (p, _) = clamp_score(p);
    let one = T::one();
    let pos = -alpha * (one - p).powf(gamma) * p.ln();
    let neg = -(one - alpha) * p.powf(gamma) * (one - p).ln();
    y * pos + (one - y) * neg
}

fn focal_derivative<T: Scalar>(p: T, y: T, alpha: T, gamma: T) -> T {
    let (p, clamped) = clamp_score(p);
    if clamped {
        return T::zero();
    }
    let one = T::one();
    let q = one - p;
    let dpos = if gamma == T::zero() {
        -alpha / p
    } else {
        -alpha * (-gamma * q.powf(gamma - one) * p.ln() + q.powf(gamma) / p)
    };
    let dneg = if gamma == T::zero() {
        (one - alpha) / q
    } else {
        -(one - alpha) * (gamma * p.powf(gamma - one) * q.ln() - p.powf(gamma) / q)
    };
    y * dpos + (one - y) * dneg
}

fn cosine_backward<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    out: &Matrix<T>,
    g: &Matrix<T>,
    eps: T,
) -> (Matrix<T>, Matrix<T>) {
    let (ra, cols) = a.shape();
    let rb = b.rows();
    let na: Vec<T> = (0..ra).map(|i| dot(a.row(i), a.row(i)).sqrt()).collect();
    let nb: Vec<T> = (0..rb).map(|j| dot(b.row(j), b.row(j)).sqrt()).collect();
    let mut da = Matrix::zeros(ra, cols);
    let mut db = Matrix::zeros(rb, cols);
    for i in 0..ra {
        for j in 0..rb {
            let gij = g.get(i, j);
            let c = out.get(i, j);
            if gij == T::zero() || c.abs() >= T::one() {
                continue;
            }
            let denom = na[i] * nb[j] + eps;
            let uv = dot(a.row(i), b.row(j));
            // d/du [u·v / (|u||v| + eps)] = v/D - (u·v) |v| u / (|u| D²)
            let ka = if na[i] > T::zero() { uv * nb[j] / (na[i] * denom * denom) } else { T::zero() };
            let kb = if nb[j] > T::zero() { uv * na[i] / (nb[j] * denom * denom) } else { T::zero() };
            for c in 0..cols {
                let u = a.get(i, c);
                let v = b.get(j, c);
                da.set(i, c, da.get(i, c) + gij * (v / denom - ka * u));
                db.set(j, c, db.get(j, c) + gij * (u / denom - kb * v));
            }
        }
    }
    (da, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn sum_of_leaf_has_all_ones_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(m(&[&[1.0, -2.0], &[3.0, 0.5]]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn squared_norm_gradient_is_twice_input() {
        let mut g = Graph::new();
        let x = g.leaf(m(&[&[1.0, -2.0, 3.5]]));
        let sq = g.square(x);
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 7.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(m(&[&[1.0, 2.0]]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarRoot((1, 2)))));
    }

    #[test]
    fn shared_parent_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(m(&[&[3.0]]));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 7.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(m(&[&[1.0, 2.0]]));
        let c = g.constant(m(&[&[5.0, 5.0]]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, 5.0]);
    }

    #[test]
    fn row_max_routes_to_lowest_index_on_ties() {
        let mut g = Graph::new();
        let x = g.leaf(m(&[&[1.0, 3.0, 3.0], &[2.0, 2.0, 2.0]]));
        let mx = g.row_max(x).unwrap();
        assert_eq!(g.value(mx).data(), &[3.0, 2.0]);
        let s = g.sum(mx);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn splat_scatters_and_gathers() {
        let plan = Arc::new(SplatPlan { cells: 3, weights: vec![vec![(0, 0.5), (1, 0.5)], vec![(2, 1.0)]] });
        let mut g = Graph::new();
        let v = g.leaf(Matrix::column_vector(&[2.0, 4.0]));
        let out = g.splat(v, plan).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 1.0, 4.0]);
        let w = g.constant(Matrix::column_vector(&[1.0, 2.0, 3.0]));
        let p = g.mul(out, w).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(v).unwrap().data(), &[1.5, 3.0]);
    }

    #[test]
    fn repeated_backward_is_bitwise_identical() {
        let mut g = Graph::new();
        let x = g.leaf(m(&[&[0.3, -1.2, 2.2], &[1.0, 0.1, -0.7]]));
        let y = g.softmax_rows(x);
        let z = g.mul(y, x).unwrap();
        let s = g.sum(z);
        let a = g.backward(s).unwrap();
        let b = g.backward(s).unwrap();
        assert_eq!(a.get(x).unwrap(), b.get(x).unwrap());
    }
}
