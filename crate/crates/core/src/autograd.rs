//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation applied to its variables. Calling
//! [`Tape::backward`] walks the record in reverse and accumulates gradients
//! for every node that depends on a trainable leaf. Values are always 2-D;
//! vectors are `1 x d` rows and scalars are `1 x 1`.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{s, Array2, Axis};

use crate::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Compressed sparse row matrix used for neighbourhood aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub rows: usize,
    pub cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    /// Builds a CSR matrix from `(row, col, value)` entries. Duplicate
    /// coordinates are summed.
    pub fn from_entries(rows: usize, cols: usize, mut entries: Vec<(usize, usize, f64)>) -> Self {
        entries.sort_by_key(|a| (a.0, a.1));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            assert!(r < rows && c < cols, "csr entry out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
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
        Self { rows, cols, indptr, indices, values }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn mul_dense(&self, x: &Mat) -> Mat {
        assert_eq!(self.cols, x.nrows());
        let mut out = Mat::zeros((self.rows, x.ncols()));
        for r in 0..self.rows {
            let mut row = out.row_mut(r);
            for k in self.indptr[r]..self.indptr[r + 1] {
                row.scaled_add(self.values[k], &x.row(self.indices[k]));
            }
        }
        out
    }

    pub fn t_mul_dense(&self, g: &Mat) -> Mat {
        assert_eq!(self.rows, g.nrows());
        let mut out = Mat::zeros((self.cols, g.ncols()));
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                out.row_mut(self.indices[k]).scaled_add(self.values[k], &g.row(r));
            }
        }
        out
    }

    pub fn to_dense(&self) -> Mat {
        let mut out = Mat::zeros((self.rows, self.cols));
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                out[[r, self.indices[k]]] += self.values[k];
            }
        }
        out
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat, inv_std: Vec<f64> },
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SumAll(Var),
    SumRows(Var),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    Spmm(Rc<Csr>, Var),
    RowAsMatrix(Var, usize),
    NormalizeRows(Var, Vec<f64>),
    Pick(Var, Vec<(usize, usize)>),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Records operations for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    param_order: Vec<(ParamId, Var)>,
}

/// Gradients produced by one backward pass.
pub struct Grads {
    grads: Vec<Option<Mat>>,
    params: Vec<(ParamId, Var)>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of every parameter that was bound on the tape and reached by
    /// the backward pass.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Mat)> + '_ {
        self.params
            .iter()
            .filter_map(move |(pid, v)| self.grads[v.0].as_ref().map(|g| (*pid, g)))
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const C: f64 = 0.044_715;
    let u = K * (x + C * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * C * x * x);
    (y, dy)
}

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

fn causal_softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let upto = (i + 1).min(row.len());
        let m = row
            .slice(s![..upto])
            .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j < upto {
                *v = (*v - m).exp();
                z += *v;
            } else {
                *v = 0.0;
            }
        }
        row.mapv_inplace(|v| v / z);
    }
    out
}

pub fn log_softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
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

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.iter().all(|v| !v.is_nan()), "NaN produced on tape");
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// A free input that receives a gradient.
    pub fn leaf(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Binds a parameter to the tape. Each parameter is bound at most once;
    /// frozen parameters are bound as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let trainable = !store.is_frozen(id);
        let v = self.push(store.value(id).clone(), Op::Leaf, trainable);
        self.params.insert(id, v);
        self.param_order.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulBT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Adds the `1 x c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(b).0, 1, "add_row expects a single row");
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::AddRow(a, b), ng)
    }

    /// `scale * a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a).mapv(|x| scale * x + shift);
        let ng = self.ng(a);
        self.push(v, Op::Affine(a, scale), ng)
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| gelu_parts(x).0);
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let ng = self.ng(a);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        let ng = self.ng(a);
        self.push(v, Op::Ln(a), ng)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(v, Op::Clamp(a, lo, hi), ng)
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        let v = if causal {
            causal_softmax_rows(self.value(a))
        } else {
            softmax_rows(self.value(a))
        };
        let ng = self.ng(a);
        self.push(v, Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(v, Op::LogSoftmax(a), ng)
    }

    /// Row-wise layer normalisation with `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mu = row.sum() / d;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mu) * is);
            inv_std.push(is);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, start), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), idx);
        let ng = self.ng(a);
        self.push(v, Op::GatherRows(a, idx.to_vec()), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::SumAll(a), ng)
    }

    /// Sums over rows, giving a `1 x c` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(v, Op::SumRows(a), ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean of zero rows")
            .insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(v, Op::MeanRows(a), ng)
    }

    /// Column-wise maximum over rows; ties go to the first row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert!(x.nrows() > 0, "max of zero rows");
        let mut arg = vec![0usize; x.ncols()];
        let mut v = Mat::zeros((1, x.ncols()));
        for c in 0..x.ncols() {
            let mut best = x[[0, c]];
            for r in 1..x.nrows() {
                if x[[r, c]] > best {
                    best = x[[r, c]];
                    arg[c] = r;
                }
            }
            v[[0, c]] = best;
        }
        let ng = self.ng(a);
        self.push(v, Op::MaxRows(a, arg), ng)
    }

    /// Sparse-dense product `m * a`.
    pub fn spmm(&mut self, m: Rc<Csr>, a: Var) -> Var {
        let v = m.mul_dense(self.value(a));
        let ng = self.ng(a);
        self.push(v, Op::Spmm(m, a), ng)
    }

    /// Reinterprets row `row` of `a` as a `rows x cols` matrix.
    pub fn row_as_matrix(&mut self, a: Var, row: usize, rows: usize, cols: usize) -> Var {
        let r = self.value(a).row(row).to_owned();
        assert_eq!(r.len(), rows * cols);
        let v = r.into_shape_with_order((rows, cols)).expect("row reshape");
        let ng = self.ng(a);
        self.push(v, Op::RowAsMatrix(a, row), ng)
    }

    /// Scales each row to unit L2 norm; rows with norm below `eps` are
    /// divided by `eps` instead.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut v = self.value(a).clone();
        let mut norms = Vec::with_capacity(v.nrows());
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt().max(eps);
            row.mapv_inplace(|x| x / n);
            norms.push(n);
        }
        let ng = self.ng(a);
        self.push(v, Op::NormalizeRows(a, norms), ng)
    }

    /// Sum of the selected entries, as a scalar.
    pub fn pick_sum(&mut self, a: Var, at: &[(usize, usize)]) -> Var {
        let x = self.value(a);
        let total: f64 = at.iter().map(|&(r, c)| x[[r, c]]).sum();
        let ng = self.ng(a);
        self.push(Mat::from_elem((1, 1), total), Op::Pick(a, at.to_vec()), ng)
    }

    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar");
        self.backward_seeded(&[(loss, Mat::ones((1, 1)))])
    }

    /// Backward pass starting from arbitrary upstream gradients.
    pub fn backward_seeded(&self, seeds: &[(Var, Mat)]) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(self.shape(*v), g.dim(), "seed shape mismatch");
            accumulate(&mut grads[v.0], g.clone());
        }
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads, params: self.param_order.clone() }
    }

    fn send(&self, grads: &mut [Option<Mat>], to: Var, g: Mat) {
        if self.nodes[to.0].needs_grad {
            accumulate(&mut grads[to.0], g);
        }
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.send(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    self.send(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulBT(a, b) => {
                if self.ng(*a) {
                    self.send(grads, *a, g.dot(self.value(*b)));
                }
                if self.ng(*b) {
                    self.send(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.send(grads, *a, g * self.value(*b));
                }
                if self.ng(*b) {
                    self.send(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(a, b) => {
                self.send(grads, *a, g.clone());
                if self.ng(*b) {
                    self.send(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Affine(a, scale) => self.send(grads, *a, g * *scale),
            Op::Relu(a) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*a), |gv, &x| {
                    if x <= 0.0 {
                        *gv = 0.0
                    }
                });
                self.send(grads, *a, d);
            }
            Op::Gelu(a) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*a), |gv, &x| *gv *= gelu_parts(x).1);
                self.send(grads, *a, d);
            }
            Op::Exp(a) => self.send(grads, *a, g * &node.value),
            Op::Ln(a) => self.send(grads, *a, g / self.value(*a)),
            Op::Clamp(a, lo, hi) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*a), |gv, &x| {
                    if x < *lo || x > *hi {
                        *gv = 0.0
                    }
                });
                self.send(grads, *a, d);
            }
            Op::Softmax(a) => {
                let p = &node.value;
                let gp = g * p;
                let dots = gp.sum_axis(Axis(1)).insert_axis(Axis(1));
                self.send(grads, *a, gp - p * &dots);
            }
            Op::LogSoftmax(a) => {
                let p = node.value.mapv(f64::exp);
                let sums = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                self.send(grads, *a, g - &(p * &sums));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                if self.ng(*gamma) {
                    let dg = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.send(grads, *gamma, dg);
                }
                if self.ng(*beta) {
                    self.send(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*x) {
                    let dxhat = g * self.value(*gamma);
                    let d = xhat.ncols() as f64;
                    let mut dx = Mat::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        let is = inv_std[r];
                        for c in 0..xhat.ncols() {
                            dx[[r, c]] = is / d * (d * dh[c] - sum_dh - xh[c] * sum_dh_xh);
                        }
                    }
                    self.send(grads, *x, dx);
                }
            }
            Op::Transpose(a) => self.send(grads, *a, g.t().to_owned()),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.shape(*p).0;
                    if self.ng(*p) {
                        self.send(grads, *p, g.slice(s![off..off + n, ..]).to_owned());
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.shape(*p).1;
                    if self.ng(*p) {
                        self.send(grads, *p, g.slice(s![.., off..off + n]).to_owned());
                    }
                    off += n;
                }
            }
            Op::SliceRows(a, start) => {
                let mut d = Mat::zeros(self.shape(*a));
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                self.send(grads, *a, d);
            }
            Op::SliceCols(a, start) => {
                let mut d = Mat::zeros(self.shape(*a));
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                self.send(grads, *a, d);
            }
            Op::GatherRows(a, idx) => {
                let mut d = Mat::zeros(self.shape(*a));
                for (k, &r) in idx.iter().enumerate() {
                    let mut row = d.row_mut(r);
                    row += &g.row(k);
                }
                self.send(grads, *a, d);
            }
            Op::SumAll(a) => self.send(grads, *a, Mat::from_elem(self.shape(*a), g[[0, 0]])),
            Op::SumRows(a) => {
                let (r, _) = self.shape(*a);
                let d = g.broadcast(self.shape(*a)).unwrap().to_owned();
                debug_assert_eq!(d.nrows(), r);
                self.send(grads, *a, d);
            }
            Op::MeanRows(a) => {
                let (r, _) = self.shape(*a);
                let d = g.broadcast(self.shape(*a)).unwrap().mapv(|v| v / r as f64);
                self.send(grads, *a, d);
            }
            Op::MaxRows(a, arg) => {
                let mut d = Mat::zeros(self.shape(*a));
                for (c, &r) in arg.iter().enumerate() {
                    d[[r, c]] = g[[0, c]];
                }
                self.send(grads, *a, d);
            }
            Op::Spmm(m, a) => self.send(grads, *a, m.t_mul_dense(g)),
            Op::RowAsMatrix(a, row) => {
                let mut d = Mat::zeros(self.shape(*a));
                let flat = g.iter().copied().collect::<Vec<_>>();
                for (c, v) in flat.into_iter().enumerate() {
                    d[[*row, c]] = v;
                }
                self.send(grads, *a, d);
            }
            Op::NormalizeRows(a, norms) => {
                let y = &node.value;
                let mut d = g.clone();
                for r in 0..y.nrows() {
                    let n = norms[r];
                    let yr = y.row(r);
                    let gr = g.row(r);
                    // below eps the map is linear: y = x / eps
                    let x_norm = self.value(*a).row(r).dot(&self.value(*a).row(r)).sqrt();
                    let proj = if x_norm >= n { yr.dot(&gr) } else { 0.0 };
                    for c in 0..y.ncols() {
                        d[[r, c]] = (gr[c] - yr[c] * proj) / n;
                    }
                }
                self.send(grads, *a, d);
            }
            Op::Pick(a, at) => {
                let mut d = Mat::zeros(self.shape(*a));
                for &(r, c) in at {
                    d[[r, c]] += g[[0, 0]];
                }
                self.send(grads, *a, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(f: impl Fn(&Mat) -> f64, x: &Mat) -> Mat {
        let h = 1e-6;
        let mut out = Mat::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            out[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn check(build: impl Fn(&mut Tape, Var) -> Var, x: Mat) {
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let out = build(&mut t, v);
        let g = t.backward(out).get(v).cloned().unwrap();
        let num = numeric_grad(
            |m| {
                let mut t = Tape::new();
                let v = t.leaf(m.clone());
                let o = build(&mut t, v);
                t.scalar(o)
            },
            &x,
        );
        let err = (&g - &num).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(err < 1e-6, "grad mismatch {err}\n{g}\n{num}");
    }

    fn probe() -> Mat {
        array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.5]]
    }

    #[test]
    fn matmul_and_transpose_grads() {
        let w = array![[0.2, -0.3], [0.5, 0.1], [-0.4, 0.9]];
        check(
            |t, x| {
                let w = t.constant(w.clone());
                let y = t.matmul(x, w);
                let yt = t.transpose(y);
                let z = t.matmul_bt(yt, yt);
                t.sum_all(z)
            },
            probe(),
        );
    }

    #[test]
    fn softmax_layernorm_gelu_grads() {
        check(
            |t, x| {
                let g = t.constant(array![[1.5, 0.5, -1.0]]);
                let b = t.constant(array![[0.1, 0.2, 0.3]]);
                let ln = t.layer_norm(x, g, b, 1e-5);
                let a = t.gelu(ln);
                let sm = t.softmax(a, false);
                let w = t.constant(array![[1.0, 2.0, 3.0], [-1.0, 0.5, 2.0]]);
                let p = t.mul(sm, w);
                t.sum_all(p)
            },
            probe(),
        );
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut t = Tape::new();
        let x = t.constant(Mat::zeros((3, 3)));
        let p = t.softmax(x, true);
        let v = t.value(p);
        assert_eq!(v[[0, 1]], 0.0);
        assert!((v[[1, 0]] - 0.5).abs() < 1e-15);
        assert!((v[[2, 2]] - 1.0 / 3.0).abs() < 1e-15);
        check(
            |t, x| {
                let sq = t.matmul_bt(x, x);
                let p = t.softmax(sq, true);
                let w = t.constant(array![[1.0, 2.0], [3.0, -1.0]]);
                let q = t.mul(p, w);
                t.sum_all(q)
            },
            probe(),
        );
    }

    #[test]
    fn reshaping_ops_grads() {
        check(
            |t, x| {
                let a = t.slice_rows(x, 1, 1);
                let b = t.slice_cols(x, 0, 2);
                let bt = t.transpose(b);
                let c = t.concat_rows(&[a, x]);
                let d = t.gather_rows(c, &[2, 0, 0]);
                let e = t.max_rows(d);
                let f = t.mean_rows(x);
                let h = t.concat_cols(&[e, f]);
                let m = t.row_as_matrix(h, 0, 2, 3);
                let k = t.matmul(bt, m);
                let s = t.exp(k);
                let l = t.sum_rows(s);
                let z = t.ln(l);
                t.sum_all(z)
            },
            probe(),
        );
    }

    #[test]
    fn normalize_logsoftmax_pick_grads() {
        check(
            |t, x| {
                let n = t.normalize_rows(x, 1e-12);
                let s = t.matmul_bt(n, n);
                let s = t.scale(s, 3.0);
                let ls = t.log_softmax(s);
                t.pick_sum(ls, &[(0, 0), (1, 0), (1, 1)])
            },
            probe(),
        );
    }

    #[test]
    fn spmm_grad_matches_dense() {
        let m = Rc::new(Csr::from_entries(
            2,
            2,
            vec![(0, 1, 0.5), (1, 0, 1.0), (1, 1, 2.0), (0, 1, 0.25)],
        ));
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.to_dense(), array![[0.0, 0.75], [1.0, 2.0]]);
        check(
            |t, x| {
                let y = t.spmm(m.clone(), x);
                let r = t.relu(y);
                let c = t.clamp(r, 0.0, 1.0);
                let x0 = t.slice_rows(x, 0, 1);
                let q = t.add_row(c, x0);
                let q = t.mul(q, x);
                let q = t.add(q, c);
                t.sum_all(q)
            },
            array![[0.3, -1.2, 0.7], [0.2, 0.4, -0.5]],
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(array![[1.0, 2.0]]);
        let x = t.leaf(array![[3.0, 4.0]]);
        let y = t.mul(c, x);
        let s = t.sum_all(y);
        let g = t.backward(s);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &array![[1.0, 2.0]]);
    }
}
