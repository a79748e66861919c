//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass together with the
//! values it produced. [`Tape::backward`] walks the record in reverse and
//! returns the adjoint of every node, from which parameter gradients are
//! read by name.

use std::collections::HashMap;
use std::sync::Arc;

use super::matrix::{dot, Matrix};
use super::params::{Grads, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

/// Constant sparse matrix stored by rows: `rows[i]` lists `(col, weight)`.
#[derive(Clone, Debug)]
pub struct SparseRows<T> {
    pub n_cols: usize,
    pub rows: Vec<Vec<(usize, T)>>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    ScaleByVar(Var, Var),
    Act(Var, Activation),
    PowI(Var, i32),
    Powf(Var, T),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Arc<[usize]>),
    ScatterAddRows(Var, Arc<[usize]>),
    SparseMatMul(Arc<SparseRows<T>>, Var),
    RowDot(Var, Var),
    MulColBroadcast(Var, Var),
    SegmentSoftmax(Var, Arc<[usize]>),
    PairSoftmax(Var, Var, Arc<[usize]>, Arc<[usize]>, T),
    PairAggregate(Var, Var, Arc<[usize]>, Arc<[usize]>),
    Transpose(Var),
    Sum(Var),
    MeanRows(Var),
    Norm2(Var),
    RowNormalize(Var),
    Pick(Var, usize),
    Bce(Var, Arc<[T]>),
    Mask(Var, Arc<Matrix<T>>),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

/// Recording of one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints of every node after [`Tape::backward`].
pub struct Adjoints<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Adjoints<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a named parameter. Repeated lookups return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.push(value, Op::Leaf);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a + b` where `b` is a single row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::shape("add_row", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, &x) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += x;
            }
        }
        Ok(self.push(out, Op::AddRow(a, b)))
    }

    /// `x·W + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).scale(c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddConst(a))
    }

    /// Multiplies every entry of `a` by the 1x1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.shape() != (1, 1) {
            return Err(Error::shape("scale_by", self.value(a).shape(), sv.shape()));
        }
        let c = sv.item();
        let value = self.value(a).scale(c);
        Ok(self.push(value, Op::ScaleByVar(a, s)))
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let value = match act {
            Activation::Identity => return a,
            Activation::Relu => self.value(a).map(|x| if x > T::zero() { x } else { T::zero() }),
            Activation::LeakyRelu(s) => {
                let s = T::lit(s);
                self.value(a).map(|x| if x > T::zero() { x } else { s * x })
            }
            Activation::Sigmoid => self.value(a).map(sigmoid),
            Activation::Tanh => self.value(a).map(|x| x.tanh()),
        };
        self.push(value, Op::Act(a, act))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Tanh)
    }

    pub fn powi(&mut self, a: Var, k: i32) -> Var {
        let value = self.value(a).map(|x| x.powi(k));
        self.push(value, Op::PowI(a, k))
    }

    pub fn powf(&mut self, a: Var, p: T) -> Var {
        let value = self.value(a).map(|x| x.powf(p));
        self.push(value, Op::Powf(a, p))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_cols(&mats)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(start, len)?;
        Ok(self.push(value, Op::SliceCols(a, start)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_rows(&mats)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    /// `out[e] = a[idx[e]]`.
    pub fn gather_rows(&mut self, a: Var, idx: Arc<[usize]>) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.rows()) {
            return Err(Error::shape("gather_rows", av.shape(), (bad, 0)));
        }
        let value = av.select_rows(&idx);
        Ok(self.push(value, Op::GatherRows(a, idx)))
    }

    /// `out[idx[e]] += a[e]` into an `n_out`-row result.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Arc<[usize]>, n_out: usize) -> Result<Var> {
        let av = self.value(a);
        if idx.len() != av.rows() {
            return Err(Error::shape("scatter_add_rows", av.shape(), (idx.len(), 0)));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_out) {
            return Err(Error::shape("scatter_add_rows", (n_out, av.cols()), (bad, 0)));
        }
        let mut out = Matrix::zeros(n_out, av.cols());
        for (e, &i) in idx.iter().enumerate() {
            for (o, &x) in out.row_mut(i).iter_mut().zip(av.row(e)) {
                *o += x;
            }
        }
        Ok(self.push(out, Op::ScatterAddRows(a, idx)))
    }

    /// `S · a` for a constant sparse `S`.
    pub fn sparse_matmul(&mut self, s: Arc<SparseRows<T>>, a: Var) -> Result<Var> {
        let av = self.value(a);
        if s.n_cols != av.rows() {
            return Err(Error::shape("sparse_matmul", (s.rows.len(), s.n_cols), av.shape()));
        }
        let mut out = Matrix::zeros(s.rows.len(), av.cols());
        for (i, row) in s.rows.iter().enumerate() {
            for &(j, w) in row {
                for (o, &x) in out.row_mut(i).iter_mut().zip(av.row(j)) {
                    *o += w * x;
                }
            }
        }
        Ok(self.push(out, Op::SparseMatMul(s, a)))
    }

    /// Row-wise inner products, `n x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.same_shape(bv, "row_dot")?;
        let data = (0..av.rows()).map(|r| dot(av.row(r), bv.row(r))).collect();
        Ok(self.push(Matrix::column_vector(data), Op::RowDot(a, b)))
    }

    /// Scales row `e` of `a` by `w[e]` where `w` is `n x 1`.
    pub fn mul_col_broadcast(&mut self, a: Var, w: Var) -> Result<Var> {
        let (av, wv) = (self.value(a), self.value(w));
        if wv.cols() != 1 || wv.rows() != av.rows() {
            return Err(Error::shape("mul_col_broadcast", av.shape(), wv.shape()));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            let s = wv.get(r, 0);
            for o in out.row_mut(r) {
                *o *= s;
            }
        }
        Ok(self.push(out, Op::MulColBroadcast(a, w)))
    }

    /// Softmax of an `E x 1` score column within groups sharing `segment[e]`.
    pub fn segment_softmax(&mut self, scores: Var, segment: Arc<[usize]>) -> Result<Var> {
        let sv = self.value(scores);
        if sv.cols() != 1 || sv.rows() != segment.len() {
            return Err(Error::shape("segment_softmax", sv.shape(), (segment.len(), 1)));
        }
        let value = Matrix::column_vector(segment_softmax(sv.data(), &segment));
        Ok(self.push(value, Op::SegmentSoftmax(scores, segment)))
    }

    /// `softmax over {e: query[e] = v}` of `scale · q[query[e]]·k[key[e]]`,
    /// an `E x 1` column. Same as gathering, `row_dot`, `scale` and
    /// `segment_softmax`, without the `E x d` intermediates.
    pub fn pair_softmax(
        &mut self,
        q: Var,
        k: Var,
        query: Arc<[usize]>,
        key: Arc<[usize]>,
        scale: T,
    ) -> Result<Var> {
        let (qv, kv) = (self.value(q), self.value(k));
        if qv.cols() != kv.cols() || query.len() != key.len() {
            return Err(Error::shape("pair_softmax", qv.shape(), kv.shape()));
        }
        check_index("pair_softmax", &query, qv.rows(), qv.shape())?;
        check_index("pair_softmax", &key, kv.rows(), kv.shape())?;
        let scores: Vec<T> = query
            .iter()
            .zip(key.iter())
            .map(|(&i, &j)| dot(qv.row(i), kv.row(j)) * scale)
            .collect();
        let value = Matrix::column_vector(segment_softmax(&scores, &query));
        Ok(self.push(value, Op::PairSoftmax(q, k, query, key, scale)))
    }

    /// `out[query[e]] += w[e] · v[key[e]]` into an `n_out`-row result.
    pub fn pair_aggregate(
        &mut self,
        w: Var,
        v: Var,
        query: Arc<[usize]>,
        key: Arc<[usize]>,
        n_out: usize,
    ) -> Result<Var> {
        let (wv, vv) = (self.value(w), self.value(v));
        if wv.cols() != 1 || wv.rows() != query.len() || query.len() != key.len() {
            return Err(Error::shape("pair_aggregate", wv.shape(), (query.len(), 1)));
        }
        check_index("pair_aggregate", &query, n_out, (n_out, vv.cols()))?;
        check_index("pair_aggregate", &key, vv.rows(), vv.shape())?;
        let mut out = Matrix::zeros(n_out, vv.cols());
        for (e, (&i, &j)) in query.iter().zip(key.iter()).enumerate() {
            let a = wv.data()[e];
            for (o, &x) in out.row_mut(i).iter_mut().zip(vv.row(j)) {
                *o += a * x;
            }
        }
        Ok(self.push(out, Op::PairAggregate(w, v, query, key)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Column means, `1 x cols`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_rows();
        self.push(value, Op::MeanRows(a))
    }

    /// Euclidean norm of all entries. The subgradient at zero is zero.
    pub fn norm2(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).frobenius_sq().sqrt());
        self.push(value, Op::Norm2(a))
    }

    /// Scales each row to unit L2 norm; zero rows stay zero.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            if n > T::zero() {
                for x in row {
                    *x /= n;
                }
            }
        }
        self.push(out, Op::RowNormalize(a))
    }

    /// Subtracts the column means from every row.
    pub fn center_cols(&mut self, a: Var) -> Result<Var> {
        let mean = self.mean_rows(a);
        let neg = self.scale(mean, -T::one());
        self.add_row(a, neg)
    }

    /// Largest entry as a 1x1 node; the gradient flows to the first arg-max.
    pub fn max_all(&mut self, a: Var) -> Result<Var> {
        self.pick_extreme(a, |x, best| x > best)
    }

    /// Smallest entry as a 1x1 node; the gradient flows to the first arg-min.
    pub fn min_all(&mut self, a: Var) -> Result<Var> {
        self.pick_extreme(a, |x, best| x < best)
    }

    fn pick_extreme(&mut self, a: Var, better: impl Fn(T, T) -> bool) -> Result<Var> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(Error::Empty("extreme of empty matrix".into()));
        }
        let mut idx = 0;
        for (i, &x) in av.data().iter().enumerate() {
            if better(x, av.data()[idx]) {
                idx = i;
            }
        }
        let value = Matrix::scalar(av.data()[idx]);
        Ok(self.push(value, Op::Pick(a, idx)))
    }

    /// Summed binary cross-entropy of an `n x 1` probability column, with
    /// probabilities clipped to `[1e-12, 1 - 1e-12]`.
    pub fn bce_sum(&mut self, p: Var, labels: Arc<[T]>) -> Result<Var> {
        let pv = self.value(p);
        if pv.cols() != 1 || pv.rows() != labels.len() {
            return Err(Error::shape("bce_sum", pv.shape(), (labels.len(), 1)));
        }
        let total = pv
            .data()
            .iter()
            .zip(labels.iter())
            .map(|(&q, &y)| {
                let q = clip_prob(q);
                -(y * q.ln() + (T::one() - y) * (T::one() - q).ln())
            })
            .sum();
        Ok(self.push(Matrix::scalar(total), Op::Bce(p, labels)))
    }

    /// Elementwise product with a constant mask.
    pub fn mask(&mut self, a: Var, mask: Arc<Matrix<T>>) -> Result<Var> {
        let value = self.value(a).hadamard(&mask)?;
        Ok(self.push(value, Op::Mask(a, mask)))
    }

    /// Adjoints of every node with respect to the 1x1 node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Adjoints<T>> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape("backward", self.shape(loss), (1, 1)));
        }
        let mut grads: Vec<Option<Matrix<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Matrix::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Adjoints { grads })
    }

    /// Gradient for every parameter in `store`, zero for parameters this
    /// tape never touched.
    pub fn param_grads(&self, store: &ParamStore<T>, adj: &Adjoints<T>) -> Grads<T> {
        let mut out = store.zero_grads();
        for (name, &v) in &self.params {
            if let (Some(slot), Some(g)) = (out.get_mut(name), adj.get(v)) {
                *slot = g.clone();
            }
        }
        out
    }

    fn propagate(&self, i: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, g.matmul_t(bv)?)?;
                accumulate(grads, *b, av.t_matmul(g)?)?;
            }
            Op::AddRow(a, b) => {
                accumulate(grads, *a, g.clone())?;
                let mut gb = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                accumulate(grads, *b, gb)?;
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.scale(-T::one()))?;
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.hadamard(self.value(*b))?)?;
                accumulate(grads, *b, g.hadamard(self.value(*a))?)?;
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.scale(*c))?,
            Op::AddConst(a) => accumulate(grads, *a, g.clone())?,
            Op::ScaleByVar(a, s) => {
                let c = self.value(*s).item();
                accumulate(grads, *a, g.scale(c))?;
                let gs = dot(g.data(), self.value(*a).data());
                accumulate(grads, *s, Matrix::scalar(gs))?;
            }
            Op::Act(a, act) => {
                let x = self.value(*a);
                let ga = match act {
                    Activation::Identity => g.clone(),
                    Activation::Relu => g.zip_map(x, "relu", |gi, xi| if xi > T::zero() { gi } else { T::zero() })?,
                    Activation::LeakyRelu(s) => {
                        let s = T::lit(*s);
                        g.zip_map(x, "leaky_relu", |gi, xi| if xi > T::zero() { gi } else { s * gi })?
                    }
                    Activation::Sigmoid => g.zip_map(out, "sigmoid", |gi, y| gi * y * (T::one() - y))?,
                    Activation::Tanh => g.zip_map(out, "tanh", |gi, y| gi * (T::one() - y * y))?,
                };
                accumulate(grads, *a, ga)?;
            }
            Op::PowI(a, k) => {
                let k = *k;
                let kk = T::lit(f64::from(k));
                let ga = g.zip_map(self.value(*a), "powi", |gi, x| gi * kk * x.powi(k - 1))?;
                accumulate(grads, *a, ga)?;
            }
            Op::Powf(a, p) => {
                let p = *p;
                let ga = g.zip_map(self.value(*a), "powf", |gi, x| gi * p * x.powf(p - T::one()))?;
                accumulate(grads, *a, ga)?;
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let inner = dot(y, gr);
                    for ((o, &yi), &gi) in ga.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o = yi * (gi - inner);
                    }
                }
                accumulate(grads, *a, ga)?;
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    accumulate(grads, *p, g.slice_cols(start, w)?)?;
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let ga = grad_slot(grads, *a, self.shape(*a));
                let w = g.cols();
                for row in 0..g.rows() {
                    for (o, &x) in ga.row_mut(row)[*start..*start + w].iter_mut().zip(g.row(row)) {
                        *o += x;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let (r, c) = self.shape(*p);
                    let block = Matrix::from_vec(r, c, g.data()[start * c..(start + r) * c].to_vec())?;
                    accumulate(grads, *p, block)?;
                    start += r;
                }
            }
            Op::GatherRows(a, idx) => {
                let ga = grad_slot(grads, *a, self.shape(*a));
                for (e, &src) in idx.iter().enumerate() {
                    for (o, &x) in ga.row_mut(src).iter_mut().zip(g.row(e)) {
                        *o += x;
                    }
                }
            }
            Op::ScatterAddRows(a, idx) => {
                accumulate(grads, *a, g.select_rows(idx))?;
            }
            Op::SparseMatMul(s, a) => {
                let ga = grad_slot(grads, *a, self.shape(*a));
                for (row_i, row) in s.rows.iter().enumerate() {
                    for &(j, w) in row {
                        for (o, &x) in ga.row_mut(j).iter_mut().zip(g.row(row_i)) {
                            *o += w * x;
                        }
                    }
                }
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = bv.clone();
                let mut gb = av.clone();
                for r in 0..av.rows() {
                    let s = g.get(r, 0);
                    ga.row_mut(r).iter_mut().for_each(|x| *x *= s);
                    gb.row_mut(r).iter_mut().for_each(|x| *x *= s);
                }
                accumulate(grads, *a, ga)?;
                accumulate(grads, *b, gb)?;
            }
            Op::MulColBroadcast(a, w) => {
                let (av, wv) = (self.value(*a), self.value(*w));
                let mut ga = g.clone();
                let mut gw = Matrix::zeros(wv.rows(), 1);
                for r in 0..av.rows() {
                    let s = wv.get(r, 0);
                    ga.row_mut(r).iter_mut().for_each(|x| *x *= s);
                    gw.set(r, 0, dot(g.row(r), av.row(r)));
                }
                accumulate(grads, *a, ga)?;
                accumulate(grads, *w, gw)?;
            }
            Op::SegmentSoftmax(a, seg) => {
                let n_seg = seg.iter().copied().max().map_or(0, |m| m + 1);
                let mut inner = vec![T::zero(); n_seg];
                for (e, &s) in seg.iter().enumerate() {
                    inner[s] += g.data()[e] * out.data()[e];
                }
                let data = seg
                    .iter()
                    .enumerate()
                    .map(|(e, &s)| out.data()[e] * (g.data()[e] - inner[s]))
                    .collect();
                accumulate(grads, *a, Matrix::column_vector(data))?;
            }
            Op::PairSoftmax(q, k, query, key, scale) => {
                let (qv, kv) = (self.value(*q), self.value(*k));
                let n_seg = query.iter().copied().max().map_or(0, |m| m + 1);
                let mut inner = vec![T::zero(); n_seg];
                for (e, &s) in query.iter().enumerate() {
                    inner[s] += g.data()[e] * out.data()[e];
                }
                let mut gq = Matrix::zeros(qv.rows(), qv.cols());
                let mut gk = Matrix::zeros(kv.rows(), kv.cols());
                for (e, (&i, &j)) in query.iter().zip(key.iter()).enumerate() {
                    let gs = out.data()[e] * (g.data()[e] - inner[i]) * *scale;
                    for (o, &x) in gq.row_mut(i).iter_mut().zip(kv.row(j)) {
                        *o += gs * x;
                    }
                    for (o, &x) in gk.row_mut(j).iter_mut().zip(qv.row(i)) {
                        *o += gs * x;
                    }
                }
                accumulate(grads, *q, gq)?;
                accumulate(grads, *k, gk)?;
            }
            Op::PairAggregate(w, v, query, key) => {
                let (wv, vv) = (self.value(*w), self.value(*v));
                let mut gw = Matrix::zeros(wv.rows(), 1);
                let mut gv = Matrix::zeros(vv.rows(), vv.cols());
                for (e, (&i, &j)) in query.iter().zip(key.iter()).enumerate() {
                    gw.data_mut()[e] = dot(g.row(i), vv.row(j));
                    let a = wv.data()[e];
                    for (o, &x) in gv.row_mut(j).iter_mut().zip(g.row(i)) {
                        *o += a * x;
                    }
                }
                accumulate(grads, *w, gw)?;
                accumulate(grads, *v, gv)?;
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose())?,
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                accumulate(grads, *a, Matrix::filled(r, c, g.item()))?;
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape(*a);
                let n = T::from_count(r.max(1));
                let mut ga = Matrix::zeros(r, c);
                for row in 0..r {
                    for (o, &x) in ga.row_mut(row).iter_mut().zip(g.data()) {
                        *o = x / n;
                    }
                }
                accumulate(grads, *a, ga)?;
            }
            Op::Norm2(a) => {
                let n = out.item();
                let av = self.value(*a);
                let ga = if n > T::zero() {
                    av.scale(g.item() / n)
                } else {
                    Matrix::zeros(av.rows(), av.cols())
                };
                accumulate(grads, *a, ga)?;
            }
            Op::RowNormalize(a) => {
                let av = self.value(*a);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let n = av.row(r).iter().map(|&x| x * x).sum::<T>().sqrt();
                    if n == T::zero() {
                        continue;
                    }
                    let y = out.row(r);
                    let gr = g.row(r);
                    let inner = dot(y, gr);
                    for ((o, &yi), &gi) in ga.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o = (gi - yi * inner) / n;
                    }
                }
                accumulate(grads, *a, ga)?;
            }
            Op::Pick(a, idx) => {
                let (r, c) = self.shape(*a);
                let mut ga = Matrix::zeros(r, c);
                ga.data_mut()[*idx] = g.item();
                accumulate(grads, *a, ga)?;
            }
            Op::Bce(p, labels) => {
                let pv = self.value(*p);
                let lo = T::lit(PROB_CLIP);
                let hi = T::one() - lo;
                let gv = g.item();
                let data = pv
                    .data()
                    .iter()
                    .zip(labels.iter())
                    .map(|(&q, &y)| {
                        if q < lo || q > hi {
                            T::zero()
                        } else {
                            -gv * (y / q - (T::one() - y) / (T::one() - q))
                        }
                    })
                    .collect();
                accumulate(grads, *p, Matrix::column_vector(data))?;
            }
            Op::Mask(a, m) => accumulate(grads, *a, g.hadamard(m)?)?,
        }
        Ok(())
    }
}

fn check_index(op: &'static str, idx: &[usize], bound: usize, shape: (usize, usize)) -> Result<()> {
    match idx.iter().find(|&&i| i >= bound) {
        Some(&bad) => Err(Error::shape(op, shape, (bad, 0))),
        None => Ok(()),
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// The gradient buffer of `v`, zero-initialised on first use.
fn grad_slot<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, shape: (usize, usize)) -> &mut Matrix<T> {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

pub(crate) const PROB_CLIP: f64 = 1e-12;

#[inline]
pub(crate) fn clip_prob<T: Scalar>(q: T) -> T {
    let lo = T::lit(PROB_CLIP);
    q.max(lo).min(T::one() - lo)
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

pub(crate) fn segment_softmax<T: Scalar>(scores: &[T], segment: &[usize]) -> Vec<T> {
    let n_seg = segment.iter().copied().max().map_or(0, |m| m + 1);
    let mut max = vec![T::neg_infinity(); n_seg];
    for (&s, &x) in segment.iter().zip(scores) {
        max[s] = max[s].max(x);
    }
    let exps: Vec<T> = segment.iter().zip(scores).map(|(&s, &x)| (x - max[s]).exp()).collect();
    let mut total = vec![T::zero(); n_seg];
    for (&s, &e) in segment.iter().zip(&exps) {
        total[s] += e;
    }
    segment.iter().zip(exps).map(|(&s, e)| e / total[s]).collect()
}
