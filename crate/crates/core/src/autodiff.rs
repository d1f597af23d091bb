//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records operations eagerly: each call computes its value and
//! appends a node. [`Graph::backward`] then walks the tape in reverse.
//! Parameters are borrowed, not copied; binding the same matrix twice yields
//! the same [`Var`], so gradients from repeated use accumulate.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::scalar::Scalar;
use crate::tensor::{dot, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, S),
    Gelu(Var),
    LayerNorm(Var, Vec<S>),
    Softmax(Var),
    LogSoftmax(Var),
    CausalMask(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    WeightedSum(Var, Vec<S>),
}

struct Node<'p, S: Scalar> {
    value: Cow<'p, Matrix<S>>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Graph<'p, S: Scalar> {
    nodes: Vec<Node<'p, S>>,
    bound: HashMap<usize, Var>,
}

impl<S: Scalar> Default for Graph<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_K: f64 = 0.044_715;

fn gelu_c<S: Scalar>() -> S {
    S::of((2.0 / std::f64::consts::PI).sqrt())
}

impl<'p, S: Scalar> Graph<'p, S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Matrix<S>>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Matrix<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// Binds a borrowed matrix. Trainable bindings receive gradients.
    pub fn bind(&mut self, m: &'p Matrix<S>, trainable: bool) -> Var {
        let key = m as *const Matrix<S> as usize;
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.push(Cow::Borrowed(m), Op::Leaf, trainable);
        self.bound.insert(key, v);
        v
    }

    pub fn param(&mut self, m: &'p Matrix<S>) -> Var {
        self.bind(m, true)
    }

    pub fn constant(&mut self, m: Matrix<S>) -> Var {
        self.push(Cow::Owned(m), Op::Leaf, false)
    }

    /// An owned leaf that receives a gradient.
    pub fn input(&mut self, m: Matrix<S>) -> Var {
        self.push(Cow::Owned(m), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Matrix<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> S {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar");
        m.get(0, 0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.derived(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_bt(self.value(b));
        self.derived(out, Op::MatMulBt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.derived(out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.derived(out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = broadcast_row(self.value(a), self.value(row), |x, y| x + y);
        self.derived(out, Op::AddRow(a, row), &[a, row])
    }

    /// Multiplies every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let out = broadcast_row(self.value(a), self.value(row), |x, y| x * y);
        self.derived(out, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.derived(out, Op::Scale(a, c), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = gelu_c::<S>();
        let k = S::of(GELU_K);
        let half = S::of(0.5);
        let out = self
            .value(a)
            .map(|x| half * x * (S::one() + (c * (x + k * x * x * x)).tanh()));
        self.derived(out, Op::Gelu(a), &[a])
    }

    /// Row-wise standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: S) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        let n = S::of_usize(cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let is = S::one() / (var + eps).sqrt();
            for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        self.derived(out, Op::LayerNorm(a, inv_std), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.derived(out, Op::Softmax(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let out = log_softmax_rows(self.value(a));
        self.derived(out, Op::LogSoftmax(a), &[a])
    }

    /// Sets entries above the diagonal to negative infinity.
    pub fn causal_mask(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            for c in (r + 1)..out.cols() {
                out.set(r, c, S::neg_infinity());
            }
        }
        self.derived(out, Op::CausalMask(a), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols();
        let mut out = Matrix::zeros(0, cols);
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows width mismatch");
            for r in 0..m.rows() {
                out.push_row(m.row(r));
            }
        }
        self.derived(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        self.derived(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        self.derived(out, Op::SliceRows(a, start), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.cols(), "column slice out of range");
        let mut out = Matrix::zeros(m.rows(), len);
        for r in 0..m.rows() {
            out.row_mut(r).copy_from_slice(&m.row(r)[start..start + len]);
        }
        self.derived(out, Op::SliceCols(a, start), &[a])
    }

    /// Row lookup, as used by embedding tables.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(0, t.cols());
        for &id in ids {
            out.push_row(t.row(id));
        }
        if ids.is_empty() {
            out = Matrix::zeros(0, t.cols());
        }
        self.derived(out, Op::GatherRows(table, ids.to_vec()), &[table])
    }

    /// Picks column `cols[r]` from each row `r`, yielding a column vector.
    pub fn pick_cols(&mut self, a: Var, cols: &[usize]) -> Var {
        let m = self.value(a);
        assert_eq!(m.rows(), cols.len(), "pick_cols length mismatch");
        let data = cols.iter().enumerate().map(|(r, &c)| m.get(r, c)).collect();
        let out = Matrix::from_vec(cols.len(), 1, data);
        self.derived(out, Op::PickCols(a, cols.to_vec()), &[a])
    }

    /// `Σ weights[i] · a[i]` over all entries in row-major order.
    pub fn weighted_sum(&mut self, a: Var, weights: &[S]) -> Var {
        let m = self.value(a);
        assert_eq!(m.len(), weights.len(), "weighted_sum length mismatch");
        let s = dot(m.as_slice(), weights);
        self.derived(Matrix::from_vec(1, 1, vec![s]), Op::WeightedSum(a, weights.to_vec()), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        self.weighted_sum(a, &vec![S::one(); n])
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients<S> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, S::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let bound = self.bound.clone();
        Gradients { grads, bound }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Matrix<S>, grads: &mut [Option<Matrix<S>>]) {
        let node = &self.nodes[idx];
        let y = &*node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.matmul_bt(self.value(*b)));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, self.value(*a).matmul_at(g));
                }
            }
            Op::MatMulBt(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.matmul(self.value(*b)));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.matmul_at(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*row) {
                    let mut s = g.mean_rows();
                    let n = S::of_usize(g.rows());
                    s = s.map(|v| v * n);
                    accumulate(grads, *row, s);
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row);
                if self.wants(*a) {
                    accumulate(grads, *a, broadcast_row(g, rv, |x, y| x * y));
                }
                if self.wants(*row) {
                    let av = self.value(*a);
                    let mut s = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for ((o, &gv), &xv) in s.row_mut(0).iter_mut().zip(g.row(r)).zip(av.row(r)) {
                            *o = *o + gv * xv;
                        }
                    }
                    accumulate(grads, *row, s);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::Gelu(a) => {
                let c = gelu_c::<S>();
                let k = S::of(GELU_K);
                let half = S::of(0.5);
                let three = S::of(3.0);
                let d = self.value(*a).zip_map(g, |x, gv| {
                    let t = (c * (x + k * x * x * x)).tanh();
                    let dt = (S::one() - t * t) * c * (S::one() + three * k * x * x);
                    gv * (half * (S::one() + t) + half * x * dt)
                });
                accumulate(grads, *a, d);
            }
            Op::LayerNorm(a, inv_std) => {
                let (rows, cols) = g.shape();
                let n = S::of_usize(cols);
                let mut d = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let mean_g = gr.iter().copied().sum::<S>() / n;
                    let mean_gy = dot(gr, yr) / n;
                    for ((o, &gv), &yv) in d.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = inv_std[r] * (gv - mean_g - yv * mean_gy);
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let mut d = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let s = dot(g.row(r), y.row(r));
                    for ((o, &gv), &yv) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yv * (gv - s);
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::LogSoftmax(a) => {
                let mut d = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let s: S = g.row(r).iter().copied().sum();
                    for ((o, &gv), &yv) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = gv - yv.exp() * s;
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::CausalMask(a) => {
                let mut d = g.clone();
                for r in 0..d.rows() {
                    for c in (r + 1)..d.cols() {
                        d.set(r, c, S::zero());
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).rows();
                    if self.wants(p) {
                        accumulate(grads, p, g.slice_rows(offset, n));
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).cols();
                    if self.wants(p) {
                        let mut d = Matrix::zeros(g.rows(), n);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + n]);
                        }
                        accumulate(grads, p, d);
                    }
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => {
                let (rows, cols) = self.shape(*a);
                let mut d = Matrix::zeros(rows, cols);
                for r in 0..g.rows() {
                    d.row_mut(start + r).copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, d);
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.shape(*a);
                let mut d = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    d.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, d);
            }
            Op::GatherRows(table, ids) => {
                let (rows, cols) = self.shape(*table);
                let mut d = Matrix::zeros(rows, cols);
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &gv) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o = *o + gv;
                    }
                }
                accumulate(grads, *table, d);
            }
            Op::PickCols(a, cols) => {
                let (rows, width) = self.shape(*a);
                let mut d = Matrix::zeros(rows, width);
                for (r, &c) in cols.iter().enumerate() {
                    d.set(r, c, g.get(r, 0));
                }
                accumulate(grads, *a, d);
            }
            Op::WeightedSum(a, weights) => {
                let (rows, cols) = self.shape(*a);
                let gv = g.get(0, 0);
                let d = Matrix::from_vec(rows, cols, weights.iter().map(|&w| w * gv).collect());
                accumulate(grads, *a, d);
            }
        }
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Matrix<S>>], v: Var, d: Matrix<S>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

fn broadcast_row<S: Scalar>(a: &Matrix<S>, row: &Matrix<S>, f: impl Fn(S, S) -> S) -> Matrix<S> {
    assert_eq!(row.rows(), 1, "broadcast operand must be a single row");
    assert_eq!(a.cols(), row.cols(), "broadcast width mismatch");
    let mut out = a.clone();
    let rv = row.row(0);
    for r in 0..out.rows() {
        for (o, &b) in out.row_mut(r).iter_mut().zip(rv) {
            *o = f(*o, b);
        }
    }
    out
}

pub fn softmax_rows<S: Scalar>(x: &Matrix<S>) -> Matrix<S> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut total = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    out
}

pub fn log_softmax_rows<S: Scalar>(x: &Matrix<S>) -> Matrix<S> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
        for v in row.iter_mut() {
            *v = *v - lse;
        }
    }
    out
}

/// Result of [`Graph::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Matrix<S>>>,
    bound: HashMap<usize, Var>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Matrix<S>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for a matrix previously passed to [`Graph::bind`].
    pub fn of(&self, m: &Matrix<S>) -> Option<&Matrix<S>> {
        let key = m as *const Matrix<S> as usize;
        self.bound.get(&key).and_then(|v| self.get(*v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::trunc_normal(rows, cols, 0.5, &mut rng)
    }

    /// Central differences of `f` at `x`, entry by entry.
    fn numeric_grad(x: &Matrix<f64>, f: &dyn Fn(&Matrix<f64>) -> f64) -> Matrix<f64> {
        let h = 1e-5;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut p = x.clone();
            p.as_mut_slice()[i] += h;
            let mut m = x.clone();
            m.as_mut_slice()[i] -= h;
            out.as_mut_slice()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &Matrix<f64>, b: &Matrix<f64>) {
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() <= 1e-6 * (1.0 + x.abs().max(y.abs())), "{x} vs {y}");
        }
    }

    type Build<'a> = dyn Fn(&mut Graph<'_, f64>, Var) -> Var + 'a;

    fn check_unary(x: Matrix<f64>, build: &Build<'_>) {
        let eval = |m: &Matrix<f64>| {
            let mut g = Graph::new();
            let v = g.input(m.clone());
            let out = build(&mut g, v);
            let w: Vec<f64> = (0..g.value(out).len()).map(|i| 0.3 + (i as f64) * 0.17).collect();
            let s = g.weighted_sum(out, &w);
            g.scalar(s)
        };
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let out = build(&mut g, v);
        let w: Vec<f64> = (0..g.value(out).len()).map(|i| 0.3 + (i as f64) * 0.17).collect();
        let s = g.weighted_sum(out, &w);
        let analytic = g.backward(s).get(v).unwrap().clone();
        assert_close(&analytic, &numeric_grad(&x, &eval));
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        check_unary(random(3, 4, 1), &|g, v| g.gelu(v));
        check_unary(random(3, 5, 2), &|g, v| g.layer_norm(v, 1e-5));
        check_unary(random(3, 4, 3), &|g, v| g.softmax_rows(v));
        check_unary(random(2, 6, 4), &|g, v| g.log_softmax_rows(v));
        check_unary(random(4, 4, 5), &|g, v| {
            let m = g.causal_mask(v);
            g.softmax_rows(m)
        });
        check_unary(random(4, 3, 6), &|g, v| {
            let a = g.slice_rows(v, 1, 2);
            let b = g.slice_cols(v, 0, 2);
            let b = g.slice_rows(b, 0, 2);
            g.concat_cols(&[a, b])
        });
        check_unary(random(5, 3, 7), &|g, v| g.gather_rows(v, &[4, 0, 4, 2]));
        check_unary(random(3, 4, 8), &|g, v| g.pick_cols(v, &[3, 0, 1]));
        check_unary(random(3, 4, 9), &|g, v| {
            let t = g.matmul_bt(v, v);
            g.scale(t, -0.7)
        });
    }

    #[test]
    fn binary_ops_match_finite_differences() {
        let b = random(4, 3, 11);
        let row = random(1, 3, 12);
        check_unary(random(2, 4, 10), &|g, v| {
            let bv = g.constant(b.clone());
            g.matmul(v, bv)
        });
        check_unary(random(4, 3, 13), &|g, v| {
            let w = g.input(b.clone());
            let p = g.mul(v, w);
            let r = g.input(row.clone());
            let q = g.mul_row(p, r);
            g.add_row(q, r)
        });
        // gradient with respect to the broadcast row itself
        check_unary(random(1, 3, 14), &|g, r| {
            let x = g.constant(b.clone());
            let q = g.mul_row(x, r);
            let q2 = g.add_row(q, r);
            g.concat_rows(&[q2, r])
        });
    }

    #[test]
    fn binding_twice_shares_one_leaf() {
        let w = random(2, 2, 20);
        let mut g = Graph::new();
        let a = g.param(&w);
        let b = g.param(&w);
        assert_eq!(a, b);
        let s = g.add(a, b);
        let s = g.sum(s);
        let grads = g.backward(s);
        assert!(grads.of(&w).unwrap().as_slice().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn frozen_bindings_get_no_gradient() {
        let w = random(2, 2, 21);
        let mut g = Graph::new();
        let a = g.bind(&w, false);
        let s = g.sum(a);
        let grads = g.backward(s);
        assert!(grads.of(&w).is_none());
    }
}
