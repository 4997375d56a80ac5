//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Ops are appended to a [`Graph`] in evaluation order, so the node list is
//! already a topological order and backward is a single reverse sweep.
//! Parameters enter through [`Graph::param`], which binds one leaf per
//! [`ParamId`] no matter how often a layer is unrolled; after
//! [`Graph::backward`] their gradients are looked up by id.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use super::tensor::gemm;
use super::{NumericsError, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Rc<Tensor>),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Elu(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherCols(Var, Rc<Vec<usize>>),
    Minimum(Var, Var),
    Clamp(Var, f64, f64),
    LogSoftmaxRows(Var),
    SoftmaxRows(Var),
    PairScores(Var, Var, usize),
    GroupAttend(Var, Var, usize),
    GroupWeightedSum(Var, Rc<Vec<f64>>, usize),
    Gru(Box<GruCache>),
}

#[derive(Debug)]
struct GruCache {
    x: Var,
    h: Var,
    w_in: Var,
    w_hid: Var,
    b_in: Var,
    b_hid: Var,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    gh_n: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: Vec<(ParamId, Tensor)>,
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(p, t)| (*p, t))
    }

    /// Gradient of a `requires_grad` leaf created with [`Graph::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty() && self.leaves.is_empty()
    }

    /// Moves out the parameter gradients that belong to `store`.
    pub fn take_store(&mut self, store: &ParamStore) -> Gradients {
        let (mine, rest) = std::mem::take(&mut self.params)
            .into_iter()
            .partition(|(p, _)| store.owns(*p));
        self.params = rest;
        Gradients {
            params: mine,
            leaves: HashMap::new(),
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|(_, t)| t.squared_norm())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales parameter gradients so their joint L2 norm is at most
    /// `max_norm`. Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let k = max_norm / norm;
            for (_, t) in &mut self.params {
                t.scale_in_place(k);
            }
        }
        norm
    }
}

/// Computation graph. Build with [`Graph::new`] to record gradients or
/// [`Graph::no_grad`] for pure inference; both produce identical values.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(ParamId, Var)>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            bindings: Vec::new(),
            record: true,
        }
    }

    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            bindings: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn take_value(&self, v: Var) -> Tensor {
        self.nodes[v.0].value.clone()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Binds a parameter; repeated calls with the same id return the same leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some((_, v)) = self.bindings.iter().find(|(p, _)| *p == id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.bindings.push((id, v));
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.bindings.iter().map(|(p, _)| *p)
    }

    // ---- elementwise -------------------------------------------------

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[a.0].value.map(f);
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            move |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { x.exp_m1() }, Op::Elu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, move |x| x * k, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, move |x| x + k, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, move |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    fn check_binary(&self, a: Var, b: Var, what: &'static str) -> Result<bool, NumericsError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.same_shape(tb) {
            Ok(false)
        } else if tb.rows() == 1 && tb.cols() == ta.cols() {
            Ok(true)
        } else {
            Err(NumericsError::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                ta.rows(),
                ta.cols(),
                tb.rows(),
                tb.cols()
            )))
        }
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        what: &'static str,
    ) -> Result<Var, NumericsError> {
        let bcast = self.check_binary(a, b, what)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let c = ta.cols();
        let data: Vec<f64> = if bcast {
            ta.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, tb.data()[i % c]))
                .collect()
        } else {
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        };
        let value = Tensor::matrix(ta.rows(), c, data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, op, ng))
    }

    /// `a + b`; `b` may be a `1 x cols` row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.broadcast_binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.broadcast_binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !ta.same_shape(tb) {
            return Err(NumericsError::Shape("mul: shapes differ".into()));
        }
        self.broadcast_binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !ta.same_shape(tb) {
            return Err(NumericsError::Shape("minimum: shapes differ".into()));
        }
        self.broadcast_binary(a, b, f64::min, Op::Minimum(a, b), "minimum")
    }

    /// Elementwise product with a constant of the same shape (masks, dropout).
    pub fn mul_const(&mut self, a: Var, k: Tensor) -> Result<Var, NumericsError> {
        let ta = &self.nodes[a.0].value;
        if !ta.same_shape(&k) {
            return Err(NumericsError::Shape("mul_const: shapes differ".into()));
        }
        let data = ta.data().iter().zip(k.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::matrix(ta.rows(), ta.cols(), data);
        let ng = self.ng(a);
        Ok(self.push(value, Op::MulConst(a, Rc::new(k)), ng))
    }

    // ---- linear algebra & reductions -----------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != k {
            return Err(NumericsError::Shape(format!(
                "matmul: {m}x{k} by {}x{n}",
                tb.rows()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.sum() / t.len() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Row sums as an `rows x 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let data = (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect();
        let ng = self.ng(a);
        self.push(Tensor::column(data), Op::SumCols(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let rows = self.nodes[parts[0].0].value.rows();
        if parts.iter().any(|p| self.nodes[p.0].value.rows() != rows) {
            return Err(NumericsError::Shape("concat_cols: row counts differ".into()));
        }
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row_slice(r));
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(
            Tensor::matrix(rows, total, data),
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let t = &self.nodes[a.0].value;
        if start > end || end > t.cols() {
            return Err(NumericsError::Shape("slice_cols out of range".into()));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(t.rows() * w);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row_slice(r)[start..end]);
        }
        let value = Tensor::matrix(t.rows(), w, data);
        let ng = self.ng(a);
        Ok(self.push(value, Op::SliceCols(a, start), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let t = &self.nodes[a.0].value;
        if start > end || end > t.rows() {
            return Err(NumericsError::Shape("slice_rows out of range".into()));
        }
        let c = t.cols();
        let value = Tensor::matrix(end - start, c, t.data()[start * c..end * c].to_vec());
        let ng = self.ng(a);
        Ok(self.push(value, Op::SliceRows(a, start), ng))
    }

    /// Picks `a[r, idx[r]]` for every row, giving a `rows x 1` column.
    pub fn gather_cols(&mut self, a: Var, idx: Vec<usize>) -> Result<Var, NumericsError> {
        let t = &self.nodes[a.0].value;
        if idx.len() != t.rows() || idx.iter().any(|&i| i >= t.cols()) {
            return Err(NumericsError::Shape("gather_cols index".into()));
        }
        let data = idx.iter().enumerate().map(|(r, &c)| t.get(r, c)).collect();
        let ng = self.ng(a);
        Ok(self.push(Tensor::column(data), Op::GatherCols(a, Rc::new(idx)), ng))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let c = t.cols();
        let mut data = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            let row = t.row_slice(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|x| x - lse));
        }
        let value = Tensor::matrix(t.rows(), c, data);
        let ng = self.ng(a);
        self.push(value, Op::LogSoftmaxRows(a), ng)
    }

    /// Row softmax. With a mask, only `true` entries take part; masked
    /// entries are exactly zero and a fully masked row is all zeros.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var, NumericsError> {
        let t = &self.nodes[a.0].value;
        if let Some(m) = &mask {
            if m.len() != t.len() {
                return Err(NumericsError::Shape("softmax mask length".into()));
            }
        }
        let c = t.cols();
        let mut data = vec![0.0; t.len()];
        for r in 0..t.rows() {
            let row = t.row_slice(r);
            let on = |j: usize| mask.as_ref().is_none_or(|m| m[r * c + j]);
            let mut mx = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if on(j) {
                    mx = mx.max(x);
                }
            }
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for (j, &x) in row.iter().enumerate() {
                if on(j) {
                    let e = (x - mx).exp();
                    data[r * c + j] = e;
                    total += e;
                }
            }
            for v in &mut data[r * c..(r + 1) * c] {
                *v /= total;
            }
        }
        let value = Tensor::matrix(t.rows(), c, data);
        let ng = self.ng(a);
        Ok(self.push(value, Op::SoftmaxRows(a), ng))
    }

    // ---- batched graph attention helpers ---------------------------------

    /// For `groups` stacked graphs of `n` nodes, `f1`/`f2` are `(groups*n) x 1`.
    /// Returns `(groups*n) x n` with entry `[(g,i), j] = f1[g*n+i] + f2[g*n+j]`.
    pub fn pair_scores(&mut self, f1: Var, f2: Var, n: usize) -> Result<Var, NumericsError> {
        let (t1, t2) = (&self.nodes[f1.0].value, &self.nodes[f2.0].value);
        let total = t1.len();
        if t1.cols() != 1 || t2.cols() != 1 || t2.len() != total || n == 0 || total % n != 0 {
            return Err(NumericsError::Shape("pair_scores operands".into()));
        }
        let mut data = vec![0.0; total * n];
        for row in 0..total {
            let base = (row / n) * n;
            for j in 0..n {
                data[row * n + j] = t1.data()[row] + t2.data()[base + j];
            }
        }
        let ng = self.ng(f1) || self.ng(f2);
        Ok(self.push(
            Tensor::matrix(total, n, data),
            Op::PairScores(f1, f2, n),
            ng,
        ))
    }

    /// `out[(g,i)] = sum_j alpha[(g,i), j] * v[(g,j)]` for stacked graphs.
    pub fn group_attend(&mut self, alpha: Var, v: Var, n: usize) -> Result<Var, NumericsError> {
        let (ta, tv) = (&self.nodes[alpha.0].value, &self.nodes[v.0].value);
        let total = ta.rows();
        if ta.cols() != n || tv.rows() != total || total % n != 0 {
            return Err(NumericsError::Shape("group_attend operands".into()));
        }
        let h = tv.cols();
        let mut out = vec![0.0; total * h];
        for g in 0..total / n {
            let a_blk = &ta.data()[g * n * n..(g + 1) * n * n];
            let v_blk = &tv.data()[g * n * h..(g + 1) * n * h];
            gemm(n, n, h, a_blk, false, v_blk, false, &mut out[g * n * h..(g + 1) * n * h], false);
        }
        let ng = self.ng(alpha) || self.ng(v);
        Ok(self.push(
            Tensor::matrix(total, h, out),
            Op::GroupAttend(alpha, v, n),
            ng,
        ))
    }

    /// Collapses each group of `n` rows into one row: `sum_j w[g*n+j] * x[g*n+j]`.
    pub fn group_weighted_sum(
        &mut self,
        x: Var,
        weights: Vec<f64>,
        n: usize,
    ) -> Result<Var, NumericsError> {
        let t = &self.nodes[x.0].value;
        let total = t.rows();
        if weights.len() != total || n == 0 || total % n != 0 {
            return Err(NumericsError::Shape("group_weighted_sum operands".into()));
        }
        let h = t.cols();
        let groups = total / n;
        let mut out = vec![0.0; groups * h];
        for row in 0..total {
            let w = weights[row];
            if w == 0.0 {
                continue;
            }
            let dst = &mut out[(row / n) * h..(row / n + 1) * h];
            for (d, s) in dst.iter_mut().zip(t.row_slice(row)) {
                *d += w * s;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::matrix(groups, h, out),
            Op::GroupWeightedSum(x, Rc::new(weights), n),
            ng,
        ))
    }

    // ---- fused GRU cell ---------------------------------------------------

    /// One GRU step for a batch: `x` is `B x in`, `h` is `B x H`; weights are
    /// stacked by gate in (reset, update, candidate) order:
    /// `w_in: in x 3H`, `w_hid: H x 3H`, `b_in, b_hid: 1 x 3H`.
    #[allow(clippy::too_many_arguments)]
    pub fn gru_cell(
        &mut self,
        x: Var,
        h: Var,
        w_in: Var,
        w_hid: Var,
        b_in: Var,
        b_hid: Var,
    ) -> Result<Var, NumericsError> {
        let tx = &self.nodes[x.0].value;
        let th = &self.nodes[h.0].value;
        let twi = &self.nodes[w_in.0].value;
        let twh = &self.nodes[w_hid.0].value;
        let tbi = &self.nodes[b_in.0].value;
        let tbh = &self.nodes[b_hid.0].value;
        let (b, inp, hid) = (tx.rows(), tx.cols(), th.cols());
        let g3 = 3 * hid;
        if th.rows() != b
            || twi.rows() != inp
            || twi.cols() != g3
            || twh.rows() != hid
            || twh.cols() != g3
            || tbi.len() != g3
            || tbh.len() != g3
        {
            return Err(NumericsError::Shape(format!(
                "gru_cell: x {b}x{inp}, h {}x{hid}, w_in {}x{}, w_hid {}x{}",
                th.rows(),
                twi.rows(),
                twi.cols(),
                twh.rows(),
                twh.cols()
            )));
        }
        let mut gi = vec![0.0; b * g3];
        let mut gh = vec![0.0; b * g3];
        gemm(b, inp, g3, tx.data(), false, twi.data(), false, &mut gi, false);
        gemm(b, hid, g3, th.data(), false, twh.data(), false, &mut gh, false);
        let mut r = vec![0.0; b * hid];
        let mut z = vec![0.0; b * hid];
        let mut n = vec![0.0; b * hid];
        let mut gh_n = vec![0.0; b * hid];
        let mut out = vec![0.0; b * hid];
        let (bi, bh) = (tbi.data(), tbh.data());
        for row in 0..b {
            let gi_row = &gi[row * g3..(row + 1) * g3];
            let gh_row = &gh[row * g3..(row + 1) * g3];
            for k in 0..hid {
                let o = row * hid + k;
                let rr = sigmoid(gi_row[k] + bi[k] + gh_row[k] + bh[k]);
                let zz = sigmoid(gi_row[hid + k] + bi[hid + k] + gh_row[hid + k] + bh[hid + k]);
                let hn = gh_row[2 * hid + k] + bh[2 * hid + k];
                let nn = (gi_row[2 * hid + k] + bi[2 * hid + k] + rr * hn).tanh();
                r[o] = rr;
                z[o] = zz;
                n[o] = nn;
                gh_n[o] = hn;
                out[o] = (1.0 - zz) * nn + zz * th.data()[o];
            }
        }
        let ng = [x, h, w_in, w_hid, b_in, b_hid].iter().any(|v| self.ng(*v));
        let cache = GruCache {
            x,
            h,
            w_in,
            w_hid,
            b_in,
            b_hid,
            r,
            z,
            n,
            gh_n,
        };
        Ok(self.push(Tensor::matrix(b, hid, out), Op::Gru(Box::new(cache)), ng))
    }

    // ---- dropout ----------------------------------------------------------

    /// Inverted dropout. Identity when `training` is false or `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, NumericsError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NumericsError::DropoutRate(rate));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let t = &self.nodes[x.0].value;
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mask = Tensor::matrix(t.rows(), t.cols(), mask);
        self.mul_const(x, mask)
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients, NumericsError> {
        let rt = &self.nodes[root.0].value;
        if rt.len() != 1 {
            return Err(NumericsError::NonScalarRoot(rt.rows(), rt.cols()));
        }
        if !self.record {
            return Err(NumericsError::NotRecording);
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        let mut out = Gradients::default();
        if !self.nodes[root.0].needs_grad {
            return Ok(out);
        }
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !g.is_finite() {
                return Err(NumericsError::NanInBackward(i));
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for (id, v) in &self.bindings {
            if let Some(g) = grads[v.0].take() {
                out.params.push((*id, g));
            }
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                out.leaves.insert(i, g);
            }
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let gd = g.data();
        let like = |t: &Tensor, data: Vec<f64>| Tensor::matrix(t.rows(), t.cols(), data);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.ng(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, tb.data(), true, &mut da, false);
                    acc(*a, Tensor::matrix(m, k, da));
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, gd, false, &mut db, false);
                    acc(*b, Tensor::matrix(k, n, db));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, g.clone());
                if self.ng(*b) {
                    let tb = val(*b);
                    if tb.same_shape(g) {
                        acc(*b, g.map(|x| sign * x));
                    } else {
                        let c = g.cols();
                        let mut col = vec![0.0; c];
                        for r in 0..g.rows() {
                            for (s, x) in col.iter_mut().zip(g.row_slice(r)) {
                                *s += x;
                            }
                        }
                        acc(*b, like(tb, col.into_iter().map(|x| sign * x).collect()));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if self.ng(*a) {
                    acc(*a, like(ta, gd.iter().zip(tb.data()).map(|(x, y)| x * y).collect()));
                }
                if self.ng(*b) {
                    acc(*b, like(tb, gd.iter().zip(ta.data()).map(|(x, y)| x * y).collect()));
                }
            }
            Op::Minimum(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let pick_a: Vec<bool> = ta.data().iter().zip(tb.data()).map(|(x, y)| x <= y).collect();
                if self.ng(*a) {
                    acc(*a, like(ta, gd.iter().zip(&pick_a).map(|(g, &p)| if p { *g } else { 0.0 }).collect()));
                }
                if self.ng(*b) {
                    acc(*b, like(tb, gd.iter().zip(&pick_a).map(|(g, &p)| if p { 0.0 } else { *g }).collect()));
                }
            }
            Op::MulConst(a, k) => {
                acc(*a, like(g, gd.iter().zip(k.data()).map(|(x, y)| x * y).collect()));
            }
            Op::Scale(a, k) => acc(*a, g.map(|x| x * k)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, like(g, gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()));
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(*a, like(g, gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect()));
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                acc(*a, like(g, gd.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect()));
            }
            Op::LeakyRelu(a, s) => {
                let x = val(*a).data();
                acc(*a, like(g, gd.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { s * g }).collect()));
            }
            Op::Elu(a) => {
                let x = val(*a).data();
                acc(*a, like(g, gd.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { g * x.exp() }).collect()));
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, like(g, gd.iter().zip(y).map(|(g, y)| g * y).collect()));
            }
            Op::Ln(a) => {
                let x = val(*a).data();
                acc(*a, like(g, gd.iter().zip(x).map(|(g, x)| g / x).collect()));
            }
            Op::Abs(a) => {
                let x = val(*a).data();
                acc(*a, like(g, gd.iter().zip(x).map(|(g, x)| g * x.signum() * (*x != 0.0) as u8 as f64).collect()));
            }
            Op::Square(a) => {
                let x = val(*a).data();
                acc(*a, like(g, gd.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect()));
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a).data();
                acc(*a, like(g, gd.iter().zip(x).map(|(g, x)| if x < lo || x > hi { 0.0 } else { *g }).collect()));
            }
            Op::Sum(a) => {
                let ta = val(*a);
                acc(*a, Tensor::filled(ta.rows(), ta.cols(), gd[0]));
            }
            Op::Mean(a) => {
                let ta = val(*a);
                acc(*a, Tensor::filled(ta.rows(), ta.cols(), gd[0] / ta.len() as f64));
            }
            Op::SumCols(a) => {
                let ta = val(*a);
                let c = ta.cols();
                let data = (0..ta.len()).map(|i| gd[i / c]).collect();
                acc(*a, like(ta, data));
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if self.ng(*p) {
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            data.extend_from_slice(&g.row_slice(r)[offset..offset + w]);
                        }
                        acc(*p, Tensor::matrix(rows, w, data));
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let ta = val(*a);
                let (c, w) = (ta.cols(), g.cols());
                let mut data = vec![0.0; ta.len()];
                for r in 0..ta.rows() {
                    data[r * c + start..r * c + start + w].copy_from_slice(g.row_slice(r));
                }
                acc(*a, like(ta, data));
            }
            Op::SliceRows(a, start) => {
                let ta = val(*a);
                let c = ta.cols();
                let mut data = vec![0.0; ta.len()];
                data[start * c..start * c + gd.len()].copy_from_slice(gd);
                acc(*a, like(ta, data));
            }
            Op::GatherCols(a, idx) => {
                let ta = val(*a);
                let c = ta.cols();
                let mut data = vec![0.0; ta.len()];
                for (r, &j) in idx.iter().enumerate() {
                    data[r * c + j] = gd[r];
                }
                acc(*a, like(ta, data));
            }
            Op::LogSoftmaxRows(a) => {
                // d x_j = g_j - softmax_j * sum(g)
                let y = &node.value;
                let c = y.cols();
                let mut data = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let gs: f64 = g.row_slice(r).iter().sum();
                    for j in 0..c {
                        data[r * c + j] = gd[r * c + j] - y.get(r, j).exp() * gs;
                    }
                }
                acc(*a, like(y, data));
            }
            Op::SoftmaxRows(a) => {
                // d x_j = y_j (g_j - sum_k g_k y_k); masked entries have y = 0
                let y = &node.value;
                let c = y.cols();
                let mut data = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let yr = y.row_slice(r);
                    let dot: f64 = g.row_slice(r).iter().zip(yr).map(|(g, y)| g * y).sum();
                    for j in 0..c {
                        data[r * c + j] = yr[j] * (gd[r * c + j] - dot);
                    }
                }
                acc(*a, like(y, data));
            }
            Op::PairScores(f1, f2, n) => {
                let total = g.rows();
                let n = *n;
                if self.ng(*f1) {
                    acc(*f1, Tensor::column((0..total).map(|r| g.row_slice(r).iter().sum()).collect()));
                }
                if self.ng(*f2) {
                    let mut d2 = vec![0.0; total];
                    for r in 0..total {
                        let base = (r / n) * n;
                        for j in 0..n {
                            d2[base + j] += gd[r * n + j];
                        }
                    }
                    acc(*f2, Tensor::column(d2));
                }
            }
            Op::GroupAttend(alpha, v, n) => {
                let (ta, tv) = (val(*alpha), val(*v));
                let n = *n;
                let h = tv.cols();
                let groups = ta.rows() / n;
                if self.ng(*alpha) {
                    let mut da = vec![0.0; ta.len()];
                    for gi in 0..groups {
                        gemm(
                            n, h, n,
                            &gd[gi * n * h..(gi + 1) * n * h], false,
                            &tv.data()[gi * n * h..(gi + 1) * n * h], true,
                            &mut da[gi * n * n..(gi + 1) * n * n], false,
                        );
                    }
                    acc(*alpha, like(ta, da));
                }
                if self.ng(*v) {
                    let mut dv = vec![0.0; tv.len()];
                    for gi in 0..groups {
                        gemm(
                            n, n, h,
                            &ta.data()[gi * n * n..(gi + 1) * n * n], true,
                            &gd[gi * n * h..(gi + 1) * n * h], false,
                            &mut dv[gi * n * h..(gi + 1) * n * h], false,
                        );
                    }
                    acc(*v, like(tv, dv));
                }
            }
            Op::GroupWeightedSum(x, w, n) => {
                let tx = val(*x);
                let h = tx.cols();
                let mut data = vec![0.0; tx.len()];
                for (row, &wr) in w.iter().enumerate() {
                    let src = g.row_slice(row / n);
                    for (d, s) in data[row * h..(row + 1) * h].iter_mut().zip(src) {
                        *d = wr * s;
                    }
                }
                acc(*x, like(tx, data));
            }
            Op::Gru(c) => self.gru_backward(c, g, &mut acc),
        }
    }

    fn gru_backward(&self, c: &GruCache, g: &Tensor, acc: &mut impl FnMut(Var, Tensor)) {
        let val = |v: Var| &self.nodes[v.0].value;
        let (tx, th, twi, twh) = (val(c.x), val(c.h), val(c.w_in), val(c.w_hid));
        let (b, inp, hid) = (tx.rows(), tx.cols(), th.cols());
        let g3 = 3 * hid;
        let gd = g.data();
        let mut dgi = vec![0.0; b * g3];
        let mut dgh = vec![0.0; b * g3];
        let mut dh = vec![0.0; b * hid];
        for row in 0..b {
            for k in 0..hid {
                let o = row * hid + k;
                let (r, z, n, hn) = (c.r[o], c.z[o], c.n[o], c.gh_n[o]);
                let go = gd[o];
                let dz = go * (th.data()[o] - n);
                let dn_pre = go * (1.0 - z) * (1.0 - n * n);
                let dr_pre = dn_pre * hn * r * (1.0 - r);
                let dz_pre = dz * z * (1.0 - z);
                dh[o] = go * z;
                let base = row * g3;
                dgi[base + k] = dr_pre;
                dgi[base + hid + k] = dz_pre;
                dgi[base + 2 * hid + k] = dn_pre;
                dgh[base + k] = dr_pre;
                dgh[base + hid + k] = dz_pre;
                dgh[base + 2 * hid + k] = dn_pre * r;
            }
        }
        if self.ng(c.x) {
            let mut dx = vec![0.0; b * inp];
            gemm(b, g3, inp, &dgi, false, twi.data(), true, &mut dx, false);
            acc(c.x, Tensor::matrix(b, inp, dx));
        }
        if self.ng(c.h) {
            gemm(b, g3, hid, &dgh, false, twh.data(), true, &mut dh, true);
            acc(c.h, Tensor::matrix(b, hid, dh));
        }
        if self.ng(c.w_in) {
            let mut dw = vec![0.0; inp * g3];
            gemm(inp, b, g3, tx.data(), true, &dgi, false, &mut dw, false);
            acc(c.w_in, Tensor::matrix(inp, g3, dw));
        }
        if self.ng(c.w_hid) {
            let mut dw = vec![0.0; hid * g3];
            gemm(hid, b, g3, th.data(), true, &dgh, false, &mut dw, false);
            acc(c.w_hid, Tensor::matrix(hid, g3, dw));
        }
        let colsum = |m: &[f64]| {
            let mut s = vec![0.0; g3];
            for row in 0..b {
                for (d, x) in s.iter_mut().zip(&m[row * g3..(row + 1) * g3]) {
                    *d += x;
                }
            }
            s
        };
        if self.ng(c.b_in) {
            let t = val(c.b_in);
            acc(c.b_in, Tensor::matrix(t.rows(), t.cols(), colsum(&dgi)));
        }
        if self.ng(c.b_hid) {
            let t = val(c.b_hid);
            acc(c.b_hid, Tensor::matrix(t.rows(), t.cols(), colsum(&dgh)));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![1.0, 2.0, 3.0]), true);
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_root_is_a_no_op() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(3.0));
        let grads = g.backward(c).unwrap();
        assert!(grads.is_empty());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(NumericsError::NonScalarRoot(1, 2))));
    }

    #[test]
    fn nan_during_backward_is_reported() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![0.0]), true);
        let l = g.ln(x); // d ln(x)/dx at 0 is inf, then inf * 0 = NaN downstream
        let z = g.scale(l, 0.0);
        let s = g.sum(z);
        let err = g.backward(s).unwrap_err();
        assert!(matches!(err, NumericsError::NanInBackward(_)));
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut g = Graph::no_grad();
        let x = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 1.0, 1.0, 1.0]));
        let y = g
            .softmax_rows(x, Some(vec![true, false, true, false, false, false]))
            .unwrap();
        let v = g.value(y);
        assert_eq!(v.get(0, 1), 0.0);
        assert!((v.get(0, 0) + v.get(0, 2) - 1.0).abs() < 1e-15);
        assert_eq!(v.row_slice(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn param_binding_is_memoised() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(2.0));
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let p = g.mul(a, b).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.param(id).unwrap().item(), 4.0);
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(1, 3));
        let mut rng = rand::rng();
        assert!(matches!(
            g.dropout(x, 1.0, true, &mut rng),
            Err(NumericsError::DropoutRate(_))
        ));
    }
}
