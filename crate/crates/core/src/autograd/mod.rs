//! Minimal tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every parameter loaded from
//! the backing [`ParamStore`].
//!
//! Non-differentiable values that enter the graph as constants (stop-gradient
//! copies, categorical samples) go through [`Graph::frozen`]. A graph in
//! record mode remembers them in creation order; a graph in replay mode
//! hands the recorded values back instead of recomputing them. Replaying lets
//! finite-difference checks evaluate exactly the surrogate function whose
//! gradient the tape computes.

mod optim;
mod params;

use ndarray::{s, Array2, Axis};

pub use optim::Adam;
pub use params::{Gradients, ParamId, ParamStore};

pub type Tensor = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddTiled(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Elu(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Softplus(Var),
    ClampMin(Var, f64),
    Clamp(Var, f64, f64),
    Min(Var, Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    BlockSum(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    SoftmaxBlocks(Var, usize),
    LogSoftmaxBlocks(Var, usize),
    PickCols(Var, Vec<usize>),
    LayerNorm(Var, Vec<f64>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    GroupMean(Var, usize),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
enum Frozen {
    #[default]
    Off,
    Record(Vec<Tensor>),
    Replay(Vec<Tensor>, usize),
}

/// Computation tape. Parameters are pulled lazily from the backing store and
/// loaded at most once per graph.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    frozen: Frozen,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; params.len()],
            frozen: Frozen::Off,
        }
    }

    /// A graph without parameters, for evaluating formulas on constants.
    pub fn detached() -> Graph<'static> {
        Graph {
            params: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
            frozen: Frozen::Off,
        }
    }

    pub fn recording(params: &'p ParamStore) -> Self {
        let mut g = Self::new(params);
        g.frozen = Frozen::Record(Vec::new());
        g
    }

    pub fn replaying(params: &'p ParamStore, frozen: Vec<Tensor>) -> Self {
        let mut g = Self::new(params);
        g.frozen = Frozen::Replay(frozen, 0);
        g
    }

    /// Frozen values seen so far in record mode.
    pub fn take_frozen(&mut self) -> Vec<Tensor> {
        match std::mem::take(&mut self.frozen) {
            Frozen::Record(v) => v,
            Frozen::Replay(v, _) => v,
            Frozen::Off => Vec::new(),
        }
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

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t[[0, 0]]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let value = self
            .params
            .expect("graph has no parameter store")
            .get(id)
            .clone();
        let v = self.push(value, Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Inserts a constant that must stay fixed under replay. `make` is only
    /// invoked outside replay mode.
    pub fn frozen(&mut self, make: impl FnOnce() -> Tensor) -> Var {
        let value = match &mut self.frozen {
            Frozen::Off => make(),
            Frozen::Record(values) => {
                let v = make();
                values.push(v.clone());
                v
            }
            Frozen::Replay(values, cursor) => {
                let v = values
                    .get(*cursor)
                    .cloned()
                    .expect("replay ran past the recorded frozen values");
                *cursor += 1;
                v
            }
        };
        self.constant(value)
    }

    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.frozen(move || value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    /// `x (n x m) + row (1 x m)`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        let value = self.value(x) + self.value(row);
        self.push(value, Op::AddRow(x, row))
    }

    /// `x (n x m) * row (1 x m)`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        let value = self.value(x) * self.value(row);
        self.push(value, Op::MulRow(x, row))
    }

    /// Adds a `(group x m)` block to every consecutive group of rows of `x`.
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Var {
        let group = self.value(tile).nrows();
        let xv = self.value(x);
        assert_eq!(xv.nrows() % group, 0, "rows not divisible by tile height");
        let mut value = xv.clone();
        let tv = self.value(tile);
        for mut chunk in value.axis_chunks_iter_mut(Axis(0), group) {
            chunk += tv;
        }
        self.push(value, Op::AddTiled(x, tile))
    }

    /// `x (n x m) * col (n x 1)`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        assert_eq!(self.value(col).ncols(), 1);
        let value = self.value(x) * self.value(col);
        self.push(value, Op::MulCol(x, col))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) * c;
        self.push(value, Op::Scale(x, c))
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) + c;
        self.push(value, Op::Offset(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|a| a.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .mapv(|a| if a > 0.0 { a } else { a.exp_m1() });
        self.push(value, Op::Elu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::exp);
        self.push(value, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::ln);
        self.push(value, Op::Ln(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|a| a * a);
        self.push(value, Op::Square(x))
    }

    /// `ln(1 + exp(x))`, evaluated stably.
    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(softplus);
        self.push(value, Op::Softplus(x))
    }

    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let value = self.value(x).mapv(|a| a.max(floor));
        self.push(value, Op::ClampMin(x, floor))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).mapv(|a| a.clamp(lo, hi));
        self.push(value, Op::Clamp(x, lo, hi))
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.zip_mut_with(self.value(b), |x, &y| *x = x.min(y));
        self.push(value, Op::Min(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Array2::from_elem((1, 1), t.sum() / t.len() as f64);
        self.push(value, Op::Mean(x))
    }

    /// Per-row sum, `(n x m) -> (n x 1)`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let value = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::RowSum(x))
    }

    /// Sums each run of `block` adjacent columns, `(n x kb) -> (n x k)`.
    pub fn block_sum(&mut self, x: Var, block: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.ncols() % block, 0);
        let k = t.ncols() / block;
        let value = Array2::from_shape_fn((t.nrows(), k), |(i, j)| {
            t.slice(s![i, j * block..(j + 1) * block]).sum()
        });
        self.push(value, Op::BlockSum(x, block))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(x, start, end))
    }

    /// Softmax applied independently to each run of `block` columns.
    pub fn softmax_blocks(&mut self, x: Var, block: usize) -> Var {
        let value = softmax_blocks(self.value(x), block);
        self.push(value, Op::SoftmaxBlocks(x, block))
    }

    pub fn log_softmax_blocks(&mut self, x: Var, block: usize) -> Var {
        let value = log_softmax_blocks(self.value(x), block);
        self.push(value, Op::LogSoftmaxBlocks(x, block))
    }

    /// Selects `x[i, cols[i]]` per row, `(n x m) -> (n x 1)`.
    pub fn pick_cols(&mut self, x: Var, cols: &[usize]) -> Var {
        let t = self.value(x);
        assert_eq!(t.nrows(), cols.len());
        let value = Array2::from_shape_fn((cols.len(), 1), |(i, _)| t[[i, cols[i]]]);
        self.push(value, Op::PickCols(x, cols.to_vec()))
    }

    /// Row-wise standardization without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let m = t.ncols() as f64;
        let mut value = t.clone();
        let mut inv_std = Vec::with_capacity(t.nrows());
        for mut row in value.rows_mut() {
            let mean = row.sum() / m;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / m;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|a| (a - mean) * inv);
            inv_std.push(inv);
        }
        self.push(value, Op::LayerNorm(x, inv_std))
    }

    /// Multi-head scaled dot-product self-attention within consecutive row
    /// groups of size `group` (one group per batch element, one row per
    /// agent). With `self_only` every token attends to itself alone.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        heads: usize,
        self_only: bool,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, dim) = qv.dim();
        assert_eq!(kv.dim(), (rows, dim));
        assert_eq!(vv.dim(), (rows, dim));
        assert_eq!(rows % group, 0);
        assert_eq!(dim % heads, 0);
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n_groups = rows / group;
        let mut probs = vec![0.0; n_groups * heads * group * group];
        let mut out = Array2::zeros((rows, dim));
        let mut logits = vec![0.0; group];
        for b in 0..n_groups {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..group {
                    let p = &mut probs[((b * heads + h) * group + i) * group..][..group];
                    if self_only {
                        p[i] = 1.0;
                    } else {
                        let qi = qv.slice(s![b * group + i, cols.clone()]);
                        for (j, l) in logits.iter_mut().enumerate() {
                            let kj = kv.slice(s![b * group + j, cols.clone()]);
                            *l = qi.dot(&kj) * scale;
                        }
                        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut total = 0.0;
                        for (pj, &l) in p.iter_mut().zip(&logits) {
                            *pj = (l - max).exp();
                            total += *pj;
                        }
                        p.iter_mut().for_each(|pj| *pj /= total);
                    }
                    for j in 0..group {
                        if p[j] == 0.0 {
                            continue;
                        }
                        for c in cols.clone() {
                            out[[b * group + i, c]] += p[j] * vv[[b * group + j, c]];
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                group,
                heads,
                probs,
            },
        )
    }

    /// Mean over each consecutive group of rows, `(B*group x m) -> (B x m)`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.nrows() % group, 0);
        let n = t.nrows() / group;
        let mut value = Array2::zeros((n, t.ncols()));
        for (b, chunk) in t.axis_chunks_iter(Axis(0), group).enumerate() {
            value
                .row_mut(b)
                .assign(&(chunk.sum_axis(Axis(0)) / group as f64));
        }
        self.push(value, Op::GroupMean(x, group))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.len(), rows * cols);
        let flat: Vec<f64> = t.iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), flat).expect("reshape");
        self.push(value, Op::Reshape(x))
    }

    /// Reverse pass from the scalar `loss`. Gradients of parameters that did
    /// not take part in the computation are `None`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        let n_params = self.params.map_or(0, ParamStore::len);
        let mut out = Gradients {
            grads: vec![None; n_params],
        };
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    out.grads[id.0] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&val(*b).t());
                    let gb = val(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * val(*b);
                    let gb = &g * val(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(x, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *x, g);
                }
                Op::MulRow(x, row) => {
                    let gr = (&g * val(*x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gx = &g * val(*row);
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *x, gx);
                }
                Op::AddTiled(x, tile) => {
                    let group = val(*tile).nrows();
                    let mut gt = Array2::zeros(val(*tile).dim());
                    for chunk in g.axis_chunks_iter(Axis(0), group) {
                        gt += &chunk;
                    }
                    acc(&mut grads, *tile, gt);
                    acc(&mut grads, *x, g);
                }
                Op::MulCol(x, col) => {
                    let gc = (&g * val(*x)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let gx = &g * val(*col);
                    acc(&mut grads, *col, gc);
                    acc(&mut grads, *x, gx);
                }
                Op::Scale(x, c) => acc(&mut grads, *x, g * *c),
                Op::Offset(x) => acc(&mut grads, *x, g),
                Op::Tanh(x) => {
                    let gx = &g * &node.value.mapv(|y| 1.0 - y * y);
                    acc(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = &g * &node.value.mapv(|y| y * (1.0 - y));
                    acc(&mut grads, *x, gx);
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    gx.zip_mut_with(val(*x), |d, &a| {
                        if a <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(&mut grads, *x, gx);
                }
                Op::Elu(x) => {
                    let mut gx = g;
                    ndarray::Zip::from(&mut gx)
                        .and(val(*x))
                        .and(&node.value)
                        .for_each(|d, &a, &y| {
                            if a <= 0.0 {
                                *d *= y + 1.0
                            }
                        });
                    acc(&mut grads, *x, gx);
                }
                Op::Exp(x) => {
                    let gx = &g * &node.value;
                    acc(&mut grads, *x, gx);
                }
                Op::Ln(x) => {
                    let gx = &g / val(*x);
                    acc(&mut grads, *x, gx);
                }
                Op::Square(x) => {
                    let gx = &g * &(val(*x) * 2.0);
                    acc(&mut grads, *x, gx);
                }
                Op::Softplus(x) => {
                    let gx = &g * &val(*x).mapv(sigmoid);
                    acc(&mut grads, *x, gx);
                }
                Op::ClampMin(x, floor) => {
                    let mut gx = g;
                    gx.zip_mut_with(val(*x), |d, &a| {
                        if a < *floor {
                            *d = 0.0
                        }
                    });
                    acc(&mut grads, *x, gx);
                }
                Op::Clamp(x, lo, hi) => {
                    let mut gx = g;
                    gx.zip_mut_with(val(*x), |d, &a| {
                        if a < *lo || a > *hi {
                            *d = 0.0
                        }
                    });
                    acc(&mut grads, *x, gx);
                }
                Op::Min(a, b) => {
                    let mut ga = g.clone();
                    let mut gb = g;
                    ndarray::Zip::from(&mut ga)
                        .and(&mut gb)
                        .and(val(*a))
                        .and(val(*b))
                        .for_each(|da, db, &x, &y| {
                            if x <= y {
                                *db = 0.0
                            } else {
                                *da = 0.0
                            }
                        });
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Sum(x) => {
                    let gx = Array2::from_elem(val(*x).dim(), g[[0, 0]]);
                    acc(&mut grads, *x, gx);
                }
                Op::Mean(x) => {
                    let n = val(*x).len() as f64;
                    let gx = Array2::from_elem(val(*x).dim(), g[[0, 0]] / n);
                    acc(&mut grads, *x, gx);
                }
                Op::RowSum(x) => {
                    let dim = val(*x).dim();
                    let gx = Array2::from_shape_fn(dim, |(i, _)| g[[i, 0]]);
                    acc(&mut grads, *x, gx);
                }
                Op::BlockSum(x, block) => {
                    let dim = val(*x).dim();
                    let gx = Array2::from_shape_fn(dim, |(i, j)| g[[i, j / block]]);
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        let gp = g.slice(s![.., start..start + w]).to_owned();
                        acc(&mut grads, *p, gp);
                        start += w;
                    }
                }
                Op::SliceCols(x, a, b) => {
                    let mut gx = Array2::zeros(val(*x).dim());
                    gx.slice_mut(s![.., *a..*b]).assign(&g);
                    acc(&mut grads, *x, gx);
                }
                Op::SoftmaxBlocks(x, block) => {
                    let y = &node.value;
                    let mut gx = &g * y;
                    for (mut grow, yrow) in gx.rows_mut().into_iter().zip(y.rows()) {
                        for start in (0..yrow.len()).step_by(*block) {
                            let r = start..start + block;
                            let dot: f64 = grow.slice(s![r.clone()]).sum();
                            for c in r {
                                grow[c] -= yrow[c] * dot;
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::LogSoftmaxBlocks(x, block) => {
                    let y = &node.value;
                    let mut gx = g.clone();
                    for ((mut grow, gin), yrow) in
                        gx.rows_mut().into_iter().zip(g.rows()).zip(y.rows())
                    {
                        for start in (0..yrow.len()).step_by(*block) {
                            let r = start..start + block;
                            let total: f64 = gin.slice(s![r.clone()]).sum();
                            for c in r {
                                grow[c] -= yrow[c].exp() * total;
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::PickCols(x, cols) => {
                    let mut gx = Array2::zeros(val(*x).dim());
                    for (i, &c) in cols.iter().enumerate() {
                        gx[[i, c]] = g[[i, 0]];
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::LayerNorm(x, inv_std) => {
                    let y = &node.value;
                    let m = y.ncols() as f64;
                    let mut gx = g.clone();
                    for (((mut grow, gin), yrow), inv) in gx
                        .rows_mut()
                        .into_iter()
                        .zip(g.rows())
                        .zip(y.rows())
                        .zip(inv_std)
                    {
                        let mean_g = gin.sum() / m;
                        let mean_gy = gin.dot(&yrow) / m;
                        for c in 0..grow.len() {
                            grow[c] = inv * (gin[c] - mean_g - yrow[c] * mean_gy);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    group,
                    heads,
                    probs,
                } => {
                    let (gq, gk, gv) =
                        attention_backward(&g, val(*q), val(*k), val(*v), *group, *heads, probs);
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gv);
                }
                Op::GroupMean(x, group) => {
                    let dim = val(*x).dim();
                    let gx =
                        Array2::from_shape_fn(dim, |(r, c)| g[[r / group, c]] / *group as f64);
                    acc(&mut grads, *x, gx);
                }
                Op::Reshape(x) => {
                    let dim = val(*x).dim();
                    let flat: Vec<f64> = g.iter().copied().collect();
                    let gx = Array2::from_shape_vec(dim, flat).expect("reshape");
                    acc(&mut grads, *x, gx);
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn attention_backward(
    g: &Tensor,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    group: usize,
    heads: usize,
    probs: &[f64],
) -> (Tensor, Tensor, Tensor) {
    let (rows, dim) = q.dim();
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = Array2::zeros((rows, dim));
    let mut gk = Array2::zeros((rows, dim));
    let mut gv = Array2::zeros((rows, dim));
    let mut dp = vec![0.0; group];
    for b in 0..rows / group {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..group {
                let p = &probs[((b * heads + h) * group + i) * group..][..group];
                let ri = b * group + i;
                for j in 0..group {
                    let rj = b * group + j;
                    let mut d = 0.0;
                    for c in cols.clone() {
                        gv[[rj, c]] += p[j] * g[[ri, c]];
                        d += g[[ri, c]] * v[[rj, c]];
                    }
                    dp[j] = d;
                }
                let weighted: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..group {
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let rj = b * group + j;
                    for c in cols.clone() {
                        gq[[ri, c]] += ds * k[[rj, c]];
                        gk[[rj, c]] += ds * q[[ri, c]];
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn softmax_blocks(t: &Tensor, block: usize) -> Tensor {
    let mut out = log_softmax_blocks(t, block);
    out.mapv_inplace(f64::exp);
    out
}

pub fn log_softmax_blocks(t: &Tensor, block: usize) -> Tensor {
    assert!(block > 0 && t.ncols() % block == 0, "block must divide width");
    let mut out = t.clone();
    for mut row in out.rows_mut() {
        for start in (0..row.len()).step_by(block) {
            let mut seg = row.slice_mut(s![start..start + block]);
            let max = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + seg.iter().map(|a| (a - max).exp()).sum::<f64>().ln();
            seg.mapv_inplace(|a| a - lse);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences on a graph-building closure; the closure receives a
    /// fresh graph over `store` and returns the scalar loss.
    fn check<F>(store: &ParamStore, f: F)
    where
        F: Fn(&mut Graph<'_>) -> Var,
    {
        let mut g = Graph::new(store);
        let loss = f(&mut g);
        let grads = g.backward(loss);
        let eps = 1e-6;
        for id in store.ids() {
            let analytic = grads.get(id).expect("every param used");
            for idx in 0..store.get(id).len() {
                let mut plus = store.clone();
                plus.get_mut(id).as_slice_mut().unwrap()[idx] += eps;
                let mut minus = store.clone();
                minus.get_mut(id).as_slice_mut().unwrap()[idx] -= eps;
                let lp = {
                    let mut g = Graph::new(&plus);
                    let l = f(&mut g);
                    g.scalar(l)
                };
                let lm = {
                    let mut g = Graph::new(&minus);
                    let l = f(&mut g);
                    g.scalar(l)
                };
                let fd = (lp - lm) / (2.0 * eps);
                let an = analytic.as_slice().unwrap()[idx];
                let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-8));
                assert!(
                    err < 1e-5 || (fd - an).abs() < 1e-9,
                    "{} [{idx}]: fd {fd} vs analytic {an}",
                    store.name(id)
                );
            }
        }
    }

    fn store_with(entries: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in entries {
            s.add(*n, t.clone());
        }
        s
    }

    #[test]
    fn elementwise_and_reductions() {
        let store = store_with(&[
            ("a", array![[0.3, -0.7, 1.1], [0.2, 0.5, -1.3]]),
            ("b", array![[0.9, 0.1, -0.4], [-0.6, 0.8, 0.25]]),
            ("row", array![[0.5, -0.2, 0.3]]),
            ("col", array![[1.5], [-0.5]]),
        ]);
        check(&store, |g| {
            let a = g.param(ParamId(0));
            let b = g.param(ParamId(1));
            let row = g.param(ParamId(2));
            let col = g.param(ParamId(3));
            let x = g.mul(a, b);
            let x = g.add_row(x, row);
            let x = g.mul_col(x, col);
            let t = g.tanh(x);
            let sg = g.sigmoid(a);
            let e = g.elu(b);
            let sp = g.softplus(t);
            let m = g.min(sg, e);
            let y = g.add(sp, m);
            let y = g.mul_row(y, row);
            let sq = g.square(y);
            let rs = g.row_sum(sq);
            let ex = g.exp(rs);
            let l1 = g.mean(ex);
            let c = g.clamp(a, -0.5, 0.6);
            let cm = g.clamp_min(b, 0.0);
            let r = g.relu(c);
            let z = g.sub(r, cm);
            let z = g.offset(z, 3.0);
            let lnz = g.ln(z);
            let l2 = g.sum(lnz);
            let l2 = g.scale(l2, 0.7);
            g.add(l1, l2)
        });
    }

    #[test]
    fn matmul_concat_slice_reshape() {
        let store = store_with(&[
            ("x", array![[0.3, -0.7], [0.2, 0.5], [1.0, -0.1], [0.4, 0.4]]),
            ("w", array![[0.9, 0.1, -0.4], [-0.6, 0.8, 0.25]]),
            ("tile", array![[0.1, 0.2, 0.3, 0.4, 0.5], [0.0, -0.1, 0.2, -0.3, 0.4]]),
        ]);
        check(&store, |g| {
            let x = g.param(ParamId(0));
            let w = g.param(ParamId(1));
            let tile = g.param(ParamId(2));
            let y = g.matmul(x, w);
            let cat = g.concat_cols(&[y, x]);
            let cat = g.add_tiled(cat, tile);
            let sl = g.slice_cols(cat, 1, 4);
            let r = g.reshape(sl, 2, 6);
            let gm = g.group_mean(cat, 2);
            let t = g.tanh(r);
            let s1 = g.sum(t);
            let sq = g.square(gm);
            let s2 = g.sum(sq);
            g.add(s1, s2)
        });
    }

    #[test]
    fn softmax_blocks_layer_norm_pick() {
        let store = store_with(&[(
            "x",
            array![[0.3, -0.7, 1.1, 0.4], [0.2, 0.5, -1.3, 2.0], [0.0, 0.1, 0.2, -0.3]],
        )]);
        check(&store, |g| {
            let x = g.param(ParamId(0));
            let p = g.softmax_blocks(x, 2);
            let lp = g.log_softmax_blocks(x, 2);
            let w = g.constant(array![[1.0, 2.0, -1.0, 0.5], [0.3, 0.3, 0.3, 0.3], [2.0, 0.0, 1.0, 1.0]]);
            let pw = g.mul(p, w);
            let kl = g.mul(p, lp);
            let bs = g.block_sum(kl, 2);
            let ln = g.layer_norm(x, 1e-5);
            let ln = g.mul(ln, w);
            let picked = g.pick_cols(lp, &[0, 3, 2]);
            let a = g.sum(pw);
            let b = g.sum(bs);
            let c = g.sum(ln);
            let d = g.sum(picked);
            let ab = g.add(a, b);
            let cd = g.add(c, d);
            g.add(ab, cd)
        });
    }

    #[test]
    fn attention_gradients() {
        let store = store_with(&[
            ("q", Array2::from_shape_fn((6, 4), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.2 - 0.4)),
            ("k", Array2::from_shape_fn((6, 4), |(i, j)| ((i * 3 + j * 5) % 7) as f64 * 0.15 - 0.5)),
            ("v", Array2::from_shape_fn((6, 4), |(i, j)| ((i + 2 * j) % 4) as f64 * 0.3 - 0.45)),
        ]);
        for self_only in [false, true] {
            check(&store, |g| {
                let q = g.param(ParamId(0));
                let k = g.param(ParamId(1));
                let v = g.param(ParamId(2));
                let o = g.attention(q, k, v, 3, 2, self_only);
                let t = g.tanh(o);
                let w = g.constant(Array2::from_shape_fn((6, 4), |(i, j)| (i + j) as f64 * 0.1));
                let tw = g.mul(t, w);
                let s = g.sum(tw);
                // keep q/k in the graph for the self-only case
                let qk = g.mul(q, k);
                let s2 = g.sum(qk);
                let s2 = g.scale(s2, 0.01);
                g.add(s, s2)
            });
        }
    }

    #[test]
    fn replay_reuses_frozen_values() {
        let store = store_with(&[("x", array![[1.0, 2.0]])]);
        let mut g = Graph::recording(&store);
        let x = g.param(ParamId(0));
        let c = g.stop_gradient(x);
        assert_eq!(g.value(c), &array![[1.0, 2.0]]);
        let frozen = g.take_frozen();

        let mut moved = store.clone();
        moved.get_mut(ParamId(0))[[0, 0]] = 5.0;
        let mut g = Graph::replaying(&moved, frozen);
        let x = g.param(ParamId(0));
        let c = g.stop_gradient(x);
        assert_eq!(g.value(c), &array![[1.0, 2.0]]);
        assert_eq!(g.value(x)[[0, 0]], 5.0);
    }

    #[test]
    fn softmax_rows_normalized() {
        let t = array![[1.0, 2.0, 3.0, -1.0], [1000.0, 0.0, -5.0, -5.0]];
        let p = softmax_blocks(&t, 2);
        for row in p.rows() {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
            assert!((row[2] + row[3] - 1.0).abs() < 1e-12);
        }
    }
}
