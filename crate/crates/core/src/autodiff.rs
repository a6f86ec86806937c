//! A small tape-based reverse-mode differentiator over dense matrices.
//!
//! Every value on the tape is an `Array2<f64>`. Nodes are appended in
//! evaluation order, so a reverse sweep over the node list is a valid
//! topological order for the backward pass. One forward recording can be
//! differentiated many times with different output seeds, which is how the
//! per-unit, per-class score vectors for the Fisher estimate are obtained.

use std::sync::Arc;

use ndarray::{Array2, Axis, Zip};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearity without learnable parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Relu,
    LeakyRelu(f64),
    Elu(f64),
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Unary::Elu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x.exp_m1()
                }
            }
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Unary::Elu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a * x.exp()
                }
            }
        }
    }
}

/// Fixed sparse mixing of rows: `out[i] = sum_j w_ij * x[j]`.
#[derive(Debug)]
pub struct RowMix {
    pub rows: Vec<Vec<(usize, f64)>>,
}

/// Multi-head additive attention over neighbourhood lists (self included).
#[derive(Debug)]
pub struct AttentionGraph {
    pub neighbors: Vec<Vec<usize>>,
    pub heads: usize,
    pub negative_slope: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var),
    MulConst(Var, Array2<f64>),
    Unary(Var, Unary),
    Prelu(Var, Var),
    ConcatCols(Var, Var),
    Mix(Var, Arc<RowMix>),
    MaxAgg(Var, Vec<Option<usize>>),
    Attention {
        x: Var,
        a_src: Var,
        a_dst: Var,
        graph: Arc<AttentionGraph>,
        alpha: Vec<Vec<Vec<f64>>>,
    },
    SegmentMean(Var, Arc<Vec<usize>>, Vec<f64>),
    LogSoftmax(Var),
    Nll(Var, Vec<(usize, usize)>),
    NormalizeRows(Var, Vec<f64>),
    RowDot(Var, Var),
    Mean(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like it when nothing flowed back.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Array2<f64> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(tape.value(v).raw_dim()))
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
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

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input or parameter. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shapes");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shapes");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    /// Adds a `1 x c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let v = self.value(x) + self.value(row);
        self.push(v, Op::AddRow(x, row), &[x, row])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x) + c;
        self.push(v, Op::AddScalar(x), &[x])
    }

    /// Elementwise product with a constant matrix of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Array2<f64>) -> Var {
        let v = self.value(x) * &c;
        self.push(v, Op::MulConst(x, c), &[x])
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let v = self.value(x).mapv(|e| f.apply(e));
        self.push(v, Op::Unary(x, f), &[x])
    }

    /// Parametric ReLU with a single learnable `1 x 1` slope.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Var {
        let s = self.scalar(slope);
        let v = self.value(x).mapv(|e| if e > 0.0 { e } else { s * e });
        self.push(v, Op::Prelu(x, slope), &[x, slope])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("row counts agree");
        self.push(v, Op::ConcatCols(a, b), &[a, b])
    }

    pub fn mix(&mut self, x: Var, mix: Arc<RowMix>) -> Var {
        let xv = self.value(x);
        let mut out = Array2::zeros((mix.rows.len(), xv.ncols()));
        for (i, row) in mix.rows.iter().enumerate() {
            let mut o = out.row_mut(i);
            for &(j, w) in row {
                o.scaled_add(w, &xv.row(j));
            }
        }
        self.push(out, Op::Mix(x, mix), &[x])
    }

    /// Elementwise max over each neighbour list. Empty lists produce zeros.
    pub fn max_agg(&mut self, x: Var, neighbors: &[Vec<usize>]) -> Var {
        let xv = self.value(x);
        let cols = xv.ncols();
        let mut out = Array2::zeros((neighbors.len(), cols));
        let mut arg = vec![None; neighbors.len() * cols];
        for (i, list) in neighbors.iter().enumerate() {
            for c in 0..cols {
                let mut best: Option<(usize, f64)> = None;
                for &j in list {
                    let v = xv[[j, c]];
                    if best.is_none_or(|(_, b)| v > b) {
                        best = Some((j, v));
                    }
                }
                if let Some((j, v)) = best {
                    out[[i, c]] = v;
                    arg[i * cols + c] = Some(j);
                }
            }
        }
        self.push(out, Op::MaxAgg(x, arg), &[x])
    }

    /// Attention over `graph.neighbors`. `x` is `n x (heads*dh)`; `a_src` and
    /// `a_dst` are `heads x dh`. Output is the concatenation of head outputs.
    pub fn attention(
        &mut self,
        x: Var,
        a_src: Var,
        a_dst: Var,
        graph: Arc<AttentionGraph>,
    ) -> Var {
        let xv = self.value(x);
        let (n, width) = xv.dim();
        let heads = graph.heads;
        let dh = width / heads;
        let asv = self.value(a_src);
        let adv = self.value(a_dst);
        let mut out = Array2::zeros((n, width));
        let mut alpha = Vec::with_capacity(heads);
        for k in 0..heads {
            let cols = ndarray::s![.., k * dh..(k + 1) * dh];
            let zk = xv.slice(cols);
            let s = zk.dot(&asv.row(k));
            let t = zk.dot(&adv.row(k));
            let mut head_alpha = Vec::with_capacity(n);
            for i in 0..n {
                let list = &graph.neighbors[i];
                let e: Vec<f64> = list
                    .iter()
                    .map(|&j| {
                        let pre = s[j] + t[i];
                        if pre > 0.0 {
                            pre
                        } else {
                            graph.negative_slope * pre
                        }
                    })
                    .collect();
                let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = e.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = w.iter().sum();
                let a: Vec<f64> = w.iter().map(|v| v / z).collect();
                let mut o = out.slice_mut(ndarray::s![i, k * dh..(k + 1) * dh]);
                for (&j, &aij) in list.iter().zip(&a) {
                    o.scaled_add(aij, &zk.row(j));
                }
                head_alpha.push(a);
            }
            alpha.push(head_alpha);
        }
        self.push(
            out,
            Op::Attention {
                x,
                a_src,
                a_dst,
                graph,
                alpha,
            },
            &[x, a_src, a_dst],
        )
    }

    /// Mean of rows grouped by `segment` into `num_segments` output rows.
    pub fn segment_mean(&mut self, x: Var, segment: Arc<Vec<usize>>, num_segments: usize) -> Var {
        let xv = self.value(x);
        let mut out = Array2::zeros((num_segments, xv.ncols()));
        let mut counts = vec![0.0; num_segments];
        for (i, &s) in segment.iter().enumerate() {
            out.row_mut(s).scaled_add(1.0, &xv.row(i));
            counts[s] += 1.0;
        }
        for (s, &c) in counts.iter().enumerate() {
            if c > 0.0 {
                out.row_mut(s).mapv_inplace(|v| v / c);
            }
        }
        self.push(out, Op::SegmentMean(x, segment, counts), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|e| (e - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|e| e - lse);
        }
        self.push(v, Op::LogSoftmax(x), &[x])
    }

    /// Mean negative log-likelihood of `(row, class)` targets on log-probabilities.
    pub fn nll(&mut self, log_probs: Var, targets: Vec<(usize, usize)>) -> Var {
        let lp = self.value(log_probs);
        let total: f64 = targets.iter().map(|&(r, c)| -lp[[r, c]]).sum();
        let v = Array2::from_elem((1, 1), total / targets.len().max(1) as f64);
        self.push(v, Op::Nll(log_probs, targets), &[log_probs])
    }

    /// Scales every row to unit L2 norm. Zero rows are left at zero.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let mut norms = Vec::with_capacity(v.nrows());
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt();
            norms.push(n);
            if n > 0.0 {
                row.mapv_inplace(|e| e / n);
            }
        }
        self.push(v, Op::NormalizeRows(x, norms), &[x])
    }

    /// Row-wise dot products as an `n x 1` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let prod = self.value(a) * self.value(b);
        let v = prod.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::RowDot(a, b), &[a, b])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = Array2::from_elem((1, 1), xv.sum() / xv.len().max(1) as f64);
        self.push(v, Op::Mean(x), &[x])
    }

    /// Reverse sweep from `output` seeded with `seed` (same shape as the output).
    pub fn backward_with(&self, output: Var, seed: Array2<f64>) -> Gradients {
        assert_eq!(seed.dim(), self.value(output).dim(), "seed shape");
        let mut grads: Vec<Option<Array2<f64>>> = Vec::new();
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads.resize_with(self.nodes.len(), || None);
        Gradients { grads }
    }

    /// Backward from a `1 x 1` output with unit seed.
    pub fn backward(&self, output: Var) -> Gradients {
        self.backward_with(output, Array2::ones((1, 1)))
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.dot(&self.value(*b).t()));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], -g);
                }
            }
            Op::AddRow(x, row) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g.clone());
                }
                if self.wants(*row) {
                    accumulate(&mut grads[row.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::AddScalar(x) => accumulate(&mut grads[x.0], g.clone()),
            Op::MulConst(x, c) => accumulate(&mut grads[x.0], g * c),
            Op::Unary(x, f) => {
                let mut gx = g.clone();
                Zip::from(&mut gx)
                    .and(self.value(*x))
                    .for_each(|gv, &xv| *gv *= f.derivative(xv));
                accumulate(&mut grads[x.0], gx);
            }
            Op::Prelu(x, slope) => {
                let s = self.scalar(*slope);
                let xv = self.value(*x);
                if self.wants(*x) {
                    let mut gx = g.clone();
                    Zip::from(&mut gx).and(xv).for_each(|gv, &e| {
                        if e <= 0.0 {
                            *gv *= s
                        }
                    });
                    accumulate(&mut grads[x.0], gx);
                }
                if self.wants(*slope) {
                    let mut acc = 0.0;
                    Zip::from(g).and(xv).for_each(|&gv, &e| {
                        if e <= 0.0 {
                            acc += gv * e
                        }
                    });
                    accumulate(&mut grads[slope.0], Array2::from_elem((1, 1), acc));
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).ncols();
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.slice(ndarray::s![.., ..ca]).to_owned());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.slice(ndarray::s![.., ca..]).to_owned());
                }
            }
            Op::Mix(x, mix) => {
                let xv = self.value(*x);
                let mut gx = Array2::zeros(xv.raw_dim());
                for (i, row) in mix.rows.iter().enumerate() {
                    let gi = g.row(i);
                    for &(j, w) in row {
                        gx.row_mut(j).scaled_add(w, &gi);
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::MaxAgg(x, arg) => {
                let xv = self.value(*x);
                let cols = xv.ncols();
                let mut gx = Array2::zeros(xv.raw_dim());
                for (k, a) in arg.iter().enumerate() {
                    if let Some(j) = a {
                        gx[[*j, k % cols]] += g[[k / cols, k % cols]];
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::Attention {
                x,
                a_src,
                a_dst,
                graph,
                alpha,
            } => self.attention_backward(*x, *a_src, *a_dst, graph, alpha, g, grads),
            Op::SegmentMean(x, segment, counts) => {
                let xv = self.value(*x);
                let mut gx = Array2::zeros(xv.raw_dim());
                for (i, &s) in segment.iter().enumerate() {
                    gx.row_mut(i).scaled_add(1.0 / counts[s], &g.row(s));
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::LogSoftmax(x) => {
                let out = &self.nodes[idx].value;
                let mut gx = g.clone();
                for (mut gr, lr) in gx.rows_mut().into_iter().zip(out.rows()) {
                    let total: f64 = gr.sum();
                    Zip::from(&mut gr)
                        .and(&lr)
                        .for_each(|gv, &l| *gv -= l.exp() * total);
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::Nll(lp, targets) => {
                let mut gx = Array2::zeros(self.value(*lp).raw_dim());
                let scale = g[[0, 0]] / targets.len().max(1) as f64;
                for &(r, c) in targets {
                    gx[[r, c]] -= scale;
                }
                accumulate(&mut grads[lp.0], gx);
            }
            Op::NormalizeRows(x, norms) => {
                let out = &self.nodes[idx].value;
                let mut gx = g.clone();
                for (i, mut gr) in gx.rows_mut().into_iter().enumerate() {
                    let n = norms[i];
                    if n > 0.0 {
                        let y = out.row(i);
                        let proj = gr.dot(&y);
                        Zip::from(&mut gr)
                            .and(&y)
                            .for_each(|gv, &yv| *gv = (*gv - proj * yv) / n);
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::RowDot(a, b) => {
                let col = g.column(0).insert_axis(Axis(1));
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], self.value(*b) * &col);
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], self.value(*a) * &col);
                }
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let c = g[[0, 0]] / xv.len().max(1) as f64;
                accumulate(&mut grads[x.0], Array2::from_elem(xv.raw_dim(), c));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        x: Var,
        a_src: Var,
        a_dst: Var,
        graph: &AttentionGraph,
        alpha: &[Vec<Vec<f64>>],
        g: &Array2<f64>,
        grads: &mut [Option<Array2<f64>>],
    ) {
        let xv = self.value(x);
        let asv = self.value(a_src);
        let adv = self.value(a_dst);
        let (n, width) = xv.dim();
        let heads = graph.heads;
        let dh = width / heads;
        let mut gx = Array2::zeros((n, width));
        let mut g_src = Array2::zeros(asv.raw_dim());
        let mut g_dst = Array2::zeros(adv.raw_dim());
        for k in 0..heads {
            let range = k * dh..(k + 1) * dh;
            let zk = xv.slice(ndarray::s![.., range.clone()]);
            let s = zk.dot(&asv.row(k));
            let t = zk.dot(&adv.row(k));
            let mut ds = vec![0.0; n];
            let mut dt = vec![0.0; n];
            for i in 0..n {
                let list = &graph.neighbors[i];
                let a = &alpha[k][i];
                let go = g.slice(ndarray::s![i, range.clone()]);
                let dalpha: Vec<f64> = list.iter().map(|&j| go.dot(&zk.row(j))).collect();
                let weighted: f64 = a.iter().zip(&dalpha).map(|(x, y)| x * y).sum();
                for (idx_j, &j) in list.iter().enumerate() {
                    gx.slice_mut(ndarray::s![j, range.clone()])
                        .scaled_add(a[idx_j], &go);
                    let de = a[idx_j] * (dalpha[idx_j] - weighted);
                    let pre = s[j] + t[i];
                    let dpre = if pre > 0.0 {
                        de
                    } else {
                        de * graph.negative_slope
                    };
                    ds[j] += dpre;
                    dt[i] += dpre;
                }
            }
            for j in 0..n {
                if ds[j] != 0.0 || dt[j] != 0.0 {
                    let mut row = gx.slice_mut(ndarray::s![j, range.clone()]);
                    row.scaled_add(ds[j], &asv.row(k));
                    row.scaled_add(dt[j], &adv.row(k));
                    g_src.row_mut(k).scaled_add(ds[j], &zk.row(j));
                    g_dst.row_mut(k).scaled_add(dt[j], &zk.row(j));
                }
            }
        }
        if self.wants(x) {
            accumulate(&mut grads[x.0], gx);
        }
        if self.wants(a_src) {
            accumulate(&mut grads[a_src.0], g_src);
        }
        if self.wants(a_dst) {
            accumulate(&mut grads[a_dst.0], g_dst);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    use crate::rng::rng_from_seed;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_from_seed(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(sum(out * w))/d(param) for a graph
    /// built by `f`, where `w` is a fixed random weighting of the output.
    fn check<F>(inputs: Vec<Array2<f64>>, f: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let eval = |vals: &[Array2<f64>]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone(), true)).collect();
            let out = f(&mut tape, &vars);
            (tape, vars, out)
        };
        let (tape, vars, out) = eval(&inputs);
        let weight = random(tape.value(out).nrows(), tape.value(out).ncols(), 99);
        let grads = tape.backward_with(out, weight.clone());
        let h = 1e-6;
        for (vi, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(&tape, vars[vi]);
            for idx in 0..input.len() {
                let (r, c) = (idx / input.ncols(), idx % input.ncols());
                let mut plus = inputs.clone();
                plus[vi][[r, c]] += h;
                let mut minus = inputs.clone();
                minus[vi][[r, c]] -= h;
                let (tp, _, op) = eval(&plus);
                let (tm, _, om) = eval(&minus);
                let fd = ((tp.value(op) * &weight).sum() - (tm.value(om) * &weight).sum())
                    / (2.0 * h);
                let a = analytic[[r, c]];
                assert!(
                    (fd - a).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {vi} [{r},{c}]: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn matmul_add_row_unary() {
        check(vec![random(4, 3, 1), random(3, 2, 2), random(1, 2, 3)], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let a = t.add_row(m, v[2]);
            let e = t.unary(a, Unary::Elu(1.0));
            t.unary(e, Unary::LeakyRelu(0.01))
        });
    }

    #[test]
    fn prelu_concat_mix_segment() {
        let mix = Arc::new(RowMix {
            rows: vec![vec![(0, 0.5), (1, 0.5)], vec![(1, 1.0), (2, -2.0)], vec![]],
        });
        check(
            vec![random(3, 2, 4), array![[0.25]], random(3, 1, 5)],
            move |t, v| {
                let p = t.prelu(v[0], v[1]);
                let c = t.concat_cols(p, v[2]);
                let m = t.mix(c, mix.clone());
                t.segment_mean(m, Arc::new(vec![0, 1, 1]), 2)
            },
        );
    }

    #[test]
    fn max_agg_and_attention() {
        let neighbors = vec![vec![0, 1], vec![0, 1, 2], vec![1, 2], vec![3]];
        let graph = Arc::new(AttentionGraph {
            neighbors: neighbors.clone(),
            heads: 2,
            negative_slope: 0.2,
        });
        check(
            vec![random(4, 4, 6), random(2, 2, 7), random(2, 2, 8)],
            move |t, v| {
                let a = t.attention(v[0], v[1], v[2], graph.clone());
                t.max_agg(a, &neighbors)
            },
        );
    }

    #[test]
    fn softmax_nll_normalize_rowdot() {
        check(vec![random(3, 4, 9), random(3, 4, 10)], |t, v| {
            let l = t.log_softmax(v[0]);
            let n = t.nll(l, vec![(0, 1), (2, 3)]);
            let a = t.normalize_rows(v[0]);
            let b = t.normalize_rows(v[1]);
            let d = t.row_dot(a, b);
            let e = t.row_dot(a, v[1]);
            let d = t.sub(d, e);
            let d = t.mul_const(d, Array2::from_elem((3, 1), -1.5));
            let d = t.add_scalar(d, 0.1);
            let m = t.mean(d);
            t.add(m, n)
        });
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[1.0, 2.0]]);
        let w = tape.leaf(array![[1.0], [1.0]], true);
        let y = tape.matmul(x, w);
        let grads = tape.backward(y);
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap(), &array![[1.0], [2.0]]);
    }
}
