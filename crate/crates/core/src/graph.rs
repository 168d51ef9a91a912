//! Reverse-mode automatic differentiation on a flat tape of 2-d arrays.
//!
//! Every value is an `Array2<f64>`; row vectors are shaped `(1, d)` and
//! scalars `(1, 1)`. Parameters are referenced by name and gradients are
//! accumulated into a name-keyed map, which keeps staged optimization
//! (separate update sets per sub-step) straightforward.

use std::collections::HashMap;

use ndarray::{Array2, Axis};

use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

pub type Gradients = HashMap<String, Array2<f64>>;

enum Op {
    /// Leaf bound to a named parameter.
    Param(String),
    /// Leaf with no gradient.
    Constant,
    Add(Var, Var),
    /// (n, d) + (1, d) broadcast over rows.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    /// a (n, k) * b^T with b (m, k) -> (n, m).
    MatMulTransB(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    /// Row-wise softmax; any additive mask is applied upstream.
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    /// Row lookup: out[i] = table[idx[i]].
    Gather { table: Var, idx: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    /// Weighted sum of rows -> (1, d); weights are fixed (not differentiated).
    WeightedSumRows { x: Var, w: Vec<f64> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize, end: usize },
    SumAll(Var),
    /// Mean over rows of -log softmax(logits)[target] -> (1, 1).
    MeanCrossEntropyRows { logits: Var, targets: Vec<usize> },
    /// Numerically stable binary cross-entropy on a (1, 1) logit.
    BceWithLogit { logit: Var, label: f64 },
    /// Squared L2 distance between two (1, d) rows -> (1, 1).
    SqDist(Var, Var),
    /// max(0, margin - ||a - b||_2) -> (1, 1).
    HingeDist { a: Var, b: Var, margin: f64 },
    /// Identity forward, gradient scaled by -lambda on the way back.
    GradReverse { x: Var, lambda: f64 },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn gelu(x: f64) -> f64 {
    // tanh approximation
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

const LN_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        let value = store.get(name).clone();
        self.push(value, Op::Param(name.to_string()))
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.nodes[row.0].value.nrows(), 1);
        let v = &self.nodes[a.0].value + &self.nodes[row.0].value;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_trans_b(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        self.push(v, Op::MatMulTransB(a, b))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|e| (e - m).exp());
            let s: f64 = row.sum();
            row.mapv_inplace(|e| e / s);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let a = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let d = a.ncols() as f64;
        let mut out = Array2::zeros(a.raw_dim());
        for (i, row) in a.rows().into_iter().enumerate() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (j, v) in row.iter().enumerate() {
                out[[i, j]] = (v - mean) * inv * g[[0, j]] + b[[0, j]];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta })
    }

    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = &self.nodes[table.0].value;
        let mut out = Array2::zeros((idx.len(), t.ncols()));
        for (i, &j) in idx.iter().enumerate() {
            out.row_mut(i).assign(&t.row(j));
        }
        self.push(
            out,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let t = &self.nodes[x.0].value;
        let mut out = Array2::zeros((idx.len(), t.ncols()));
        for (i, &j) in idx.iter().enumerate() {
            out.row_mut(i).assign(&t.row(j));
        }
        self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Weighted sum of rows with fixed weights; pass normalized weights for a mean.
    pub fn weighted_sum_rows(&mut self, x: Var, w: &[f64]) -> Var {
        let a = &self.nodes[x.0].value;
        debug_assert_eq!(a.nrows(), w.len());
        let mut out = Array2::zeros((1, a.ncols()));
        for (row, &wi) in a.rows().into_iter().zip(w) {
            if wi != 0.0 {
                out.row_mut(0).scaled_add(wi, &row);
            }
        }
        self.push(
            out,
            Op::WeightedSumRows {
                x,
                w: w.to_vec(),
            },
        )
    }

    /// Mean over rows marked valid in `mask`.
    pub fn masked_mean_rows(&mut self, x: Var, mask: &[bool]) -> Var {
        let n = mask.iter().filter(|&&m| m).count().max(1) as f64;
        let w: Vec<f64> = mask.iter().map(|&m| if m { 1.0 / n } else { 0.0 }).collect();
        self.weighted_sum_rows(x, &w)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.nodes[parts[0].0].value.nrows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.ncols()).sum();
        let mut out = Array2::zeros((n, total));
        let mut off = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            out.slice_mut(ndarray::s![.., off..off + v.ncols()]).assign(v);
            off += v.ncols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.nodes[x.0].value.slice(ndarray::s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols { x, start, end })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(x))
    }

    pub fn mean_cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let l = &self.nodes[logits.0].value;
        debug_assert_eq!(l.nrows(), targets.len());
        let mut loss = 0.0;
        for (row, &t) in l.rows().into_iter().zip(targets) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        loss /= targets.len().max(1) as f64;
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::MeanCrossEntropyRows {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    pub fn bce_with_logit(&mut self, logit: Var, label: f64) -> Var {
        let z = self.nodes[logit.0].value[[0, 0]];
        // softplus(z) - label * z, stable for both signs
        let loss = z.max(0.0) - label * z + (-z.abs()).exp().ln_1p();
        self.push(Array2::from_elem((1, 1), loss), Op::BceWithLogit { logit, label })
    }

    pub fn sq_dist(&mut self, a: Var, b: Var) -> Var {
        let d = (&self.nodes[a.0].value - &self.nodes[b.0].value)
            .mapv(|v| v * v)
            .sum();
        self.push(Array2::from_elem((1, 1), d), Op::SqDist(a, b))
    }

    pub fn hinge_dist(&mut self, a: Var, b: Var, margin: f64) -> Var {
        let dist = (&self.nodes[a.0].value - &self.nodes[b.0].value)
            .mapv(|v| v * v)
            .sum()
            .sqrt();
        let loss = (margin - dist).max(0.0);
        self.push(Array2::from_elem((1, 1), loss), Op::HingeDist { a, b, margin })
    }

    /// Passes the value forward while blocking all gradient flow.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.push(v, Op::Constant)
    }

    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.push(v, Op::GradReverse { x, lambda })
    }

    /// Backpropagate from a scalar loss node. Returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Array2::from_elem((1, 1), 1.0));
        let mut grads: Gradients = HashMap::new();

        let acc = |adj: &mut Vec<Option<Array2<f64>>>, v: Var, g: Array2<f64>| match &mut adj
            [v.0]
        {
            Some(a) => *a += &g,
            slot => *slot = Some(g),
        };

        for i in (0..self.nodes.len()).rev() {
            let Some(up) = adj[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Param(name) => match grads.get_mut(name) {
                    Some(g) => *g += &up,
                    None => {
                        grads.insert(name.clone(), up);
                    }
                },
                Op::Constant => {}
                Op::Add(a, b) => {
                    acc(&mut adj, *a, up.clone());
                    acc(&mut adj, *b, up);
                }
                Op::AddRow(a, row) => {
                    let rg = up.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut adj, *a, up);
                    acc(&mut adj, *row, rg);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, up.clone());
                    acc(&mut adj, *b, -up);
                }
                Op::Mul(a, b) => {
                    let ga = &up * &self.nodes[b.0].value;
                    let gb = &up * &self.nodes[a.0].value;
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Scale(a, c) => acc(&mut adj, *a, &up * *c),
                Op::MatMul(a, b) => {
                    let ga = up.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&up);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::MatMulTransB(a, b) => {
                    let ga = up.dot(&self.nodes[b.0].value);
                    let gb = up.t().dot(&self.nodes[a.0].value);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    acc(&mut adj, *a, &up * &(y * &(1.0 - y)));
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    acc(&mut adj, *a, &up * &(1.0 - y * y));
                }
                Op::Gelu(a) => {
                    let x = &self.nodes[a.0].value;
                    acc(&mut adj, *a, &up * &x.mapv(gelu_grad));
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let mut g = Array2::zeros(y.raw_dim());
                    for ((mut gr, yr), ur) in
                        g.rows_mut().into_iter().zip(y.rows()).zip(up.rows())
                    {
                        let dot: f64 = yr.iter().zip(ur.iter()).map(|(a, b)| a * b).sum();
                        for (gi, (yi, ui)) in gr.iter_mut().zip(yr.iter().zip(ur.iter())) {
                            *gi = yi * (ui - dot);
                        }
                    }
                    acc(&mut adj, *a, g);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let a = &self.nodes[x.0].value;
                    let g = &self.nodes[gamma.0].value;
                    let d = a.ncols() as f64;
                    let mut gx = Array2::zeros(a.raw_dim());
                    let mut gg = Array2::zeros((1, a.ncols()));
                    let mut gb = Array2::zeros((1, a.ncols()));
                    for (i_row, row) in a.rows().into_iter().enumerate() {
                        let mean = row.sum() / d;
                        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        // xhat and upstream-through-gamma
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        let dy: Vec<f64> = (0..a.ncols())
                            .map(|j| up[[i_row, j]] * g[[0, j]])
                            .collect();
                        let dy_sum: f64 = dy.iter().sum();
                        let dy_xhat: f64 = dy.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        for j in 0..a.ncols() {
                            gx[[i_row, j]] =
                                inv * (dy[j] - dy_sum / d - xhat[j] * dy_xhat / d);
                            gg[[0, j]] += up[[i_row, j]] * xhat[j];
                            gb[[0, j]] += up[[i_row, j]];
                        }
                    }
                    acc(&mut adj, *x, gx);
                    acc(&mut adj, *gamma, gg);
                    acc(&mut adj, *beta, gb);
                }
                Op::Gather { table, idx } => {
                    let t = &self.nodes[table.0].value;
                    let mut g = Array2::zeros(t.raw_dim());
                    for (i_row, &j) in idx.iter().enumerate() {
                        g.row_mut(j).scaled_add(1.0, &up.row(i_row));
                    }
                    acc(&mut adj, *table, g);
                }
                Op::GatherRows { x, idx } => {
                    let t = &self.nodes[x.0].value;
                    let mut g = Array2::zeros(t.raw_dim());
                    for (i_row, &j) in idx.iter().enumerate() {
                        g.row_mut(j).scaled_add(1.0, &up.row(i_row));
                    }
                    acc(&mut adj, *x, g);
                }
                Op::WeightedSumRows { x, w } => {
                    let n = self.nodes[x.0].value.nrows();
                    let d = self.nodes[x.0].value.ncols();
                    let mut g = Array2::zeros((n, d));
                    for (i_row, &wi) in w.iter().enumerate() {
                        if wi != 0.0 {
                            g.row_mut(i_row).scaled_add(wi, &up.row(0));
                        }
                    }
                    acc(&mut adj, *x, g);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.ncols();
                        let g = up.slice(ndarray::s![.., off..off + w]).to_owned();
                        acc(&mut adj, *p, g);
                        off += w;
                    }
                }
                Op::SliceCols { x, start, end } => {
                    let v = &self.nodes[x.0].value;
                    let mut g = Array2::zeros(v.raw_dim());
                    g.slice_mut(ndarray::s![.., *start..*end]).assign(&up);
                    acc(&mut adj, *x, g);
                }
                Op::SumAll(x) => {
                    let v = &self.nodes[x.0].value;
                    acc(&mut adj, *x, Array2::from_elem(v.raw_dim(), up[[0, 0]]));
                }
                Op::MeanCrossEntropyRows { logits, targets } => {
                    let l = &self.nodes[logits.0].value;
                    let scale = up[[0, 0]] / targets.len().max(1) as f64;
                    let mut g = Array2::zeros(l.raw_dim());
                    for ((mut gr, row), &t) in
                        g.rows_mut().into_iter().zip(l.rows()).zip(targets)
                    {
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                        for (j, (gi, v)) in gr.iter_mut().zip(row.iter()).enumerate() {
                            let p = (v - m).exp() / z;
                            *gi = scale * (p - if j == t { 1.0 } else { 0.0 });
                        }
                    }
                    acc(&mut adj, *logits, g);
                }
                Op::BceWithLogit { logit, label } => {
                    let z = self.nodes[logit.0].value[[0, 0]];
                    let p = 1.0 / (1.0 + (-z).exp());
                    let g = Array2::from_elem((1, 1), up[[0, 0]] * (p - label));
                    acc(&mut adj, *logit, g);
                }
                Op::SqDist(a, b) => {
                    let diff = &self.nodes[a.0].value - &self.nodes[b.0].value;
                    let g = &diff * (2.0 * up[[0, 0]]);
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, -g);
                }
                Op::HingeDist { a, b, margin } => {
                    let diff = &self.nodes[a.0].value - &self.nodes[b.0].value;
                    let dist = diff.mapv(|v| v * v).sum().sqrt();
                    if dist < *margin && dist > 1e-12 {
                        // d/da max(0, m - ||a-b||) = -(a-b)/||a-b||
                        let g = &diff * (-up[[0, 0]] / dist);
                        acc(&mut adj, *a, g.clone());
                        acc(&mut adj, *b, -g);
                    }
                }
                Op::GradReverse { x, lambda } => {
                    acc(&mut adj, *x, &up * (-*lambda));
                }
            }
        }
        grads
    }
}

/// Max relative error between analytic gradients and central finite
/// differences, sampled over up to `samples_per_param` coordinates of each
/// parameter. The scalar function is re-evaluated from a perturbed copy of
/// the store, so it stays independent of the backward pass it checks.
pub fn grad_check<F>(
    store: &ParamStore,
    grads: &Gradients,
    mut f: F,
    epsilon: f64,
    samples_per_param: usize,
) -> f64
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut worst: f64 = 0.0;
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in &names {
        let shape = store.get(name).raw_dim();
        let total = shape[0] * shape[1];
        let step = (total / samples_per_param.max(1)).max(1);
        for flat in (0..total).step_by(step) {
            let (r, c) = (flat / shape[1], flat % shape[1]);
            let analytic = grads.get(name).map_or(0.0, |g| g[[r, c]]);
            let mut perturbed = store.clone();
            let base = store.get(name)[[r, c]];
            perturbed.get_mut(name)[[r, c]] = base + epsilon;
            let fp = f(&perturbed);
            perturbed.get_mut(name)[[r, c]] = base - epsilon;
            let fm = f(&perturbed);
            assert!(fp.is_finite() && fm.is_finite(), "non-finite objective");
            let numeric = (fp - fm) / (2.0 * epsilon);
            let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}
