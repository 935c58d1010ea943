//! Reverse-mode automatic differentiation on f64 matrices.
//!
//! A `Tape` records the forward computation as a flat list of nodes; calling
//! [`Tape::backward`] on a scalar output walks the list in reverse and
//! accumulates gradients for every parameter leaf. The op set is exactly what
//! the agent, mixer, and loss graphs need — including masked row softmax with
//! exact zeros off-mask, batched per-sample vec-mat products for hypernetwork
//! weights, and a fused split-loss node with analytic partials.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Axis};

use super::params::{ParamRef, ParamStore};

/// Handle to a tape node.
#[derive(Debug, Copy, Clone, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamRef),
    MatMul(Var, Var),
    Add(Var, Var),
    /// (m x n) + broadcast (1 x n).
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// scale * x + shift, elementwise.
    Affine(Var, f64, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Elu(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    Reshape(Var),
    SumAll(Var),
    SumRows(Var),
    /// (n x 1, n x 1) -> n x n with out[i][j] = s[i] + t[j].
    OuterSum(Var, Var),
    /// Row-wise softmax restricted to mask-true entries; exact zeros elsewhere.
    MaskedSoftmaxRows(Var, Array2<bool>),
    /// Multiply by a saved 0/1 keep matrix, then renormalize each row.
    DropoutRenorm(Var, Array2<f64>),
    /// w: B x (m*n) row-major blocks, x: B x n -> B x m.
    BatchedVecMat { w: Var, x: Var, out_dim: usize },
    /// Hinge sum over ordered pairs of max(delta - KL(i||j), 0) on diagonal
    /// Gaussians given as (mean, log-variance) rows.
    SplitLoss {
        mean: Var,
        logvar: Var,
        pairs: Vec<(usize, usize)>,
        delta: f64,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients keyed by parameter reference, produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<ParamRef, Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, p: ParamRef) -> Option<&Array2<f64>> {
        self.map.get(&p)
    }

    /// Sum of squares over every stored gradient.
    pub fn squared_norm(&self) -> f64 {
        self.map
            .values()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1 x 1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Const)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Leaf bound to a parameter; its gradient lands in the result map.
    pub fn param(&mut self, store: &ParamStore, p: ParamRef) -> Var {
        self.push(store.get(p).clone(), Op::Param(p))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a, b))
    }

    /// Add a 1 x n bias row to every row of a.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[bias.0].value;
        self.push(value, Op::AddRow(a, bias))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, Op::Mul(a, b))
    }

    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| scale * x + shift);
        self.push(value, Op::Affine(a, scale, shift))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(value, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(stable_sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| if x > 0.0 { x } else { x.exp() - 1.0 });
        self.push(value, Op::Elu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::abs);
        self.push(value, Op::Abs(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let value = concatenate(Axis(0), &views).expect("column counts match");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let value = self.nodes[a.0].value.slice(s![r0..r1, ..]).to_owned();
        self.push(value, Op::SliceRows(a, r0, r1))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = &self.nodes[a.0].value;
        assert_eq!(v.len(), rows * cols, "reshape element count mismatch");
        let flat: Vec<f64> = v.iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), flat).expect("shape checked");
        self.push(value, Op::Reshape(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        self.push(value, Op::SumAll(a))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let mut value = Array2::zeros((v.nrows(), 1));
        for (i, row) in v.rows().into_iter().enumerate() {
            value[[i, 0]] = row.sum();
        }
        self.push(value, Op::SumRows(a))
    }

    pub fn outer_sum(&mut self, s: Var, t: Var) -> Var {
        let sv = &self.nodes[s.0].value;
        let tv = &self.nodes[t.0].value;
        let n = sv.nrows();
        debug_assert_eq!(sv.ncols(), 1);
        debug_assert_eq!(tv.nrows(), n);
        let mut value = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                value[[i, j]] = sv[[i, 0]] + tv[[j, 0]];
            }
        }
        self.push(value, Op::OuterSum(s, t))
    }

    pub fn masked_softmax_rows(&mut self, a: Var, mask: &Array2<bool>) -> Var {
        let v = &self.nodes[a.0].value;
        let (n, m) = v.dim();
        debug_assert_eq!((n, m), mask.dim());
        let mut value = Array2::zeros((n, m));
        for i in 0..n {
            let mut max = f64::NEG_INFINITY;
            for j in 0..m {
                if mask[(i, j)] {
                    max = max.max(v[[i, j]]);
                }
            }
            if max == f64::NEG_INFINITY {
                continue; // empty row stays all-zero
            }
            let mut sum = 0.0;
            for j in 0..m {
                if mask[(i, j)] {
                    let e = (v[[i, j]] - max).exp();
                    value[[i, j]] = e;
                    sum += e;
                }
            }
            for j in 0..m {
                if mask[(i, j)] {
                    value[[i, j]] /= sum;
                }
            }
        }
        self.push(value, Op::MaskedSoftmaxRows(a, mask.clone()))
    }

    /// `keep` is a 0/1 matrix; rows are renormalized after masking. The caller
    /// guarantees every row retains at least one nonzero entry.
    pub fn dropout_renorm(&mut self, a: Var, keep: Array2<f64>) -> Var {
        let v = &self.nodes[a.0].value;
        let (n, m) = v.dim();
        let mut value = Array2::zeros((n, m));
        for i in 0..n {
            let mut sum = 0.0;
            for j in 0..m {
                sum += v[[i, j]] * keep[[i, j]];
            }
            debug_assert!(sum > 0.0, "dropout removed an entire attention row");
            for j in 0..m {
                value[[i, j]] = v[[i, j]] * keep[[i, j]] / sum;
            }
        }
        self.push(value, Op::DropoutRenorm(a, keep))
    }

    pub fn batched_vecmat(&mut self, w: Var, x: Var) -> Var {
        let wv = &self.nodes[w.0].value;
        let xv = &self.nodes[x.0].value;
        let b = wv.nrows();
        let n = xv.ncols();
        debug_assert_eq!(xv.nrows(), b);
        debug_assert_eq!(wv.ncols() % n, 0, "weight block width must divide");
        let m = wv.ncols() / n;
        let mut value = Array2::zeros((b, m));
        for bi in 0..b {
            for i in 0..m {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += wv[[bi, i * n + j]] * xv[[bi, j]];
                }
                value[[bi, i]] = acc;
            }
        }
        self.push(value, Op::BatchedVecMat { w, x, out_dim: m })
    }

    /// Split-loss node: sum over the given ordered pairs (i, j) of
    /// max(delta - KL(N_i || N_j), 0), beliefs given as rows of (mean,
    /// log-variance).
    pub fn split_loss(&mut self, mean: Var, logvar: Var, pairs: Vec<(usize, usize)>, delta: f64) -> Var {
        let mv = &self.nodes[mean.0].value;
        let lv = &self.nodes[logvar.0].value;
        let mut total = 0.0;
        for &(i, j) in &pairs {
            let kl = kl_rows(mv, lv, i, j);
            total += (delta - kl).max(0.0);
        }
        self.push(
            Array2::from_elem((1, 1), total),
            Op::SplitLoss { mean, logvar, pairs, delta },
        )
    }

    /// Backpropagate from a scalar root. Parameter-leaf gradients are
    /// returned; everything else is discarded.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Const => {}
                Op::Param(_) => {
                    grads[idx] = Some(g); // keep for collection below
                }
                Op::MatMul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    accumulate(&mut grads, *a, g.dot(&bv.t()));
                    accumulate(&mut grads, *b, av.t().dot(&g));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(a, bias) => {
                    let mut brow = Array2::zeros((1, g.ncols()));
                    for r in g.rows() {
                        for (j, x) in r.iter().enumerate() {
                            brow[[0, j]] += x;
                        }
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *bias, brow);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    accumulate(&mut grads, *a, &g * &bv);
                    accumulate(&mut grads, *b, &g * &av);
                }
                Op::Affine(a, scale, _) => {
                    accumulate(&mut grads, *a, g.mapv(|x| x * scale));
                }
                Op::Relu(a) => {
                    let av = &self.nodes[a.0].value;
                    let da = Array2::from_shape_fn(g.dim(), |ix| {
                        if av[ix] > 0.0 { g[ix] } else { 0.0 }
                    });
                    accumulate(&mut grads, *a, da);
                }
                Op::LeakyRelu(a, slope) => {
                    let av = &self.nodes[a.0].value;
                    let slope = *slope;
                    let da = Array2::from_shape_fn(g.dim(), |ix| {
                        if av[ix] > 0.0 { g[ix] } else { slope * g[ix] }
                    });
                    accumulate(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let yv = &self.nodes[idx].value;
                    let da = Array2::from_shape_fn(g.dim(), |ix| g[ix] * yv[ix] * (1.0 - yv[ix]));
                    accumulate(&mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    let yv = &self.nodes[idx].value;
                    let da = Array2::from_shape_fn(g.dim(), |ix| g[ix] * (1.0 - yv[ix] * yv[ix]));
                    accumulate(&mut grads, *a, da);
                }
                Op::Exp(a) => {
                    let yv = &self.nodes[idx].value;
                    accumulate(&mut grads, *a, &g * yv);
                }
                Op::Elu(a) => {
                    let av = &self.nodes[a.0].value;
                    let da = Array2::from_shape_fn(g.dim(), |ix| {
                        if av[ix] > 0.0 { g[ix] } else { g[ix] * av[ix].exp() }
                    });
                    accumulate(&mut grads, *a, da);
                }
                Op::Abs(a) => {
                    let av = &self.nodes[a.0].value;
                    let da = Array2::from_shape_fn(g.dim(), |ix| g[ix] * av[ix].signum());
                    accumulate(&mut grads, *a, da);
                }
                Op::Clamp(a, lo, hi) => {
                    let av = &self.nodes[a.0].value;
                    let (lo, hi) = (*lo, *hi);
                    let da = Array2::from_shape_fn(g.dim(), |ix| {
                        if av[ix] >= lo && av[ix] <= hi { g[ix] } else { 0.0 }
                    });
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    for part in parts {
                        let rows = self.nodes[part.0].value.nrows();
                        let slice = g.slice(s![r0..r0 + rows, ..]).to_owned();
                        accumulate(&mut grads, *part, slice);
                        r0 += rows;
                    }
                }
                Op::SliceRows(a, r0, r1) => {
                    let av = &self.nodes[a.0].value;
                    let mut da = Array2::zeros(av.dim());
                    da.slice_mut(s![*r0..*r1, ..]).assign(&g);
                    accumulate(&mut grads, *a, da);
                }
                Op::Reshape(a) => {
                    let av = &self.nodes[a.0].value;
                    let flat: Vec<f64> = g.iter().copied().collect();
                    let da = Array2::from_shape_vec(av.dim(), flat).expect("same element count");
                    accumulate(&mut grads, *a, da);
                }
                Op::SumAll(a) => {
                    let av = &self.nodes[a.0].value;
                    accumulate(&mut grads, *a, Array2::from_elem(av.dim(), g[[0, 0]]));
                }
                Op::SumRows(a) => {
                    let av = &self.nodes[a.0].value;
                    let da = Array2::from_shape_fn(av.dim(), |(i, _)| g[[i, 0]]);
                    accumulate(&mut grads, *a, da);
                }
                Op::OuterSum(sv, tv) => {
                    let n = g.nrows();
                    let mut ds = Array2::zeros((n, 1));
                    let mut dt = Array2::zeros((n, 1));
                    for i in 0..n {
                        for j in 0..n {
                            ds[[i, 0]] += g[[i, j]];
                            dt[[j, 0]] += g[[i, j]];
                        }
                    }
                    accumulate(&mut grads, *sv, ds);
                    accumulate(&mut grads, *tv, dt);
                }
                Op::MaskedSoftmaxRows(a, mask) => {
                    let yv = &self.nodes[idx].value;
                    let (n, m) = yv.dim();
                    let mut da = Array2::zeros((n, m));
                    for i in 0..n {
                        let mut dot = 0.0;
                        for j in 0..m {
                            if mask[(i, j)] {
                                dot += g[[i, j]] * yv[[i, j]];
                            }
                        }
                        for j in 0..m {
                            if mask[(i, j)] {
                                da[[i, j]] = yv[[i, j]] * (g[[i, j]] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::DropoutRenorm(a, keep) => {
                    let av = &self.nodes[a.0].value;
                    let (n, m) = av.dim();
                    let mut da = Array2::zeros((n, m));
                    for i in 0..n {
                        let mut sum = 0.0;
                        for j in 0..m {
                            sum += av[[i, j]] * keep[[i, j]];
                        }
                        // y_j = w_j / S with w = a .* keep
                        let mut gy_dot_y = 0.0;
                        for j in 0..m {
                            gy_dot_y += g[[i, j]] * av[[i, j]] * keep[[i, j]] / sum;
                        }
                        for j in 0..m {
                            da[[i, j]] = keep[[i, j]] * (g[[i, j]] - gy_dot_y) / sum;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::BatchedVecMat { w, x, out_dim } => {
                    let wv = &self.nodes[w.0].value;
                    let xv = &self.nodes[x.0].value;
                    let b = wv.nrows();
                    let n = xv.ncols();
                    let m = *out_dim;
                    let mut dw = Array2::zeros(wv.dim());
                    let mut dx = Array2::zeros(xv.dim());
                    for bi in 0..b {
                        for i in 0..m {
                            let gi = g[[bi, i]];
                            for j in 0..n {
                                dw[[bi, i * n + j]] += gi * xv[[bi, j]];
                                dx[[bi, j]] += gi * wv[[bi, i * n + j]];
                            }
                        }
                    }
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *x, dx);
                }
                Op::SplitLoss { mean, logvar, pairs, delta } => {
                    let mv = &self.nodes[mean.0].value;
                    let lv = &self.nodes[logvar.0].value;
                    let d = mv.ncols();
                    let gs = g[[0, 0]];
                    let mut dmean = Array2::zeros(mv.dim());
                    let mut dlogvar = Array2::zeros(lv.dim());
                    for &(i, j) in pairs {
                        let kl = kl_rows(mv, lv, i, j);
                        if kl >= *delta {
                            continue; // inactive hinge: exactly zero gradient
                        }
                        // d/dx of max(delta - KL, 0) is -dKL/dx here.
                        for c in 0..d {
                            let du = mv[[i, c]] - mv[[j, c]];
                            let e_i = lv[[i, c]].exp();
                            let e_nj = (-lv[[j, c]]).exp();
                            dmean[[i, c]] += gs * -(du * e_nj);
                            dmean[[j, c]] += gs * (du * e_nj);
                            dlogvar[[i, c]] += gs * -(0.5 * (e_i * e_nj - 1.0));
                            dlogvar[[j, c]] += gs * -(0.5 * (1.0 - (e_i + du * du) * e_nj));
                        }
                    }
                    accumulate(&mut grads, *mean, dmean);
                    accumulate(&mut grads, *logvar, dlogvar);
                }
            }
        }

        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(p) = node.op {
                if let Some(g) = grads[idx].take() {
                    out.map
                        .entry(p)
                        .and_modify(|acc| *acc += &g)
                        .or_insert(g);
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// KL(N_i || N_j) between diagonal Gaussians stored as rows of mean and
/// log-variance matrices.
fn kl_rows(mean: &Array2<f64>, logvar: &Array2<f64>, i: usize, j: usize) -> f64 {
    let d = mean.ncols();
    let mut kl = 0.0;
    for c in 0..d {
        let du = mean[[i, c]] - mean[[j, c]];
        kl += 0.5
            * (logvar[[j, c]] - logvar[[i, c]]
                + (logvar[[i, c]].exp() + du * du) * (-logvar[[j, c]]).exp()
                - 1.0);
    }
    kl
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdiff;
    use ndarray::array;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Gradcheck a scalar function of a single parameter store.
    fn check<F>(store: &mut ParamStore, f: F, tol: f64)
    where
        F: Fn(&ParamStore, &mut Tape) -> Var,
    {
        let analytic = {
            let mut tape = Tape::new();
            let root = f(store, &mut tape);
            tape.backward(root)
        };
        let worst = fdiff::max_param_error(store, &analytic, |s| {
            let mut tape = Tape::new();
            let root = f(s, &mut tape);
            tape.scalar(root)
        });
        assert!(worst <= tol, "gradcheck failed: worst rel err {worst}");
    }

    #[test]
    fn matmul_chain_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new(9);
        let a = store.add("a", randn(3, 4, &mut rng));
        let b = store.add("b", randn(4, 2, &mut rng));
        check(
            &mut store,
            |s, t| {
                let av = t.param(s, a);
                let bv = t.param(s, b);
                let c = t.matmul(av, bv);
                let c = t.tanh(c);
                t.sum_all(c)
            },
            1e-7,
        );
    }

    #[test]
    fn activation_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new(9);
        let a = store.add("a", randn(4, 5, &mut rng));
        check(
            &mut store,
            |s, t| {
                let av = t.param(s, a);
                let x1 = t.sigmoid(av);
                let x2 = t.elu(av);
                let x3 = t.leaky_relu(av, 0.2);
                let x4 = t.exp(av);
                let x5 = t.abs(av);
                let y1 = t.add(x1, x2);
                let y2 = t.add(x3, x4);
                let y3 = t.add(y1, y2);
                let y4 = t.add(y3, x5);
                t.sum_all(y4)
            },
            1e-6,
        );
    }

    #[test]
    fn structural_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new(9);
        let a = store.add("a", randn(6, 4, &mut rng));
        check(
            &mut store,
            |s, t| {
                let av = t.param(s, a);
                let top = t.slice_rows(av, 0, 3);
                let bottom = t.slice_rows(av, 3, 6);
                let joined = t.concat_rows(&[bottom, top]);
                let wide = t.reshape(joined, 3, 8);
                let rows = t.sum_rows(wide);
                let sq = t.mul(rows, rows);
                t.sum_all(sq)
            },
            1e-7,
        );
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_with_exact_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let scores = tape.constant(randn(5, 5, &mut rng));
        let mask = Array2::from_shape_fn((5, 5), |(i, j)| i == j || (i + j) % 3 == 0);
        let alpha = tape.masked_softmax_rows(scores, &mask);
        let v = tape.value(alpha);
        for i in 0..5 {
            let row_sum: f64 = (0..5).map(|j| v[[i, j]]).sum();
            assert!((row_sum - 1.0).abs() <= 1e-6);
            for j in 0..5 {
                if !mask[(i, j)] {
                    assert_eq!(v[[i, j]], 0.0, "off-mask entry not exactly zero");
                }
            }
        }
    }

    #[test]
    fn masked_softmax_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new(9);
        let a = store.add("a", randn(4, 4, &mut rng));
        let mask = Array2::from_shape_fn((4, 4), |(i, j)| i == j || (i + 2 * j) % 3 == 0);
        let weights = randn(4, 4, &mut rng);
        check(
            &mut store,
            |s, t| {
                let av = t.param(s, a);
                let alpha = t.masked_softmax_rows(av, &mask);
                let wv = t.constant(weights.clone());
                let weighted = t.mul(alpha, wv);
                t.sum_all(weighted)
            },
            1e-6,
        );
    }

    #[test]
    fn dropout_renorm_gradcheck_and_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new(9);
        // Positive entries so rows renormalize cleanly.
        let a = store.add("a", randn(3, 4, &mut rng).mapv(|x| x.abs() + 0.1));
        let mut keep = Array2::ones((3, 4));
        keep[[0, 1]] = 0.0;
        keep[[2, 0]] = 0.0;
        keep[[2, 3]] = 0.0;
        let keep2 = keep.clone();
        check(
            &mut store,
            move |s, t| {
                let av = t.param(s, a);
                let y = t.dropout_renorm(av, keep2.clone());
                let w = t.constant(array![[1.0, -2.0, 0.5, 3.0], [0.3, 1.0, 1.0, -1.0], [2.0, 0.1, -0.4, 1.0]]);
                let z = t.mul(y, w);
                t.sum_all(z)
            },
            1e-6,
        );
        let mut tape = Tape::new();
        let av = tape.param(&store, a);
        let y = tape.dropout_renorm(av, keep);
        for i in 0..3 {
            let row_sum: f64 = (0..4).map(|j| tape.value(y)[[i, j]]).sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_vecmat_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new(9);
        let w = store.add("w", randn(3, 8, &mut rng)); // B=3, m=2, n=4
        let x = store.add("x", randn(3, 4, &mut rng));
        check(
            &mut store,
            |s, t| {
                let wv = t.param(s, w);
                let xv = t.param(s, x);
                let y = t.batched_vecmat(wv, xv);
                let y2 = t.mul(y, y);
                t.sum_all(y2)
            },
            1e-6,
        );
        // Value check against a tiny hand computation.
        let mut tape = Tape::new();
        let wv = tape.constant(array![[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]]);
        let xv = tape.constant(array![[1.0, 0.0, -1.0, 2.0]]);
        let y = tape.batched_vecmat(wv, xv);
        assert_eq!(tape.value(y), &array![[1.0 - 3.0 + 8.0, 5.0 - 7.0 + 16.0]]);
    }

    #[test]
    fn outer_sum_and_clamp_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new(9);
        let s_ = store.add("s", randn(4, 1, &mut rng));
        let t_ = store.add("t", randn(4, 1, &mut rng));
        check(
            &mut store,
            |s, t| {
                let sv = t.param(s, s_);
                let tv = t.param(s, t_);
                let e = t.outer_sum(sv, tv);
                let c = t.clamp(e, -0.8, 0.8);
                let c2 = t.mul(c, c);
                t.sum_all(c2)
            },
            1e-6,
        );
    }

    #[test]
    fn split_loss_gradcheck_active_and_inactive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new(9);
        // Small spread keeps several pair KLs below delta (active hinge).
        let mean = store.add("mean", randn(5, 3, &mut rng).mapv(|x| 0.05 * x));
        let logvar = store.add("logvar", randn(5, 3, &mut rng).mapv(|x| 0.05 * x));
        let pairs: Vec<(usize, usize)> = (0..5)
            .flat_map(|i| (0..5).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect();
        let pairs2 = pairs.clone();
        check(
            &mut store,
            move |s, t| {
                let m = t.param(s, mean);
                let l = t.param(s, logvar);
                t.split_loss(m, l, pairs2.clone(), 0.01)
            },
            1e-6,
        );
        // Far-apart beliefs: every hinge inactive, gradient exactly zero.
        let mut far = ParamStore::new(9);
        let fm = far.add("mean", array![[10.0, 0.0], [-10.0, 0.0]]);
        let fl = far.add("logvar", Array2::zeros((2, 2)));
        let mut tape = Tape::new();
        let m = tape.param(&far, fm);
        let l = tape.param(&far, fl);
        let loss = tape.split_loss(m, l, vec![(0, 1), (1, 0)], 0.005);
        assert_eq!(tape.scalar(loss), 0.0);
        let grads = tape.backward(loss);
        let gm = grads.get(fm).unwrap();
        assert!(gm.iter().all(|&x| x == 0.0));
    }
}
