//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records one forward pass. Leaves are constants or parameters
//! borrowed from a [`ParamStore`]; [`Tape::backward`] walks the record in
//! reverse and accumulates parameter gradients into the store. Nodes whose
//! inputs are all constants or frozen parameters never receive a gradient.

use super::Matrix;
use crate::error::{Error, Result};
use crate::par;

/// Log floor shared by cross-entropy and entropy.
pub const LOG_EPSILON: f64 = 1e-12;
pub const LAYER_NORM_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its gradient and adaptive-moment state.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
    pub moment1: Matrix,
    pub moment2: Matrix,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let (r, c) = value.shape();
        Self {
            value,
            grad: Matrix::zeros(r, c),
            moment1: Matrix::zeros(r, c),
            moment2: Matrix::zeros(r, c),
        }
    }
}

/// Owns every parameter of a model. Cloning it is how adapted state is
/// snapshotted and restored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    names: Vec<String>,
    trainable: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; new parameters start frozen.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.params.push(Param::new(value));
        self.names.push(name.into());
        self.trainable.push(false);
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, ids: &[ParamId], on: bool) {
        for id in ids {
            self.trainable[id.0] = on;
        }
    }

    pub fn freeze_all(&mut self) {
        self.trainable.iter_mut().for_each(|t| *t = false);
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Resets values and optimizer moments to `snapshot`, keeping the current
    /// trainable flags.
    pub fn restore_from(&mut self, snapshot: &ParamStore) {
        assert_eq!(self.len(), snapshot.len(), "snapshot from a different model");
        self.params.clone_from(&snapshot.params);
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    WeightedSum(Vec<(Var, f64)>),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    SoftmaxRows {
        x: Var,
        tau: f64,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    MeanGroups {
        x: Var,
        offsets: Vec<usize>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        offsets: Vec<usize>,
        heads: usize,
        // per (group, head), row-major over groups
        probs: Vec<Matrix>,
    },
    CrossEntropy {
        logits: Var,
        targets: Matrix,
        tau: f64,
        probs: Matrix,
    },
    EntropyRows(Var),
    SquaredSum(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

fn shape_err(what: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::arg(format!("{what}: incompatible shapes {a:?} and {b:?}"))
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    const K: f64 = 0.044_715;
    let u = C * (x + K * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * K * x * x);
    (y, dy)
}

/// Row-wise softmax of `x / tau` with max subtraction.
pub(crate) fn softmax_matrix(x: &Matrix, tau: f64) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - m) / tau).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

fn check_offsets(offsets: &[usize], rows: usize) -> Result<()> {
    if offsets.len() < 2 || offsets[0] != 0 || *offsets.last().unwrap() != rows {
        return Err(Error::arg("group offsets must start at 0 and end at the row count"));
    }
    if offsets.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::arg("group offsets must be strictly increasing"));
    }
    Ok(())
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Constant, false)
    }

    /// Leaf for a stored parameter; it receives gradients only if trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), store.is_trainable(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let n = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMul(a, b), n))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        let n = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMulNt(a, b), n))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let n = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), n))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (am, rm) = (self.value(a), self.value(row));
        if rm.rows() != 1 || rm.cols() != am.cols() {
            return Err(shape_err("add_row", am.shape(), rm.shape()));
        }
        let mut v = am.clone();
        for i in 0..v.rows() {
            v.row_mut(i).iter_mut().zip(rm.data()).for_each(|(x, b)| *x += b);
        }
        let n = self.needs(a) || self.needs(row);
        Ok(self.push(v, Op::AddRow(a, row), n))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let n = self.needs(a);
        self.push(v, Op::Scale(a, s), n)
    }

    /// `sum_i w_i * x_i` over same-shaped inputs, accumulated in index order.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms.first().ok_or_else(|| Error::arg("weighted_sum of nothing"))?;
        let shape = self.value(first).shape();
        let mut v = Matrix::zeros(shape.0, shape.1);
        for &(t, w) in terms {
            if self.value(t).shape() != shape {
                return Err(shape_err("weighted_sum", shape, self.value(t).shape()));
            }
            v.add_scaled(self.value(t), w);
        }
        let n = terms.iter().any(|&(t, _)| self.needs(t));
        Ok(self.push(v, Op::WeightedSum(terms.to_vec()), n))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| gelu_parts(x).0);
        let n = self.needs(a);
        self.push(v, Op::Gelu(a), n)
    }

    /// Per-row standardization followed by the affine `gamma`, `beta` (both `1 x cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xm = self.value(x);
        let d = xm.cols();
        for p in [gamma, beta] {
            if self.value(p).shape() != (1, d) {
                return Err(shape_err("layer_norm affine", (1, d), self.value(p).shape()));
            }
        }
        let (g, b) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        let mut xhat = xm.clone();
        let mut inv_std = Vec::with_capacity(xm.rows());
        for i in 0..xhat.rows() {
            let row = xhat.row_mut(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPSILON).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let mut y = xhat.clone();
        for i in 0..y.rows() {
            for (j, v) in y.row_mut(i).iter_mut().enumerate() {
                *v = *v * g[j] + b[j];
            }
        }
        let n = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            n,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::arg(format!("softmax temperature must be > 0, got {tau}")));
        }
        let v = softmax_matrix(self.value(x), tau);
        let n = self.needs(x);
        Ok(self.push(v, Op::SoftmaxRows { x, tau }, n))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let mut v = self.value(x).clone();
        let mut norms = Vec::with_capacity(v.rows());
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let n = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n < 1e-12 {
                return Err(Error::Numeric(format!("row {i} has zero norm")));
            }
            row.iter_mut().for_each(|a| *a /= n);
            norms.push(n);
        }
        let n = self.needs(x);
        Ok(self.push(v, Op::L2NormalizeRows { x, norms }, n))
    }

    /// Mean of each row block `offsets[g]..offsets[g+1]`.
    pub fn mean_groups(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        let xm = self.value(x);
        check_offsets(offsets, xm.rows())?;
        let g = offsets.len() - 1;
        let mut v = Matrix::zeros(g, xm.cols());
        for gi in 0..g {
            let (s, e) = (offsets[gi], offsets[gi + 1]);
            let inv = 1.0 / (e - s) as f64;
            for r in s..e {
                v.row_mut(gi).iter_mut().zip(xm.row(r)).for_each(|(o, a)| *o += a * inv);
            }
        }
        let n = self.needs(x);
        Ok(self.push(
            v,
            Op::MeanGroups {
                x,
                offsets: offsets.to_vec(),
            },
            n,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xm = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xm.rows()) {
            return Err(Error::arg(format!(
                "gather_rows: index {bad} out of {} rows",
                xm.rows()
            )));
        }
        let v = xm.select_rows(idx);
        let n = self.needs(x);
        Ok(self.push(v, Op::GatherRows { x, idx: idx.to_vec() }, n))
    }

    /// Multi-head scaled dot-product attention within each row group
    /// (one group per sequence). `q`, `k`, `v` are `tokens x dim`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, offsets: &[usize], heads: usize) -> Result<Var> {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        if qm.shape() != km.shape() || qm.shape() != vm.shape() {
            return Err(shape_err("attention", qm.shape(), km.shape()));
        }
        let dim = qm.cols();
        if heads == 0 || dim % heads != 0 {
            return Err(Error::arg(format!(
                "attention: dim {dim} not divisible by {heads} heads"
            )));
        }
        check_offsets(offsets, qm.rows())?;
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let groups = offsets.len() - 1;
        let slice =
            |m: &Matrix, s: usize, e: usize, h: usize| Matrix::from_fn(e - s, dh, |i, j| m.get(s + i, h * dh + j));
        let per_group: Vec<(Matrix, Vec<Matrix>)> = par::map_range(groups, |g| {
            let (s, e) = (offsets[g], offsets[g + 1]);
            let mut out = Matrix::zeros(e - s, dim);
            let mut probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let (qh, kh, vh) = (slice(qm, s, e, h), slice(km, s, e, h), slice(vm, s, e, h));
                let scores = qh.matmul_nt(&kh).expect("head shapes").scale(scale);
                let p = softmax_matrix(&scores, 1.0);
                let o = p.matmul(&vh).expect("head shapes");
                for i in 0..e - s {
                    out.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(o.row(i));
                }
                probs.push(p);
            }
            (out, probs)
        });
        let mut value = Matrix::zeros(qm.rows(), dim);
        let mut probs = Vec::with_capacity(groups * heads);
        for (g, (out, p)) in per_group.into_iter().enumerate() {
            let s = offsets[g];
            for i in 0..out.rows() {
                value.row_mut(s + i).copy_from_slice(out.row(i));
            }
            probs.extend(p);
        }
        let n = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                offsets: offsets.to_vec(),
                heads,
                probs,
            },
            n,
        ))
    }

    /// Mean over rows of `-sum_j t_ij log softmax(logits / tau)_ij`. Targets are
    /// constants.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &Matrix, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::arg(format!("cross-entropy temperature must be > 0, got {tau}")));
        }
        let lm = self.value(logits);
        if lm.shape() != targets.shape() {
            return Err(shape_err("cross_entropy_rows", lm.shape(), targets.shape()));
        }
        let probs = softmax_matrix(lm, tau);
        let rows = lm.rows().max(1) as f64;
        let loss = -probs
            .data()
            .iter()
            .zip(targets.data())
            .map(|(p, t)| t * p.max(LOG_EPSILON).ln())
            .sum::<f64>()
            / rows;
        let n = self.needs(logits);
        Ok(self.push(
            Matrix::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.clone(),
                tau,
                probs,
            },
            n,
        ))
    }

    /// Mean over rows of `-sum_j p_ij log p_ij`.
    pub fn entropy_rows(&mut self, p: Var) -> Var {
        let pm = self.value(p);
        let rows = pm.rows().max(1) as f64;
        let h = -pm.data().iter().map(|&v| v * v.max(LOG_EPSILON).ln()).sum::<f64>() / rows;
        let n = self.needs(p);
        self.push(Matrix::scalar(h), Op::EntropyRows(p), n)
    }

    pub fn squared_sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        let n = self.needs(x);
        self.push(Matrix::scalar(s), Op::SquaredSum(x), n)
    }

    /// Back-propagates from the scalar `loss`, adding parameter gradients into
    /// `store` (which must be the store the parameters were read from).
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::arg("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            if let Op::Param(id) = node.op {
                store.get_mut(id).grad.add_assign(&g);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(self.value(*b))?);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_tn(g)?);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b))?);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.matmul_tn(self.value(*a))?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*row) {
                    self.accumulate(grads, *row, column_sums(g));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::WeightedSum(terms) => {
                for &(t, w) in terms {
                    self.accumulate(grads, t, g.scale(w));
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                d.data_mut()
                    .iter_mut()
                    .zip(x.data())
                    .for_each(|(gv, &xv)| *gv *= gelu_parts(xv).1);
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.needs(*beta) {
                    self.accumulate(grads, *beta, column_sums(g));
                }
                if self.needs(*gamma) {
                    let mut prod = g.clone();
                    prod.data_mut().iter_mut().zip(xhat.data()).for_each(|(a, b)| *a *= b);
                    self.accumulate(grads, *gamma, column_sums(&prod));
                }
                if self.needs(*x) {
                    let gm = self.value(*gamma).data();
                    let d = g.cols() as f64;
                    let mut dx = Matrix::zeros(g.rows(), g.cols());
                    for i in 0..g.rows() {
                        let gh: Vec<f64> = g.row(i).iter().zip(gm).map(|(a, b)| a * b).collect();
                        let xh = xhat.row(i);
                        let sum_g: f64 = gh.iter().sum();
                        let sum_gx: f64 = gh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                            *o = inv_std[i] / d * (d * gh[j] - sum_g - xh[j] * sum_gx);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::SoftmaxRows { x, tau } => {
                let p = &node.value;
                let mut dx = Matrix::zeros(p.rows(), p.cols());
                for i in 0..p.rows() {
                    let dot: f64 = g.row(i).iter().zip(p.row(i)).map(|(a, b)| a * b).sum();
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = p.get(i, j) * (g.get(i, j) - dot) / tau;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = (g.get(i, j) - y.get(i, j) * dot) / norms[i];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MeanGroups { x, offsets } => {
                let xm = self.value(*x);
                let mut dx = Matrix::zeros(xm.rows(), xm.cols());
                for gi in 0..offsets.len() - 1 {
                    let (s, e) = (offsets[gi], offsets[gi + 1]);
                    let inv = 1.0 / (e - s) as f64;
                    for r in s..e {
                        dx.row_mut(r).iter_mut().zip(g.row(gi)).for_each(|(o, a)| *o = a * inv);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GatherRows { x, idx } => {
                let xm = self.value(*x);
                let mut dx = Matrix::zeros(xm.rows(), xm.cols());
                for (r, &i) in idx.iter().enumerate() {
                    dx.row_mut(i).iter_mut().zip(g.row(r)).for_each(|(o, a)| *o += a);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                offsets,
                heads,
                probs,
            } => {
                let (dq, dk, dv) = self.attention_backward(g, *q, *k, *v, offsets, *heads, probs)?;
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::CrossEntropy {
                logits,
                targets,
                tau,
                probs,
            } => {
                let rows = probs.rows().max(1) as f64;
                let up = g.item();
                let mut d = Matrix::zeros(probs.rows(), probs.cols());
                for i in 0..probs.rows() {
                    let mass: f64 = targets.row(i).iter().sum();
                    for (j, o) in d.row_mut(i).iter_mut().enumerate() {
                        *o = up * (probs.get(i, j) * mass - targets.get(i, j)) / (tau * rows);
                    }
                }
                self.accumulate(grads, *logits, d);
            }
            Op::EntropyRows(p) => {
                let pm = self.value(*p);
                let rows = pm.rows().max(1) as f64;
                let up = g.item();
                let d = pm.map(|v| -up * (v.max(LOG_EPSILON).ln() + 1.0) / rows);
                self.accumulate(grads, *p, d);
            }
            Op::SquaredSum(x) => {
                let up = g.item();
                self.accumulate(grads, *x, self.value(*x).scale(2.0 * up));
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Matrix,
        q: Var,
        k: Var,
        v: Var,
        offsets: &[usize],
        heads: usize,
        probs: &[Matrix],
    ) -> Result<(Matrix, Matrix, Matrix)> {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let dim = qm.cols();
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let slice =
            |m: &Matrix, s: usize, e: usize, h: usize| Matrix::from_fn(e - s, dh, |i, j| m.get(s + i, h * dh + j));
        let groups = offsets.len() - 1;
        let blocks: Vec<Vec<(Matrix, Matrix, Matrix)>> = par::map_range(groups, |gi| {
            let (s, e) = (offsets[gi], offsets[gi + 1]);
            (0..heads)
                .map(|h| {
                    let p = &probs[gi * heads + h];
                    let (qh, kh, vh) = (slice(qm, s, e, h), slice(km, s, e, h), slice(vm, s, e, h));
                    let go = slice(g, s, e, h);
                    let dv = p.matmul_tn(&go).expect("head shapes");
                    let dp = go.matmul_nt(&vh).expect("head shapes");
                    let mut ds = Matrix::zeros(p.rows(), p.cols());
                    for i in 0..p.rows() {
                        let dot: f64 = dp.row(i).iter().zip(p.row(i)).map(|(a, b)| a * b).sum();
                        for (j, o) in ds.row_mut(i).iter_mut().enumerate() {
                            *o = p.get(i, j) * (dp.get(i, j) - dot) * scale;
                        }
                    }
                    let dq = ds.matmul(&kh).expect("head shapes");
                    let dk = ds.matmul_tn(&qh).expect("head shapes");
                    (dq, dk, dv)
                })
                .collect()
        });
        let mut dq = Matrix::zeros(qm.rows(), dim);
        let mut dk = Matrix::zeros(qm.rows(), dim);
        let mut dv = Matrix::zeros(qm.rows(), dim);
        for (gi, per_head) in blocks.into_iter().enumerate() {
            let s = offsets[gi];
            for (h, (bq, bk, bv)) in per_head.into_iter().enumerate() {
                for i in 0..bq.rows() {
                    dq.row_mut(s + i)[h * dh..(h + 1) * dh].copy_from_slice(bq.row(i));
                    dk.row_mut(s + i)[h * dh..(h + 1) * dh].copy_from_slice(bk.row(i));
                    dv.row_mut(s + i)[h * dh..(h + 1) * dh].copy_from_slice(bv.row(i));
                }
            }
        }
        Ok((dq, dk, dv))
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for i in 0..g.rows() {
        out.row_mut(0).iter_mut().zip(g.row(i)).for_each(|(o, a)| *o += a);
    }
    out
}
