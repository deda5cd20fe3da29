//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records one forward pass. Parameters are read in place from a
//! borrowed [`ParamStore`]; calling [`Tape::backward`] on a scalar node returns
//! the gradient of every parameter that contributed to it.

use std::sync::Arc;

use super::matrix::{self, gemm_acc, Matrix};
use super::params::{Grads, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Which vocabulary entries a softmax is normalized over.
#[derive(Clone, Debug, PartialEq)]
pub enum Support {
    Full,
    /// Half-open id range.
    Range(usize, usize),
    List(Arc<[usize]>),
}

impl Support {
    pub fn contains(&self, token: usize) -> bool {
        match self {
            Support::Full => true,
            Support::Range(lo, hi) => (*lo..*hi).contains(&token),
            Support::List(l) => l.contains(&token),
        }
    }

    pub fn for_each(&self, width: usize, mut f: impl FnMut(usize)) {
        match self {
            Support::Full => (0..width).for_each(f),
            Support::Range(lo, hi) => (*lo..(*hi).min(width)).for_each(f),
            Support::List(l) => l.iter().copied().filter(|&t| t < width).for_each(&mut f),
        }
    }

    /// Log-softmax value of `token` within this support.
    pub fn log_prob(&self, logits: &[f64], token: usize) -> f64 {
        logits[token] - self.log_norm(logits)
    }

    pub fn log_norm(&self, logits: &[f64]) -> f64 {
        let mut max = f64::NEG_INFINITY;
        self.for_each(logits.len(), |j| max = max.max(logits[j]));
        if max == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        let mut sum = 0.0;
        self.for_each(logits.len(), |j| sum += (logits[j] - max).exp());
        max + sum.ln()
    }
}

/// One supervised next-token target inside a logits matrix.
#[derive(Clone, Debug)]
pub struct TokenTarget {
    pub row: usize,
    pub token: usize,
    pub support: Support,
    pub weight: f64,
}

/// One sampled token scored under the clipped policy objective.
#[derive(Clone, Debug)]
pub struct PolicyToken {
    pub row: usize,
    pub token: usize,
    pub support: Support,
    pub old_logp: f64,
    pub advantage: f64,
    pub weight: f64,
}

enum Op {
    Input,
    Param(ParamId),
    MatMul {
        a: Var,
        ta: bool,
        b: Var,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        a: Var,
        start: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    CausalSoftmax(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<TokenTarget>,
        log_norms: Vec<f64>,
    },
    ClippedPolicy {
        logits: Var,
        tokens: Vec<PolicyToken>,
        inv_temp: f64,
        eps: f64,
        log_norms: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        labels: Vec<f64>,
    },
    WeightedPool {
        weights: Var,
        values: Var,
        groups: usize,
    },
}

struct Node {
    value: Option<Matrix>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = Matrix::matmul_t(self.value(a), ta, self.value(b), tb);
        self.push(out, Op::MatMul { a, ta, b, tb })
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.shape(), mb.shape(), "elementwise shape mismatch");
        let data = ma.data().iter().zip(mb.data()).map(|(x, y)| f(*x, *y)).collect();
        Matrix::from_vec(ma.rows(), ma.cols(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Matrix {
        let m = self.value(a);
        Matrix::from_vec(m.rows(), m.cols(), m.data().iter().map(|x| f(*x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        let mut out = self.value(a).clone();
        assert_eq!(out.cols(), r.cols());
        let r = r.data().to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, f: f64) -> Var {
        let out = self.map(a, |x| x * f);
        self.push(out, Op::Scale(a, f))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.map(a, matrix::gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, matrix::sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Row lookup: `out[r] = table[idx[r]]`.
    pub fn gather(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(idx.len(), t.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        self.push(out, Op::Gather { table, idx })
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for p in &parts {
                let m = self.value(*p);
                assert_eq!(m.rows(), rows);
                out.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
                offset += m.cols();
            }
        }
        self.push(out, Op::ConcatCols(parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        let mut out = Matrix::zeros(m.rows(), len);
        for r in 0..m.rows() {
            out.row_mut(r).copy_from_slice(&m.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { a, start })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xm = self.value(x);
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let (rows, cols) = xm.shape();
        let mut out = Matrix::zeros(rows, cols);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let ones = vec![1.0; cols];
        let zeros = vec![0.0; cols];
        for r in 0..rows {
            let (_, is) = matrix::layer_norm_row(xm.row(r), &ones, &zeros, xhat.row_mut(r));
            inv_std.push(is);
            let xr = xhat.row(r).to_vec();
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = g[c] * xr[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-wise softmax of a square score matrix where row `i` sees columns `0..=i`.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let (rows, cols) = m.shape();
        assert_eq!(rows, cols, "causal softmax expects a square matrix");
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let src = &m.row(r)[..=r];
            let dst = &mut out.row_mut(r)[..=r];
            dst.copy_from_slice(src);
            matrix::softmax_in_place(dst);
        }
        self.push(out, Op::CausalSoftmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Matrix::scalar(s), Op::Sum(a))
    }

    /// Weighted negative log-likelihood `sum_i w_i * -log p(token_i | row_i)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<TokenTarget>) -> Var {
        let m = self.value(logits);
        let mut loss = 0.0;
        let mut log_norms = Vec::with_capacity(targets.len());
        for t in &targets {
            let row = m.row(t.row);
            let lz = t.support.log_norm(row);
            loss -= t.weight * (row[t.token] - lz);
            log_norms.push(lz);
        }
        self.push(
            Matrix::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets,
                log_norms,
            },
        )
    }

    /// Negative clipped surrogate `-sum_i w_i * min(r_i A_i, clip(r_i, 1-eps, 1+eps) A_i)`
    /// with `r_i = exp(log p_i - old_logp_i)` and log-probs taken from `logits / temperature`.
    pub fn clipped_policy_loss(&mut self, logits: Var, tokens: Vec<PolicyToken>, temperature: f64, eps: f64) -> Var {
        let inv_temp = 1.0 / temperature;
        let m = self.value(logits);
        let mut loss = 0.0;
        let mut log_norms = Vec::with_capacity(tokens.len());
        for t in &tokens {
            let scaled: Vec<f64> = m.row(t.row).iter().map(|x| x * inv_temp).collect();
            let lz = t.support.log_norm(&scaled);
            let logp = scaled[t.token] - lz;
            let ratio = (logp - t.old_logp).exp();
            let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
            loss -= t.weight * (ratio * t.advantage).min(clipped * t.advantage);
            log_norms.push(lz);
        }
        self.push(
            Matrix::scalar(loss),
            Op::ClippedPolicy {
                logits,
                tokens,
                inv_temp,
                eps,
                log_norms,
            },
        )
    }

    /// Mean binary cross-entropy of an `n x 1` logit column against `labels`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: Vec<f64>) -> Var {
        let m = self.value(logits);
        assert_eq!(m.data().len(), labels.len());
        let n = labels.len() as f64;
        let loss = m
            .data()
            .iter()
            .zip(&labels)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        self.push(Matrix::scalar(loss), Op::BceWithLogits { logits, labels })
    }

    /// `out[g] = sum_i weights[g*n + i] * values[g*n + i]` for `groups` equal-sized groups.
    pub fn weighted_pool(&mut self, weights: Var, values: Var, groups: usize) -> Var {
        let w = self.value(weights);
        let v = self.value(values);
        assert_eq!(w.cols(), 1);
        assert_eq!(w.rows(), v.rows());
        assert!(groups > 0 && v.rows().is_multiple_of(groups));
        let n = v.rows() / groups;
        let mut out = Matrix::zeros(groups, v.cols());
        for g in 0..groups {
            for i in 0..n {
                let r = g * n + i;
                let wi = w.get(r, 0);
                let vr = v.row(r).to_vec();
                for (o, x) in out.row_mut(g).iter_mut().zip(vr) {
                    *o += wi * x;
                }
            }
        }
        self.push(
            out,
            Op::WeightedPool {
                weights,
                values,
                groups,
            },
        )
    }

    /// Back-propagates from the scalar `root` and returns parameter gradients.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::scalar(1.0));
        let mut out = Grads::for_store(self.params);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param(id) => out.accumulate_owned(*id, g),
                Op::MatMul { a, ta, b, tb } => {
                    let (ma, mb) = (self.value(*a), self.value(*b));
                    let mut da = Matrix::zeros(ma.rows(), ma.cols());
                    if *ta {
                        gemm_acc(mb, *tb, &g, true, &mut da);
                    } else {
                        gemm_acc(&g, false, mb, !*tb, &mut da);
                    }
                    let mut db = Matrix::zeros(mb.rows(), mb.cols());
                    if *tb {
                        gemm_acc(&g, true, ma, *ta, &mut db);
                    } else {
                        gemm_acc(ma, !*ta, &g, false, &mut db);
                    }
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    let mut neg = g.clone();
                    neg.scale_in_place(-1.0);
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *b, neg);
                }
                Op::Mul(a, b) => {
                    let da = zip(&g, self.value(*b), |x, y| x * y);
                    let db = zip(&g, self.value(*a), |x, y| x * y);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddRow(a, row) => {
                    let mut dr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, x) in dr.data_mut().iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *row, dr);
                }
                Op::Scale(a, f) => {
                    let mut d = g;
                    d.scale_in_place(*f);
                    acc(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let d = zip(&g, self.value(*a), |gx, x| if x > 0.0 { gx } else { 0.0 });
                    acc(&mut grads, *a, d);
                }
                Op::Gelu(a) => {
                    let d = zip(&g, self.value(*a), |gx, x| gx * matrix::gelu_grad(x));
                    acc(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let y = self.nodes[idx].value.as_ref().expect("sigmoid value");
                    let d = zip(&g, y, |gx, s| gx * s * (1.0 - s));
                    acc(&mut grads, *a, d);
                }
                Op::Gather { table, idx: rows } => {
                    let t = self.value(*table);
                    let mut dt = Matrix::zeros(t.rows(), t.cols());
                    for (r, &i) in rows.iter().enumerate() {
                        for (d, x) in dt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let cols = self.value(*p).cols();
                        let mut d = Matrix::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        offset += cols;
                        acc(&mut grads, *p, d);
                    }
                }
                Op::SliceCols { a, start } => {
                    let m = self.value(*a);
                    let mut d = Matrix::zeros(m.rows(), m.cols());
                    for r in 0..g.rows() {
                        d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gm = self.value(*gamma).data().to_vec();
                    let (rows, cols) = xhat.shape();
                    let mut dx = Matrix::zeros(rows, cols);
                    let mut dg = Matrix::zeros(1, cols);
                    let mut db = Matrix::zeros(1, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_x = 0.0;
                        for c in 0..cols {
                            let dxh = gr[c] * gm[c];
                            mean_dxhat += dxh;
                            mean_dxhat_x += dxh * xr[c];
                            dg.data_mut()[c] += gr[c] * xr[c];
                            db.data_mut()[c] += gr[c];
                        }
                        mean_dxhat /= n;
                        mean_dxhat_x /= n;
                        let out = dx.row_mut(r);
                        for c in 0..cols {
                            let dxh = gr[c] * gm[c];
                            out[c] = inv_std[r] * (dxh - mean_dxhat - xr[c] * mean_dxhat_x);
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gamma, dg);
                    acc(&mut grads, *beta, db);
                }
                Op::CausalSoftmax(a) => {
                    let p = self.nodes[idx].value.as_ref().expect("softmax value");
                    let (rows, cols) = p.shape();
                    let mut d = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let pr = &p.row(r)[..=r];
                        let gr = &g.row(r)[..=r];
                        let s: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (c, o) in d.row_mut(r)[..=r].iter_mut().enumerate() {
                            *o = pr[c] * (gr[c] - s);
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let m = self.value(*a);
                    acc(&mut grads, *a, Matrix::filled(m.rows(), m.cols(), g.item()));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    log_norms,
                } => {
                    let m = self.value(*logits);
                    let mut d = Matrix::zeros(m.rows(), m.cols());
                    let up = g.item();
                    for (t, lz) in targets.iter().zip(log_norms) {
                        let row = m.row(t.row);
                        let w = t.weight * up;
                        let dr = d.row_mut(t.row);
                        t.support.for_each(row.len(), |j| dr[j] += w * (row[j] - lz).exp());
                        dr[t.token] -= w;
                    }
                    acc(&mut grads, *logits, d);
                }
                Op::ClippedPolicy {
                    logits,
                    tokens,
                    inv_temp,
                    eps,
                    log_norms,
                } => {
                    let m = self.value(*logits);
                    let mut d = Matrix::zeros(m.rows(), m.cols());
                    let up = g.item();
                    for (t, lz) in tokens.iter().zip(log_norms) {
                        let row = m.row(t.row);
                        let logp = row[t.token] * inv_temp - lz;
                        let ratio = (logp - t.old_logp).exp();
                        let clipped =
                            (t.advantage > 0.0 && ratio > 1.0 + eps) || (t.advantage < 0.0 && ratio < 1.0 - eps);
                        if clipped || t.advantage == 0.0 {
                            continue;
                        }
                        // d(-w r A)/d logp = -w r A
                        let dlogp = -t.weight * ratio * t.advantage * up;
                        let dr = d.row_mut(t.row);
                        t.support.for_each(row.len(), |j| {
                            dr[j] -= dlogp * (row[j] * inv_temp - lz).exp() * inv_temp;
                        });
                        dr[t.token] += dlogp * inv_temp;
                    }
                    acc(&mut grads, *logits, d);
                }
                Op::BceWithLogits { logits, labels } => {
                    let m = self.value(*logits);
                    let n = labels.len() as f64;
                    let up = g.item();
                    let data = m
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&x, &y)| up * (matrix::sigmoid(x) - y) / n)
                        .collect();
                    acc(&mut grads, *logits, Matrix::from_vec(m.rows(), m.cols(), data));
                }
                Op::WeightedPool {
                    weights,
                    values,
                    groups,
                } => {
                    let w = self.value(*weights);
                    let v = self.value(*values);
                    let n = v.rows() / groups;
                    let mut dw = Matrix::zeros(w.rows(), 1);
                    let mut dv = Matrix::zeros(v.rows(), v.cols());
                    for grp in 0..*groups {
                        let gr = g.row(grp);
                        for i in 0..n {
                            let r = grp * n + i;
                            dw.set(r, 0, matrix::dot(gr, v.row(r)));
                            let wi = w.get(r, 0);
                            for (d, x) in dv.row_mut(r).iter_mut().zip(gr) {
                                *d = wi * x;
                            }
                        }
                    }
                    acc(&mut grads, *weights, dw);
                    acc(&mut grads, *values, dv);
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite-difference check of every scalar in every parameter.
    fn check(store: &mut ParamStore, f: impl Fn(&mut Tape) -> Var) {
        let analytic = {
            let mut tape = Tape::new(store);
            let root = f(&mut tape);
            tape.backward(root)
        };
        let h = 1e-6;
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            for k in 0..store.get(id).data().len() {
                let orig = store.get(id).data()[k];
                store.get_mut(id).data_mut()[k] = orig + h;
                let plus = {
                    let mut t = Tape::new(store);
                    let r = f(&mut t);
                    t.value(r).item()
                };
                store.get_mut(id).data_mut()[k] = orig - h;
                let minus = {
                    let mut t = Tape::new(store);
                    let r = f(&mut t);
                    t.value(r).item()
                };
                store.get_mut(id).data_mut()[k] = orig;
                let fd = (plus - minus) / (2.0 * h);
                let an = analytic.get(id).map(|g| g.data()[k]).unwrap_or(0.0);
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < 1e-5,
                    "param {} [{k}]: fd {fd} vs analytic {an}",
                    store.param(id).name
                );
            }
        }
    }

    #[test]
    fn composite_graph_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let table = store.add("table", "t", Matrix::randn(5, 4, 0.5, &mut rng));
        let w = store.add("w", "t", Matrix::randn(4, 4, 0.5, &mut rng));
        let gam = store.add("g", "t", Matrix::randn(1, 4, 0.5, &mut rng));
        let bet = store.add("b", "t", Matrix::randn(1, 4, 0.5, &mut rng));
        let out = store.add("out", "t", Matrix::randn(4, 5, 0.5, &mut rng));
        check(&mut store, |t| {
            let tb = t.param(table);
            let x = t.gather(tb, vec![0, 3, 3]);
            let ww = t.param(w);
            let h = t.matmul(x, ww);
            let g = t.param(gam);
            let b = t.param(bet);
            let n = t.layer_norm(h, g, b);
            let a = t.gelu(n);
            let s = t.matmul_t(a, false, a, true);
            let p = t.causal_softmax(s);
            let ctx = t.matmul(p, a);
            let left = t.slice_cols(ctx, 0, 2);
            let right = t.slice_cols(n, 2, 2);
            let c = t.concat_cols(vec![left, right]);
            let m = t.mul(c, n);
            let d = t.sub(m, x);
            let o = t.param(out);
            let logits = t.matmul(d, o);
            t.cross_entropy(
                logits,
                vec![
                    TokenTarget {
                        row: 0,
                        token: 1,
                        support: Support::Full,
                        weight: 1.0,
                    },
                    TokenTarget {
                        row: 1,
                        token: 2,
                        support: Support::Range(1, 4),
                        weight: 0.5,
                    },
                    TokenTarget {
                        row: 2,
                        token: 4,
                        support: Support::List(vec![0, 4].into()),
                        weight: 2.0,
                    },
                ],
            )
        });
    }

    #[test]
    fn pooling_and_bce_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let v = store.add("v", "t", Matrix::randn(6, 3, 0.5, &mut rng));
        let w = store.add("w", "t", Matrix::randn(3, 1, 0.5, &mut rng));
        let bias = store.add("bias", "t", Matrix::randn(1, 1, 0.5, &mut rng));
        let head = store.add("head", "t", Matrix::randn(3, 1, 0.5, &mut rng));
        check(&mut store, |t| {
            let vv = t.param(v);
            let ww = t.param(w);
            let raw = t.matmul(vv, ww);
            let b = t.param(bias);
            let raw = t.add_row(raw, b);
            let wts = t.sigmoid(raw);
            let pooled = t.weighted_pool(wts, vv, 2);
            let r = t.relu(pooled);
            let hd = t.param(head);
            let logits = t.matmul(r, hd);
            let sc = t.scale(logits, 1.5);
            let l = t.bce_with_logits(sc, vec![1.0, 0.0]);
            let s = t.sum(pooled);
            let both = t.add(l, s);
            t.scale(both, 0.7)
        });
    }

    #[test]
    fn clipped_policy_gradient_inside_trust_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let p = store.add("logits", "t", Matrix::randn(2, 4, 0.3, &mut rng));
        let old: Vec<f64> = {
            let m = store.get(p);
            vec![
                Support::Full.log_prob(&m.row(0).iter().map(|x| x / 0.7).collect::<Vec<_>>(), 2) - 0.05,
                Support::Range(0, 3).log_prob(&m.row(1).iter().map(|x| x / 0.7).collect::<Vec<_>>(), 1) + 0.05,
            ]
        };
        check(&mut store, |t| {
            let l = t.param(p);
            t.clipped_policy_loss(
                l,
                vec![
                    PolicyToken {
                        row: 0,
                        token: 2,
                        support: Support::Full,
                        old_logp: old[0],
                        advantage: 1.3,
                        weight: 0.5,
                    },
                    PolicyToken {
                        row: 1,
                        token: 1,
                        support: Support::Range(0, 3),
                        old_logp: old[1],
                        advantage: -0.4,
                        weight: 0.5,
                    },
                ],
                0.7,
                0.2,
            )
        });
    }

    #[test]
    fn clipped_tokens_contribute_no_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("logits", "t", Matrix::from_vec(1, 3, vec![2.0, 0.0, 0.0]));
        let tape_grad = {
            let mut t = Tape::new(&store);
            let l = t.param(p);
            let root = t.clipped_policy_loss(
                l,
                vec![PolicyToken {
                    row: 0,
                    token: 0,
                    support: Support::Full,
                    old_logp: -3.0, // ratio far above 1 + eps
                    advantage: 1.0,
                    weight: 1.0,
                }],
                1.0,
                0.2,
            );
            t.backward(root)
        };
        assert!(tape_grad.get(p).unwrap().data().iter().all(|&g| g == 0.0));
    }
}
