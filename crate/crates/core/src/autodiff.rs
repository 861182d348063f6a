//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter as borrowed leaves
//! tagged with a [`ParamKey`]; after [`Graph::backward`] their gradients are read back with
//! [`Graph::param_grads`]. Nodes whose inputs do not require gradients are skipped during
//! the backward sweep, so frozen sub-networks only pay for the activations flowing through
//! them.

use crate::scalar::{lit, Scalar};
use crate::tensor::{gelu, gelu_grad, gemm_cols, layer_norm, softmax_prefix, Matrix};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Parameter owner inside a composite model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Encoder,
    Connector,
    Lm,
    Lora,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub group: ParamGroup,
    pub index: usize,
}

enum Value<'a, T> {
    Owned(Matrix<T>),
    Borrowed(&'a Matrix<T>),
}

impl<T> Value<'_, T> {
    fn get(&self) -> &Matrix<T> {
        match self {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }
}

enum Op<T> {
    Leaf { param: Option<ParamKey> },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Tanh(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, means: Vec<T>, rstds: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Window { x: Var, size: usize, stride: usize, offset: isize },
    ConcatRows(Vec<Var>),
    RowSlice { x: Var, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, grad: Matrix<T> },
}

struct Node<'a, T> {
    op: Op<T>,
    value: Value<'a, T>,
    requires_grad: bool,
}

/// Tape of operations recorded during one forward pass.
pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, op: Op<T>, value: Value<'a, T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        self.nodes[v.0].value.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Borrowed parameter leaf. Gradients are only tracked when `trainable` is set.
    pub fn param(&mut self, m: &'a Matrix<T>, key: ParamKey, trainable: bool) -> Var {
        self.push(Op::Leaf { param: Some(key) }, Value::Borrowed(m), trainable)
    }

    pub fn constant(&mut self, m: Matrix<T>) -> Var {
        self.push(Op::Leaf { param: None }, Value::Owned(m), false)
    }

    /// Owned leaf that may require a gradient (used for probing input sensitivities).
    pub fn input(&mut self, m: Matrix<T>, requires_grad: bool) -> Var {
        self.push(Op::Leaf { param: None }, Value::Owned(m), requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), Value::Owned(out), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMulT(a, b), Value::Owned(out), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), Value::Owned(out), rg)
    }

    /// Adds a `1×n` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let mut out = self.value(x).clone();
        out.add_row(self.value(bias));
        let rg = self.rg(x) || self.rg(bias);
        self.push(Op::AddBias(x, bias), Value::Owned(out), rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).scale(s);
        let rg = self.rg(x);
        self.push(Op::Scale(x, s), Value::Owned(out), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(Op::Gelu(x), Value::Owned(out), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        let rg = self.rg(x);
        self.push(Op::Tanh(x), Value::Owned(out), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (out, means, rstds) = layer_norm(self.value(x), self.value(gamma), self.value(beta), lit(1e-5));
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(Op::LayerNorm { x, gamma, beta, means, rstds }, Value::Owned(out), rg)
    }

    /// Multi-head scaled dot-product attention over equal-length `q`, `k`, `v`
    /// (`L×d`, `d` divisible by `heads`). With `causal`, query `i` sees keys `0..=i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (l, d) = self.value(q).shape();
        assert_eq!(self.value(k).shape(), (l, d));
        assert_eq!(self.value(v).shape(), (l, d));
        assert_eq!(d % heads, 0);
        let (out, probs) = attention_forward(self.value(q), self.value(k), self.value(v), heads, causal);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(Op::Attention { q, k, v, heads, probs }, Value::Owned(out), rg)
    }

    /// Sliding row window: output row `i` concatenates input rows
    /// `i*stride + offset + j` for `j in 0..size`, zero-filled outside `[0, T)`.
    pub fn window(&mut self, x: Var, size: usize, stride: usize, offset: isize, out_rows: usize) -> Var {
        let out = window_forward(self.value(x), size, stride, offset, out_rows);
        let rg = self.rg(x);
        self.push(Op::Window { x, size, stride, offset }, Value::Owned(out), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mut out = Matrix::zeros(0, 0);
        let mut rg = false;
        for &p in parts {
            let m = self.value(p);
            if out.cols() == 0 && out.rows() == 0 {
                out = Matrix::zeros(0, m.cols());
            }
            out.push_rows(m);
            rg |= self.rg(p);
        }
        self.push(Op::ConcatRows(parts.to_vec()), Value::Owned(out), rg)
    }

    pub fn row_slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).rows_slice(start, len);
        let rg = self.rg(x);
        self.push(Op::RowSlice { x, start }, Value::Owned(out), rg)
    }

    /// Row lookup into an embedding table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        let rg = self.rg(table);
        self.push(Op::Gather { table, ids: ids.to_vec() }, Value::Owned(out), rg)
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` is set.
    /// Returns a `1×1` node. Panics if no row is masked in; callers validate first.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Var {
        let (loss, grad) = masked_cross_entropy(self.value(logits), targets, mask);
        let rg = self.rg(logits);
        self.push(Op::CrossEntropy { logits, grad }, Value::Owned(Matrix::from_vec(1, 1, vec![loss])), rg)
    }

    fn acc(&mut self, v: Var, g: Matrix<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from a `1×1` root.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Matrix::from_vec(1, 1, vec![T::one()]));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
    }

    fn backward_node(&mut self, i: usize, g: &Matrix<T>) {
        // The op is temporarily moved out so inputs can be borrowed while gradients are
        // accumulated into other slots.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf { param: None });
        match &op {
            Op::Leaf { .. } => {}
            &Op::MatMul(a, b) => {
                if self.rg(a) {
                    let ga = g.matmul_t(self.value(b));
                    self.acc(a, ga);
                }
                if self.rg(b) {
                    let gb = self.value(a).t_matmul(g);
                    self.acc(b, gb);
                }
            }
            &Op::MatMulT(a, b) => {
                // c = a bᵀ ; da = g b ; db = gᵀ a
                if self.rg(a) {
                    let ga = g.matmul(self.value(b));
                    self.acc(a, ga);
                }
                if self.rg(b) {
                    let gb = g.t_matmul(self.value(a));
                    self.acc(b, gb);
                }
            }
            &Op::Add(a, b) => {
                self.acc(a, g.clone());
                self.acc(b, g.clone());
            }
            &Op::AddBias(x, b) => {
                self.acc(x, g.clone());
                if self.rg(b) {
                    self.acc(b, g.sum_rows());
                }
            }
            &Op::Scale(x, s) => self.acc(x, g.scale(s)),
            &Op::Gelu(x) => {
                let xv = self.value(x);
                let gx = Matrix::from_vec(
                    g.rows(),
                    g.cols(),
                    xv.data().iter().zip(g.data()).map(|(&xi, &gi)| gi * gelu_grad(xi)).collect(),
                );
                self.acc(x, gx);
            }
            &Op::Tanh(x) => {
                let yv = self.nodes[i].value.get();
                let gx = Matrix::from_vec(
                    g.rows(),
                    g.cols(),
                    yv.data().iter().zip(g.data()).map(|(&y, &gi)| gi * (T::one() - y * y)).collect(),
                );
                self.acc(x, gx);
            }
            Op::LayerNorm { x, gamma, beta, means, rstds } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let xv = self.value(x);
                let gm = self.value(gamma);
                let (rows, d) = xv.shape();
                let n = T::from_usize(d).unwrap();
                let mut gx = Matrix::zeros(rows, d);
                let mut ggamma = Matrix::zeros(1, d);
                let mut gbeta = Matrix::zeros(1, d);
                for r in 0..rows {
                    let xr = xv.row(r);
                    let gr = g.row(r);
                    let (mean, rstd) = (means[r], rstds[r]);
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for c in 0..d {
                        let xhat = (xr[c] - mean) * rstd;
                        let dxhat = gr[c] * gm.data()[c];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        ggamma.data_mut()[c] += gr[c] * xhat;
                        gbeta.data_mut()[c] += gr[c];
                    }
                    let out = gx.row_mut(r);
                    for c in 0..d {
                        let xhat = (xr[c] - mean) * rstd;
                        let dxhat = gr[c] * gm.data()[c];
                        out[c] = rstd * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                    }
                }
                self.acc(x, gx);
                self.acc(gamma, ggamma);
                self.acc(beta, gbeta);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (q, k, v) = (*q, *k, *v);
                let (gq, gk, gv) = attention_backward(self.value(q), self.value(k), self.value(v), *heads, probs, g);
                self.acc(q, gq);
                self.acc(k, gk);
                self.acc(v, gv);
            }
            &Op::Window { x, size, stride, offset } => {
                let (t, f) = self.value(x).shape();
                let mut gx = Matrix::zeros(t, f);
                for r in 0..g.rows() {
                    for j in 0..size {
                        let src = (r * stride) as isize + offset + j as isize;
                        if src < 0 || src as usize >= t {
                            continue;
                        }
                        let gr = &g.row(r)[j * f..(j + 1) * f];
                        for (a, &b) in gx.row_mut(src as usize).iter_mut().zip(gr) {
                            *a += b;
                        }
                    }
                }
                self.acc(x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.rg(p) {
                        self.acc(p, g.rows_slice(start, rows));
                    }
                    start += rows;
                }
            }
            &Op::RowSlice { x, start } => {
                if self.rg(x) {
                    let (rows, cols) = self.value(x).shape();
                    let mut gx = Matrix::zeros(rows, cols);
                    for r in 0..g.rows() {
                        gx.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    self.acc(x, gx);
                }
            }
            Op::Gather { table, ids } => {
                let table = *table;
                let (rows, cols) = self.value(table).shape();
                let mut gt = Matrix::zeros(rows, cols);
                for (r, &id) in ids.iter().enumerate() {
                    for (a, &b) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *a += b;
                    }
                }
                self.acc(table, gt);
            }
            Op::CrossEntropy { logits, grad } => {
                let s = g.get(0, 0);
                self.acc(*logits, grad.scale(s));
            }
        }
        self.nodes[i].op = op;
    }

    pub fn grad(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every trainable parameter leaf reached by the last backward pass.
    pub fn param_grads(&self) -> Vec<(ParamKey, &Matrix<T>)> {
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(key) } = node.op {
                if let Some(g) = self.grads.get(i).and_then(Option::as_ref) {
                    out.push((key, g));
                }
            }
        }
        out
    }
}

pub(crate) fn window_forward<T: Scalar>(x: &Matrix<T>, size: usize, stride: usize, offset: isize, out_rows: usize) -> Matrix<T> {
    let (t, f) = x.shape();
    let mut out = Matrix::zeros(out_rows, size * f);
    for r in 0..out_rows {
        for j in 0..size {
            let src = (r * stride) as isize + offset + j as isize;
            if src < 0 || src as usize >= t {
                continue;
            }
            out.row_mut(r)[j * f..(j + 1) * f].copy_from_slice(x.row(src as usize));
        }
    }
    out
}

pub(crate) fn attention_forward<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>, heads: usize, causal: bool) -> (Matrix<T>, Vec<T>) {
    let (l, d) = q.shape();
    let lk = k.rows();
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut probs = vec![T::zero(); heads * l * lk];
    let mut out = Matrix::<T>::zeros(l, d);
    for h in 0..heads {
        let p = &mut probs[h * l * lk..(h + 1) * l * lk];
        gemm_cols(q.data(), d, h * dh, l, false, k.data(), d, h * dh, lk, true, dh, scale, T::zero(), p, lk, 0);
        for i in 0..l {
            // Queries are aligned to the end of the key sequence.
            let valid = if causal { lk - l + i + 1 } else { lk };
            softmax_prefix(&mut p[i * lk..(i + 1) * lk], valid);
        }
        // out[:, h] = P · V[:, h]
        unsafe {
            T::gemm(
                l,
                lk,
                dh,
                T::one(),
                p.as_ptr(),
                lk as isize,
                1,
                v.data().as_ptr().add(h * dh),
                d as isize,
                1,
                T::zero(),
                out.data_mut().as_mut_ptr().add(h * dh),
                d as isize,
                1,
            );
        }
    }
    (out, probs)
}

fn attention_backward<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    heads: usize,
    probs: &[T],
    g: &Matrix<T>,
) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
    let (l, d) = q.shape();
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut gq = Matrix::<T>::zeros(l, d);
    let mut gk = Matrix::<T>::zeros(l, d);
    let mut gv = Matrix::<T>::zeros(l, d);
    let mut dp = vec![T::zero(); l * l];
    for h in 0..heads {
        let p = &probs[h * l * l..(h + 1) * l * l];
        // dP = dO_h · V_hᵀ
        gemm_cols(g.data(), d, h * dh, l, false, v.data(), d, h * dh, l, true, dh, T::one(), T::zero(), &mut dp, l, 0);
        // dV_h = Pᵀ · dO_h
        unsafe {
            T::gemm(
                l,
                l,
                dh,
                T::one(),
                p.as_ptr(),
                1,
                l as isize,
                g.data().as_ptr().add(h * dh),
                d as isize,
                1,
                T::zero(),
                gv.data_mut().as_mut_ptr().add(h * dh),
                d as isize,
                1,
            );
        }
        // dS = P ⊙ (dP − rowsum(dP ⊙ P))
        for i in 0..l {
            let pr = &p[i * l..(i + 1) * l];
            let dr = &mut dp[i * l..(i + 1) * l];
            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
            for (dv, &pv) in dr.iter_mut().zip(pr) {
                *dv = pv * (*dv - dot);
            }
        }
        unsafe {
            // dQ_h = scale · dS · K_h
            T::gemm(
                l,
                l,
                dh,
                scale,
                dp.as_ptr(),
                l as isize,
                1,
                k.data().as_ptr().add(h * dh),
                d as isize,
                1,
                T::zero(),
                gq.data_mut().as_mut_ptr().add(h * dh),
                d as isize,
                1,
            );
            // dK_h = scale · dSᵀ · Q_h
            T::gemm(
                l,
                l,
                dh,
                scale,
                dp.as_ptr(),
                1,
                l as isize,
                q.data().as_ptr().add(h * dh),
                d as isize,
                1,
                T::zero(),
                gk.data_mut().as_mut_ptr().add(h * dh),
                d as isize,
                1,
            );
        }
    }
    (gq, gk, gv)
}

/// Masked mean cross-entropy and its gradient w.r.t. the logits.
pub(crate) fn masked_cross_entropy<T: Scalar>(logits: &Matrix<T>, targets: &[usize], mask: &[bool]) -> (T, Matrix<T>) {
    let (rows, vocab) = logits.shape();
    assert_eq!(targets.len(), rows);
    assert_eq!(mask.len(), rows);
    let count = mask.iter().filter(|&&m| m).count();
    assert!(count > 0, "cross-entropy needs at least one masked-in position");
    let inv = T::one() / T::from_usize(count).unwrap();
    let mut grad = Matrix::zeros(rows, vocab);
    let mut total = T::zero();
    for r in 0..rows {
        if !mask[r] {
            continue;
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[targets[r]];
        let gr = grad.row_mut(r);
        for c in 0..vocab {
            gr[c] = (row[c] - lse).exp() * inv;
        }
        gr[targets[r]] -= inv;
    }
    (total * inv, grad)
}
