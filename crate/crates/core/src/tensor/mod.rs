//! Dense fp64 tensors with a tape-style reverse-mode autodiff graph.
//!
//! A [`Graph`] is an arena of nodes appended in evaluation order, so the
//! arena order is already a topological order and [`Graph::backward`] simply
//! walks it in reverse. Nodes are addressed by the copyable handle [`Var`].
//! Gradients accumulate additively; call [`Graph::zero_grad`] before reusing a
//! graph for a second backward pass.

mod gemm;
pub mod gradcheck;
pub mod io;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use gemm::{gemm, Layout};
pub use gradcheck::{grad_check, grad_check_where, GradReport};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Probability clamp used by the normalized focal loss.
pub const PROB_CLAMP: f64 = 1e-7;

/// Owned row-major fp64 array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::DimMismatch(format!("zero-sized dim in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::DimMismatch(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dim")
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::DimMismatch(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Provenance of a node, used to route gradients during backward.
#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Gather {
        src: Var,
        index: Arc<[usize]>,
    },
    Concat(Vec<Var>),
    Resize(Var),
    Sum(Var),
    Mean(Var),
    Nfl {
        probs: Var,
        target: Arc<[f64]>,
        gamma: f64,
    },
}

/// Reverse-mode autodiff arena. Single-owner; build one per forward pass.
///
/// Leaf gradients accumulate across repeated [`Graph::backward`] calls until
/// [`Graph::zero_grad`]; interior gradients are recomputed on every pass.
#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    requires_grad: Vec<bool>,
    ops: Vec<Op>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.requires_grad.push(requires_grad);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.values[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    /// Accumulated gradient, or `None` if backward never reached the node.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires_grad[v.0])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::DimMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let out = Tensor {
            shape: x.shape.clone(),
            data,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let out = Tensor {
            shape: x.shape.clone(),
            data,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let x = self.value(a);
        let out = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|v| v * factor).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    /// Adds a `[n]` bias to every last-dim slice of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(a).last_dim();
        if self.shape(bias) != [n] {
            return Err(Error::DimMismatch(format!(
                "bias {:?} for last dim {n}",
                self.shape(bias)
            )));
        }
        let x = self.value(a);
        let b = &self.value(bias).data;
        let mut data = x.data.clone();
        for row in data.chunks_exact_mut(n) {
            row.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
        }
        let out = Tensor {
            shape: x.shape.clone(),
            data,
        };
        let rg = self.rg(&[a, bias]);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    /// `[.., k] · [k, n] -> [.., n]`; leading dims of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let k = self.value(a).last_dim();
        let bs = self.shape(b);
        if bs.len() != 2 || bs[0] != k {
            return Err(Error::DimMismatch(format!("matmul {:?} x {:?}", self.shape(a), bs)));
        }
        let n = bs[1];
        let rows = self.value(a).numel() / k;
        let mut data = vec![0.0; rows * n];
        gemm(
            rows,
            k,
            n,
            &self.value(a).data,
            Layout::Normal,
            &self.value(b).data,
            Layout::Normal,
            &mut data,
            false,
        );
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::MatMul(a, b), rg))
    }

    /// `x · w + b` over the last dim.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
    /// read transposed when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::DimMismatch(format!("bmm {sa:?} x {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::DimMismatch(format!(
                "bmm inner dims {sa:?} x {sb:?} (trans_b={trans_b})"
            )));
        }
        let mut data = vec![0.0; batch * m * n];
        let (x, y) = (&self.value(a).data, &self.value(b).data);
        let bl = if trans_b { Layout::Trans } else { Layout::Normal };
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &x[i * m * k..(i + 1) * m * k],
                Layout::Normal,
                &y[i * k * n..(i + 1) * k * n],
                bl,
                &mut data[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![batch, m, n],
                data,
            },
            Op::Bmm { a, b, trans_b },
            rg,
        ))
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("softmax"));
        }
        let n = x.last_dim();
        let mut data = x.data.clone();
        for row in data.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let out = Tensor {
            shape: x.shape.clone(),
            data,
        };
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::DimMismatch(format!(
                "layer_norm affine {:?}/{:?} for last dim {n}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let xs = &self.value(x).data;
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let rows = xs.len() / n;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut data = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                data[r * n + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor {
            shape: self.shape(x).to_vec(),
            data,
        };
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| gelu_scalar(v)).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| sigmoid_scalar(v)).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// `out[i] = src[index[i]]` (flat indices), reshaped to `shape`.
    ///
    /// Permutations, window partitions, cyclic shifts and head splits are all
    /// expressed through this one op.
    pub fn gather(&mut self, src: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != index.len() {
            return Err(Error::DimMismatch(format!(
                "gather shape {shape:?} for {} indices",
                index.len()
            )));
        }
        let x = &self.value(src).data;
        if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
            return Err(Error::DimMismatch(format!(
                "gather index {bad} out of range {}",
                x.len()
            )));
        }
        let data = index.iter().map(|&i| x[i]).collect();
        let rg = self.rg(&[src]);
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::Gather { src, index },
            rg,
        ))
    }

    /// Concatenates along the last dim; all inputs must agree on the leading dims.
    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptyInput("concat"))?;
        let lead = &self.shape(*first)[..self.shape(*first).len() - 1];
        let rows: usize = lead.iter().product();
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if &s[..s.len() - 1] != lead {
                return Err(Error::DimMismatch(format!("concat {lead:?} vs {s:?}")));
            }
            total += s[s.len() - 1];
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let t = self.value(*p);
                let c = t.last_dim();
                data.extend_from_slice(&t.data[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(Tensor { shape, data }, Op::Concat(parts.to_vec()), rg))
    }

    /// Align-corners-false bilinear resize of an `[h, w, c]` grid to `[out_h, out_w, c]`.
    pub fn resize_bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 3 || out_h == 0 || out_w == 0 {
            return Err(Error::DimMismatch(format!("resize expects [h, w, c], got {s:?}")));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let data = resize_forward(&self.value(a).data, h, w, c, out_h, out_w);
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![out_h, out_w, c],
                data,
            },
            Op::Resize(a),
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = &self.value(a).data;
        let s = x.iter().sum::<f64>() / x.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Normalized focal loss of foreground probabilities against a 0/1 target.
    ///
    /// With `p` the clamped probability of the true class and `w = (1 - p)^gamma`,
    /// the loss is `-(sum w log p) / (sum w)`.
    pub fn nfl(&mut self, probs: Var, target: Arc<[f64]>, gamma: f64) -> Result<Var> {
        let q = &self.value(probs).data;
        if q.len() != target.len() {
            return Err(Error::DimMismatch(format!(
                "nfl: {} probabilities vs {} targets",
                q.len(),
                target.len()
            )));
        }
        if gamma < 0.0 || !gamma.is_finite() {
            return Err(Error::InvalidConfig(format!("focal gamma {gamma}")));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("nfl"));
        }
        let (mut num, mut den) = (0.0, 0.0);
        for (&qi, &yi) in q.iter().zip(target.iter()) {
            let pt = true_class_prob(qi, yi);
            let w = (1.0 - pt).powf(gamma);
            num += w * pt.ln();
            den += w;
        }
        let rg = self.rg(&[probs]);
        Ok(self.push(Tensor::scalar(-num / den), Op::Nfl { probs, target, gamma }, rg))
    }

    /// Populates gradients of every `requires_grad` ancestor of `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.requires_grad[loss.0] {
            return Ok(());
        }
        // Interior gradients are per pass; only leaves accumulate across passes.
        for (g, op) in self.grads.iter_mut().zip(&self.ops) {
            if !matches!(op, Op::Leaf) {
                *g = None;
            }
        }
        accumulate(&mut self.grads[loss.0], 1, |g| g[0] += 1.0);
        for i in (0..=loss.0).rev() {
            if !self.requires_grad[i] || matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &dy);
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, dy: &[f64]) {
        let Graph {
            values,
            grads,
            requires_grad,
            ops,
        } = self;
        // Yields a mutable gradient buffer for `v`, or skips when `v` is constant.
        macro_rules! with_grad {
            ($v:expr, |$g:ident| $body:expr) => {{
                let v: Var = $v;
                if requires_grad[v.0] {
                    let len = values[v.0].data.len();
                    accumulate(&mut grads[v.0], len, |$g| $body);
                }
            }};
        }
        match &ops[i] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                with_grad!(*a, |g| axpy(g, dy, 1.0));
                with_grad!(*b, |g| axpy(g, dy, 1.0));
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (&values[a.0].data, &values[b.0].data);
                with_grad!(*a, |g| {
                    for ((gv, d), y) in g.iter_mut().zip(dy).zip(xb) {
                        *gv += d * y;
                    }
                });
                with_grad!(*b, |g| {
                    for ((gv, d), x) in g.iter_mut().zip(dy).zip(xa) {
                        *gv += d * x;
                    }
                });
            }
            Op::Scale(a, f) => with_grad!(*a, |g| axpy(g, dy, *f)),
            Op::AddBias(a, bias) => {
                with_grad!(*a, |g| axpy(g, dy, 1.0));
                let n = values[bias.0].data.len();
                with_grad!(*bias, |g| {
                    for row in dy.chunks_exact(n) {
                        axpy(g, row, 1.0);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let k = values[a.0].last_dim();
                let n = values[b.0].shape[1];
                let rows = values[a.0].data.len() / k;
                let (xa, xb) = (&values[a.0].data, &values[b.0].data);
                with_grad!(*a, |g| gemm(rows, n, k, dy, Layout::Normal, xb, Layout::Trans, g, true));
                with_grad!(*b, |g| gemm(k, rows, n, xa, Layout::Trans, dy, Layout::Normal, g, true));
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = &values[a.0].shape;
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b {
                    values[b.0].shape[1]
                } else {
                    values[b.0].shape[2]
                };
                let (xa, xb) = (&values[a.0].data, &values[b.0].data);
                let (mk, kn, mn) = (m * k, k * n, m * n);
                with_grad!(*a, |g| {
                    for t in 0..batch {
                        let (dc, bb) = (&dy[t * mn..(t + 1) * mn], &xb[t * kn..(t + 1) * kn]);
                        let ga = &mut g[t * mk..(t + 1) * mk];
                        if *trans_b {
                            gemm(m, n, k, dc, Layout::Normal, bb, Layout::Normal, ga, true);
                        } else {
                            gemm(m, n, k, dc, Layout::Normal, bb, Layout::Trans, ga, true);
                        }
                    }
                });
                with_grad!(*b, |g| {
                    for t in 0..batch {
                        let (dc, aa) = (&dy[t * mn..(t + 1) * mn], &xa[t * mk..(t + 1) * mk]);
                        let gb = &mut g[t * kn..(t + 1) * kn];
                        if *trans_b {
                            gemm(n, m, k, dc, Layout::Trans, aa, Layout::Normal, gb, true);
                        } else {
                            gemm(k, m, n, aa, Layout::Trans, dc, Layout::Normal, gb, true);
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &values[i].data;
                let n = values[i].last_dim();
                with_grad!(*a, |g| {
                    for ((gr, yr), dr) in g.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(dy.chunks_exact(n)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gm = &values[gamma.0].data;
                let n = gm.len();
                with_grad!(*x, |g| {
                    let mut dxhat = vec![0.0; n];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let d = &dy[r * n..(r + 1) * n];
                        let h = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            dxhat[j] = d[j] * gm[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(h).map(|(p, q)| p * q).sum();
                        let inv_n = 1.0 / n as f64;
                        for j in 0..n {
                            g[r * n + j] += rs * (dxhat[j] - inv_n * s1 - h[j] * inv_n * s2);
                        }
                    }
                });
                with_grad!(*gamma, |g| {
                    for (d, h) in dy.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            g[j] += d[j] * h[j];
                        }
                    }
                });
                with_grad!(*beta, |g| {
                    for d in dy.chunks_exact(n) {
                        axpy(g, d, 1.0);
                    }
                });
            }
            Op::Gelu(a) => {
                let x = &values[a.0].data;
                with_grad!(*a, |g| {
                    for ((gv, d), &xv) in g.iter_mut().zip(dy).zip(x) {
                        *gv += d * gelu_derivative(xv);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &values[i].data;
                with_grad!(*a, |g| {
                    for ((gv, d), &yv) in g.iter_mut().zip(dy).zip(y) {
                        *gv += d * yv * (1.0 - yv);
                    }
                });
            }
            Op::Gather { src, index } => {
                with_grad!(*src, |g| {
                    for (&j, d) in index.iter().zip(dy) {
                        g[j] += d;
                    }
                });
            }
            Op::Concat(parts) => {
                let total = values[i].last_dim();
                let rows = dy.len() / total;
                let mut offset = 0;
                for p in parts {
                    let c = values[p.0].last_dim();
                    with_grad!(*p, |g| {
                        for r in 0..rows {
                            let src = &dy[r * total + offset..r * total + offset + c];
                            axpy(&mut g[r * c..(r + 1) * c], src, 1.0);
                        }
                    });
                    offset += c;
                }
            }
            Op::Resize(a) => {
                let s = &values[a.0].shape;
                let (h, w, c) = (s[0], s[1], s[2]);
                let so = &values[i].shape;
                let (oh, ow) = (so[0], so[1]);
                with_grad!(*a, |g| resize_backward(dy, g, h, w, c, oh, ow));
            }
            Op::Sum(a) => with_grad!(*a, |g| g.iter_mut().for_each(|v| *v += dy[0])),
            Op::Mean(a) => {
                let n = values[a.0].data.len() as f64;
                with_grad!(*a, |g| g.iter_mut().for_each(|v| *v += dy[0] / n));
            }
            Op::Nfl { probs, target, gamma } => {
                let q = &values[probs.0].data;
                with_grad!(*probs, |g| nfl_backward(q, target, *gamma, dy[0], g));
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

fn axpy(y: &mut [f64], x: &[f64], alpha: f64) {
    for (a, b) in y.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

/// Max-subtracted softmax of one slice.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximation GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn true_class_prob(q: f64, y: f64) -> f64 {
    let q = q.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if y > 0.5 {
        q
    } else {
        1.0 - q
    }
}

fn nfl_backward(q: &[f64], target: &[f64], gamma: f64, upstream: f64, g: &mut [f64]) {
    let mut num = 0.0;
    let mut den = 0.0;
    for (&qi, &yi) in q.iter().zip(target) {
        let pt = true_class_prob(qi, yi);
        let w = (1.0 - pt).powf(gamma);
        num += w * pt.ln();
        den += w;
    }
    for ((gv, &qi), &yi) in g.iter_mut().zip(q).zip(target) {
        if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&qi) {
            continue;
        }
        let pt = true_class_prob(qi, yi);
        let w = (1.0 - pt).powf(gamma);
        let dw = if gamma == 0.0 {
            0.0
        } else {
            -gamma * (1.0 - pt).powf(gamma - 1.0)
        };
        let dpt = -(dw * pt.ln() + w / pt) / den + num * dw / (den * den);
        let sign = if yi > 0.5 { 1.0 } else { -1.0 };
        *gv += upstream * dpt * sign;
    }
}

/// Per-axis sampling table for align-corners-false bilinear resizing:
/// `(lower index, upper index, upper weight)` for each output position.
pub fn bilinear_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if hi == lo { 0.0 } else { pos - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

/// Bilinear resize of a row-major `[h, w, c]` buffer.
pub fn resize_forward(x: &[f64], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ys = bilinear_axis(h, oh);
    let xs = bilinear_axis(w, ow);
    let mut out = vec![0.0; oh * ow * c];
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let taps = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ];
            let dst = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for (yy, xx, wt) in taps {
                if wt == 0.0 {
                    continue;
                }
                let src = &x[(yy * w + xx) * c..(yy * w + xx + 1) * c];
                axpy(dst, src, wt);
            }
        }
    }
    out
}

fn resize_backward(dy: &[f64], g: &mut [f64], h: usize, w: usize, c: usize, oh: usize, ow: usize) {
    let ys = bilinear_axis(h, oh);
    let xs = bilinear_axis(w, ow);
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let taps = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ];
            let src = &dy[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for (yy, xx, wt) in taps {
                if wt == 0.0 {
                    continue;
                }
                axpy(&mut g[(yy * w + xx) * c..(yy * w + xx + 1) * c], src, wt);
            }
        }
    }
}
