//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the node list is
//! already topologically sorted. [`Graph::backward`] walks it once in reverse.
//! The tape is rebuilt for every forward pass.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, RowKeys};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    RmsNorm { x: Var, gain: Var, inv: Vec<T> },
    Silu(Var),
    Gelu(Var),
    Rows { x: Var, idx: Vec<usize> },
    Concat(Vec<Var>),
    Rope { x: Var, positions: Arc<[usize]>, heads: usize, base: f64 },
    Attention { q: Var, k: Var, v: Var, heads: usize, keys: Arc<[RowKeys]>, probs: Vec<T> },
    KlRows { p: Var, q: Var },
    CosRows { a: Var, b: Var, na: Vec<T>, nb: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, kind: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| *p + *q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| *p * *q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|v| v + c);
        self.push("add_scalar", out, Op::AddScalar(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::dim("mean", "empty tensor"));
        }
        let s: T = x.data().iter().copied().sum();
        let m = s / T::lit(x.len() as f64);
        self.push("mean", Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            tensor::softmax_in_place(out.row_mut(r));
        }
        self.push("softmax", out, Op::SoftmaxRows(a), &[a])
    }

    /// Row-wise RMS normalization with a learned gain of width `cols`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        if gv.len() != xv.cols() {
            return Err(Error::dim("rms_norm", format!("gain {} vs width {}", gv.len(), xv.cols())));
        }
        let mut out = Tensor::zeros(xv.shape());
        let mut inv = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            inv.push(kernels::rms_norm_row(xv.row(r), gv.data(), eps, out.row_mut(r)));
        }
        self.push("rms_norm", out, Op::RmsNorm { x, gain, inv }, &[x, gain])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(kernels::silu);
        self.push("silu", out, Op::Silu(a), &[a])
    }

    /// `silu(gate) * up`.
    pub fn swiglu(&mut self, gate: Var, up: Var) -> Result<Var> {
        let s = self.silu(gate)?;
        self.mul(s, up)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| gelu_fwd(x).0);
        self.push("gelu", out, Op::Gelu(a), &[a])
    }

    /// Gathers rows of `x` (embedding lookup when `x` is a table).
    pub fn rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.rows();
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Input(format!("row index {bad} out of range for {n} rows")));
        }
        let c = xv.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::matrix(idx.len(), c, data)?;
        self.push("rows", out, Op::Rows { x, idx: idx.to_vec() }, &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        if start + len > self.value(x).rows() {
            return Err(Error::dim("slice_rows", format!("{start}+{len} > {}", self.value(x).rows())));
        }
        let idx: Vec<usize> = (start..start + len).collect();
        self.rows(x, &idx)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&vals)?;
        self.push("concat_rows", out, Op::Concat(parts.to_vec()), parts)
    }

    /// Rotary position encoding applied per head; one position per row.
    pub fn rope(&mut self, x: Var, positions: Arc<[usize]>, heads: usize, base: f64) -> Result<Var> {
        let mut out = self.value(x).clone();
        if positions.len() != out.rows() {
            return Err(Error::dim("rope", format!("{} positions for {} rows", positions.len(), out.rows())));
        }
        if out.cols() % heads != 0 || (out.cols() / heads) % 2 != 0 {
            return Err(Error::dim("rope", "head width must be even"));
        }
        for (r, &p) in positions.iter().enumerate() {
            kernels::rope_row(out.row_mut(r), p, heads, base, false);
        }
        self.push("rope", out, Op::Rope { x, positions, heads, base }, &[x])
    }

    /// Multi-head attention where row `i` of `q` sees exactly the key rows in
    /// `keys[i]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, keys: Arc<[RowKeys]>) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, w) = (qv.rows(), qv.cols());
        if kv.cols() != w || vv.cols() != w || kv.rows() != vv.rows() {
            return Err(Error::dim("attention", "q/k/v widths disagree"));
        }
        if keys.len() != n || w % heads != 0 {
            return Err(Error::dim("attention", format!("{} key lists for {n} rows", keys.len())));
        }
        let nk = kv.rows();
        if keys.iter().any(|rk| rk.count() == 0 || rk.first.end > nk || rk.second.end > nk) {
            return Err(Error::Contract("attention key range out of bounds or empty".into()));
        }
        let mut out = Tensor::zeros(&[n, w]);
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for (i, rk) in keys.iter().enumerate() {
            kernels::attend_row(
                qv.row(i),
                rk,
                heads,
                |j| kv.row(j),
                |j| vv.row(j),
                out.row_mut(i),
                &mut scores,
                Some(&mut probs),
            );
        }
        self.push("attention", out, Op::Attention { q, k, v, heads, keys, probs }, &[q, k, v])
    }

    /// Per-row `KL(p || q)` with `0 ln 0 = 0` and `q` clamped at
    /// [`PROB_FLOOR`]. Both arguments may carry gradient.
    pub fn kl_rows(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape("kl_rows", p, q)?;
        let (pv, qv) = (self.value(p), self.value(q));
        for t in [pv, qv] {
            for r in 0..t.rows() {
                check_distribution(t.row(r))?;
            }
        }
        let floor = T::lit(PROB_FLOOR);
        let mut out = Vec::with_capacity(pv.rows());
        for r in 0..pv.rows() {
            let mut s = T::zero();
            for (&pi, &qi) in pv.row(r).iter().zip(qv.row(r)) {
                if pi > T::zero() {
                    s += pi * (pi.ln() - qi.max(floor).ln());
                }
            }
            out.push(s);
        }
        self.push("kl_rows", Tensor::vector(out), Op::KlRows { p, q }, &[p, q])
    }

    /// Per-row cosine similarity.
    pub fn cos_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cos_rows", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(av.rows());
        let (mut na, mut nb) = (Vec::new(), Vec::new());
        for r in 0..av.rows() {
            let x = tensor::dot(av.row(r), av.row(r)).sqrt();
            let y = tensor::dot(bv.row(r), bv.row(r)).sqrt();
            if x == T::zero() || y == T::zero() {
                return Err(Error::Numeric("cosine similarity of a zero-norm vector".into()));
            }
            out.push(tensor::dot(av.row(r), bv.row(r)) / (x * y));
            na.push(x);
            nb.push(y);
        }
        self.push("cos_rows", Tensor::vector(out), Op::CosRows { a, b, na, nb }, &[a, b])
    }

    /// Accumulates `d loss / d leaf` into every trainable leaf reachable from
    /// `loss`. Repeated calls add to existing gradients until
    /// [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();

        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(id, g, &mut adj, &mut leaf_grads)?;
        }
        for (id, g) in leaf_grads {
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }

    fn propagate(
        &self,
        id: usize,
        g: Vec<T>,
        adj: &mut [Option<Vec<T>>],
        leaf_grads: &mut Vec<(usize, Vec<T>)>,
    ) -> Result<()> {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => leaf_grads.push((id, g)),
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(da) = slot(nodes, adj, *a) {
                    let bt = tensor::transpose(bv.data(), k, n);
                    tensor::gemm_acc(&g, &bt, da, m, n, k);
                }
                if let Some(db) = slot(nodes, adj, *b) {
                    tensor::gemm_at_b_acc(av.data(), &g, db, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = slot(nodes, adj, v) {
                        d.iter_mut().zip(&g).for_each(|(x, y)| *x += *y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(d) = slot(nodes, adj, *a) {
                    for ((x, gy), bb) in d.iter_mut().zip(&g).zip(bv) {
                        *x += *gy * *bb;
                    }
                }
                if let Some(d) = slot(nodes, adj, *b) {
                    for ((x, gy), aa) in d.iter_mut().zip(&g).zip(av) {
                        *x += *gy * *aa;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = slot(nodes, adj, *a) {
                    d.iter_mut().zip(&g).for_each(|(x, y)| *x += *y * *c);
                }
            }
            Op::AddScalar(a) => {
                if let Some(d) = slot(nodes, adj, *a) {
                    d.iter_mut().zip(&g).for_each(|(x, y)| *x += *y);
                }
            }
            Op::Sum(a) => {
                if let Some(d) = slot(nodes, adj, *a) {
                    d.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = T::lit(nodes[a.0].value.len() as f64);
                if let Some(d) = slot(nodes, adj, *a) {
                    d.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                if let Some(d) = slot(nodes, adj, *a) {
                    let c = y.cols();
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let s = tensor::dot(yr, gr);
                        for j in 0..c {
                            d[r * c + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, inv } => {
                let xv = &nodes[x.0].value;
                let gv = nodes[gain.0].value.data();
                let c = xv.cols();
                if let Some(d) = slot(nodes, adj, *x) {
                    let n = T::lit(c as f64);
                    for r in 0..xv.rows() {
                        let xr = xv.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let iv = inv[r];
                        // dy/dx = inv*gain - x * inv^3 * (x . (g*gain)) / n
                        let mut s = T::zero();
                        for j in 0..c {
                            s += gr[j] * gv[j] * xr[j];
                        }
                        let k = iv * iv * iv * s / n;
                        for j in 0..c {
                            d[r * c + j] += gr[j] * gv[j] * iv - xr[j] * k;
                        }
                    }
                }
                if let Some(d) = slot(nodes, adj, *gain) {
                    for r in 0..xv.rows() {
                        let xr = xv.row(r);
                        for j in 0..c {
                            d[j] += g[r * c + j] * xr[j] * inv[r];
                        }
                    }
                }
            }
            Op::Silu(a) => {
                let xv = nodes[a.0].value.data();
                if let Some(d) = slot(nodes, adj, *a) {
                    for ((dx, gy), &x) in d.iter_mut().zip(&g).zip(xv) {
                        let s = kernels::sigmoid(x);
                        *dx += *gy * s * (T::one() + x * (T::one() - s));
                    }
                }
            }
            Op::Gelu(a) => {
                let xv = nodes[a.0].value.data();
                if let Some(d) = slot(nodes, adj, *a) {
                    for ((dx, gy), &x) in d.iter_mut().zip(&g).zip(xv) {
                        *dx += *gy * gelu_fwd(x).1;
                    }
                }
            }
            Op::Rows { x, idx } => {
                let c = nodes[x.0].value.cols();
                if let Some(d) = slot(nodes, adj, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            d[i * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    if let Some(d) = slot(nodes, adj, p) {
                        d.iter_mut().zip(&g[off..off + n]).for_each(|(x, y)| *x += *y);
                    }
                    off += n;
                }
            }
            Op::Rope { x, positions, heads, base } => {
                if let Some(d) = slot(nodes, adj, *x) {
                    let c = node.value.cols();
                    let mut row = vec![T::zero(); c];
                    for (r, &p) in positions.iter().enumerate() {
                        row.copy_from_slice(&g[r * c..(r + 1) * c]);
                        kernels::rope_row(&mut row, p, *heads, *base, true);
                        for j in 0..c {
                            d[r * c + j] += row[j];
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, keys, probs } => {
                let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let w = qv.cols();
                let hd = w / heads;
                let scale = T::lit(1.0 / (hd as f64).sqrt());
                let mut dq = vec![T::zero(); qv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                let mut dv = vec![T::zero(); vv.len()];
                let mut dp = Vec::new();
                let mut off = 0;
                for (i, rk) in keys.iter().enumerate() {
                    let gi = &g[i * w..(i + 1) * w];
                    let cnt = rk.count();
                    for h in 0..*heads {
                        let r = h * hd..(h + 1) * hd;
                        let p = &probs[off..off + cnt];
                        off += cnt;
                        let goh = &gi[r.clone()];
                        dp.clear();
                        for (pj, j) in p.iter().zip(rk.iter()) {
                            let vh = &vv.row(j)[r.clone()];
                            dp.push(tensor::dot(goh, vh));
                            let dvh = &mut dv[j * w + h * hd..j * w + (h + 1) * hd];
                            for (x, y) in dvh.iter_mut().zip(goh) {
                                *x += *pj * *y;
                            }
                        }
                        let s = tensor::dot(p, &dp);
                        let qh = &qv.row(i)[r.clone()];
                        for ((pj, dpj), j) in p.iter().zip(&dp).zip(rk.iter()) {
                            let ds = *pj * (*dpj - s) * scale;
                            let kh = &kv.row(j)[r.clone()];
                            let dqh = &mut dq[i * w + h * hd..i * w + (h + 1) * hd];
                            for (x, y) in dqh.iter_mut().zip(kh) {
                                *x += ds * *y;
                            }
                            let dkh = &mut dk[j * w + h * hd..j * w + (h + 1) * hd];
                            for (x, y) in dkh.iter_mut().zip(qh) {
                                *x += ds * *y;
                            }
                        }
                    }
                }
                for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(d) = slot(nodes, adj, var) {
                        d.iter_mut().zip(&buf).for_each(|(x, y)| *x += *y);
                    }
                }
            }
            Op::KlRows { p, q } => {
                let (pv, qv) = (&nodes[p.0].value, &nodes[q.0].value);
                let c = pv.cols();
                let floor = T::lit(PROB_FLOOR);
                if let Some(d) = slot(nodes, adj, *q) {
                    for r in 0..pv.rows() {
                        for j in 0..c {
                            let (pi, qi) = (pv.row(r)[j], qv.row(r)[j]);
                            if qi > floor {
                                d[r * c + j] -= g[r] * pi / qi;
                            }
                        }
                    }
                }
                if let Some(d) = slot(nodes, adj, *p) {
                    for r in 0..pv.rows() {
                        for j in 0..c {
                            let (pi, qi) = (pv.row(r)[j], qv.row(r)[j]);
                            let lp = pi.max(floor).ln();
                            d[r * c + j] += g[r] * (lp - qi.max(floor).ln() + T::one());
                        }
                    }
                }
            }
            Op::CosRows { a, b, na, nb } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let c = av.cols();
                let cos = node.value.data();
                for (target, other, nt, no) in [(*a, bv, na, nb), (*b, av, nb, na)] {
                    let tv = &nodes[target.0].value;
                    if let Some(d) = slot(nodes, adj, target) {
                        for r in 0..tv.rows() {
                            let (x, y) = (tv.row(r), other.row(r));
                            let inv = T::one() / (nt[r] * no[r]);
                            let k = cos[r] / (nt[r] * nt[r]);
                            for j in 0..c {
                                d[r * c + j] += g[r] * (y[j] * inv - x[j] * k);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Adjoint buffer for input `v`, or None when it needs no gradient.
fn slot<'a, T: Scalar>(nodes: &[Node<T>], adj: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(adj[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn check_distribution<T: Scalar>(row: &[T]) -> Result<()> {
    let s: f64 = row.iter().map(|v| v.as_f64()).sum();
    if row.iter().any(|v| *v < T::zero() || *v > T::one()) || (s - 1.0).abs() > 1e-6 {
        return Err(Error::Input(format!("not a probability distribution: {row:?}")));
    }
    Ok(())
}

/// GELU value and derivative (tanh approximation).
fn gelu_fwd<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
    (y, dy)
}
