//! Reverse-mode automatic differentiation over a per-step arena.
//!
//! Every operation appends a node holding its value and the recipe for its
//! backward pass. Nodes only ever reference earlier nodes, so walking the
//! arena backwards is a valid reverse topological order.

use std::borrow::Cow;

use super::params::{ParamId, ParamStore};
use super::tensor::{axis_split, softmax_strided, MatmulPlan, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, plan: MatmulPlan },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Matrix plus a row vector broadcast over rows.
    AddRow(Var, Var),
    Affine { x: Var, scale: f64 },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, probs: Vec<f64>, targets: Vec<Option<usize>>, scale: f64 },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Sum(Var),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// One forward computation. Parameters are borrowed from the store, not
/// copied.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    bound: Vec<Option<Var>>,
    param_of: Vec<Option<usize>>,
    tainted: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), bound: Vec::new(), param_of: Vec::new(), tainted: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, requires_grad: bool) -> Var {
        if cfg!(debug_assertions) && !matches!(value, Cow::Borrowed(_)) && !value.all_finite() {
            assert!(
                matches!(op, Op::Leaf) || self.tainted,
                "non-finite value produced from finite inputs"
            );
            self.tainted = true;
        }
        self.nodes.push(Node { value, op, requires_grad });
        self.param_of.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Leaf that never receives a gradient (masks, encodings, data).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// Differentiable leaf owned by the tape.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Differentiable leaf bound to a stored parameter; bound once per tape.
    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        if self.bound.len() < store.len() {
            self.bound.resize(store.len(), None);
        }
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.push(Cow::Borrowed(&store.get(id).value), Op::Leaf, true);
        self.bound[id.0] = Some(v);
        self.param_of[v.0] = Some(id.0);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// a * b^T without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let plan = MatmulPlan::new(self.value(a).shape(), self.value(b).shape(), tb)?;
        let mut out = Tensor::zeros(&plan.out_shape);
        plan.forward(self.value(a).data(), self.value(b).data(), out.data_mut());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::MatMul { a, b, plan }, rg))
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(self.value(a), self.value(b), what)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(self.value(a).shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(t), Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(t), Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(t), Op::Mul(a, b), rg))
    }

    /// x [.., n] + bias [n], broadcast over all leading positions.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.value(x).shape(), self.value(bias).shape());
        if bs.len() != 1 || xs.last() != Some(&bs[0]) {
            return Err(Error::Shape(format!("add_row: {xs:?} + {bs:?}")));
        }
        let n = bs[0];
        let b = self.value(bias).data();
        let data = self.value(x).data().iter().enumerate().map(|(i, v)| v + b[i % n]).collect();
        let t = Tensor::new(self.value(x).shape(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Cow::Owned(t), Op::AddRow(x, bias), rg))
    }

    /// scale * x + shift, elementwise with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| scale * v + shift).collect();
        let t = Tensor::new(self.value(x).shape(), data).expect("same length");
        let rg = self.rg(x);
        self.push(Cow::Owned(t), Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(x).data().iter().map(|v| f(*v)).collect();
        let t = Tensor::new(self.value(x).shape(), data).expect("same length");
        let rg = self.rg(x);
        self.push(Cow::Owned(t), op, rg)
    }

    /// max(x, 0); the derivative at 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = axis_split(self.value(x).shape(), axis)?;
        let mut data = self.value(x).data().to_vec();
        softmax_strided(&mut data, outer, n, inner);
        let t = Tensor::new(self.value(x).shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(t), Op::Softmax { x, outer, n, inner }, rg))
    }

    /// Normalizes over the last axis, then applies gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let n = *shape.last().ok_or_else(|| Error::Shape("layer_norm on a scalar".into()))?;
        for (p, what) in [(gain, "gain"), (bias, "bias")] {
            if self.value(p).shape() != [n] {
                return Err(Error::Shape(format!("layer_norm {what} {:?} for width {n}", self.value(p).shape())));
            }
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xs.len() / n.max(1);
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(Cow::Owned(t), Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Row lookup: table [V, d], ids -> [len, d].
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        let mut data = Vec::with_capacity(ids.len() * d);
        let mut idx = Vec::with_capacity(ids.len());
        for &id in ids {
            let i = id as usize;
            if i >= v {
                return Err(Error::invalid(format!("token id {id} outside embedding table of {v} rows")));
            }
            data.extend_from_slice(self.value(table).row(i));
            idx.push(i);
        }
        let t = Tensor::new(&[ids.len(), d], data)?;
        let rg = self.rg(table);
        Ok(self.push(Cow::Owned(t), Op::Embedding { table, ids: idx }, rg))
    }

    /// Mean negative log-likelihood of `targets` under softmax(logits) over
    /// positions whose target is not `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], ignore: u32) -> Result<Var> {
        let count = targets.iter().filter(|&&t| t != ignore).count();
        if count == 0 {
            return Err(Error::invalid("cross entropy over zero non-ignored targets"));
        }
        self.cross_entropy_scaled(logits, targets, ignore, 1.0 / count as f64)
    }

    /// `scale` times the summed negative log-likelihood. Lets a caller
    /// normalize by a token count spanning several tapes.
    pub fn cross_entropy_scaled(&mut self, logits: Var, targets: &[u32], ignore: u32, scale: f64) -> Result<Var> {
        let (rows, v) = self.value(logits).dims2()?;
        if rows != targets.len() {
            return Err(Error::Shape(format!("cross entropy: {rows} logit rows, {} targets", targets.len())));
        }
        let mut probs = self.value(logits).data().to_vec();
        softmax_strided(&mut probs, rows, v, 1);
        let mut loss = 0.0;
        let mut tg = Vec::with_capacity(rows);
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore {
                tg.push(None);
                continue;
            }
            let t = t as usize;
            if t >= v {
                return Err(Error::invalid(format!("target id {t} outside {v} classes")));
            }
            // log-softmax computed directly for accuracy far in the tail.
            let row = self.value(logits).row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            tg.push(Some(t));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(scale * loss)),
            Op::CrossEntropy { logits, probs, targets: tg, scale },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start + len > c {
            return Err(Error::Shape(format!("slice_cols {start}+{len} of {c}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let t = Tensor::new(&[r, len], data)?;
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(t), Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::Shape(format!("concat_cols: {r} rows vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(&[rows, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Cow::Owned(t), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start + len > r {
            return Err(Error::Shape(format!("slice_rows {start}+{len} of {r}")));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::new(&[len, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(t), Op::SliceRows { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).dims2()?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(Error::Shape(format!("concat_rows: {c} cols vs {cols}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(&[rows, cols], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Cow::Owned(t), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Sum(x), rg)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar, got {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads, param_of: self.param_of.clone() })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, plan } => {
                if let Some(da) = self.acc(grads, *a) {
                    plan.grad_lhs(g, self.value(*b).data(), da);
                }
                if let Some(db) = self.acc(grads, *b) {
                    plan.grad_rhs(self.value(*a).data(), g, db);
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if let Some(d) = self.acc(grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += sign * g);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if let Some(d) = self.acc(grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += sign * g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    for k in 0..g.len() {
                        d[k] += g[k] * bv[k];
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for k in 0..g.len() {
                        d[k] += g[k] * av[k];
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                let n = self.value(*bias).len();
                if let Some(d) = self.acc(grads, *bias) {
                    for (k, gv) in g.iter().enumerate() {
                        d[k % n] += gv;
                    }
                }
            }
            Op::Affine { x, scale } => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += scale * g);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(d) = self.acc(grads, *x) {
                    for k in 0..g.len() {
                        if xv[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    for k in 0..g.len() {
                        d[k] += g[k] * out[k] * (1.0 - out[k]);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    for k in 0..g.len() {
                        d[k] += g[k] * (1.0 - out[k] * out[k]);
                    }
                }
            }
            Op::Softmax { x, outer, n, inner } => {
                if let Some(d) = self.acc(grads, *x) {
                    for o in 0..*outer {
                        for j in 0..*inner {
                            let base = o * n * inner + j;
                            let dot: f64 = (0..*n).map(|k| g[base + k * inner] * out[base + k * inner]).sum();
                            for k in 0..*n {
                                let idx = base + k * inner;
                                d[idx] += out[idx] * (g[idx] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = self.value(*gain).len();
                let gv = self.value(*gain).data();
                if let Some(d) = self.acc(grads, *gain) {
                    for k in 0..g.len() {
                        d[k % n] += g[k] * xhat[k];
                    }
                }
                if let Some(d) = self.acc(grads, *bias) {
                    for k in 0..g.len() {
                        d[k % n] += g[k];
                    }
                }
                if let Some(d) = self.acc(grads, *x) {
                    for (r, rs) in rstd.iter().enumerate() {
                        let base = r * n;
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..n {
                            let dh = g[base + j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[base + j];
                        }
                        mean_dh /= n as f64;
                        mean_dh_h /= n as f64;
                        for j in 0..n {
                            let dh = g[base + j] * gv[j];
                            d[base + j] += rs * (dh - mean_dh - xhat[base + j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let dim = self.value(*table).dims2().map(|(_, d)| d).unwrap_or(0);
                if let Some(d) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..dim {
                            d[id * dim + j] += g[r * dim + j];
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, probs, targets, scale } => {
                let v = probs.len() / targets.len().max(1);
                if let Some(d) = self.acc(grads, *logits) {
                    let s = g[0] * scale;
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            for j in 0..v {
                                d[r * v + j] += s * probs[r * v + j];
                            }
                            d[r * v + t] -= s;
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.value(*x).dims2().expect("matrix");
                let w = g.len() / r.max(1);
                if let Some(d) = self.acc(grads, *x) {
                    for i in 0..r {
                        for j in 0..w {
                            d[i * c + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].value.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let (r, w) = self.value(p).dims2().expect("matrix");
                    if let Some(d) = self.acc(grads, p) {
                        for row in 0..r {
                            for j in 0..w {
                                d[row * w + j] += g[row * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let c = self.value(*x).shape()[1];
                if let Some(d) = self.acc(grads, *x) {
                    for (k, gv) in g.iter().enumerate() {
                        d[start * c + k] += gv;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(d) = self.acc(grads, p) {
                        d.iter_mut().zip(&g[off..off + n]).for_each(|(d, g)| *d += g);
                    }
                    off += n;
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }
}

/// Result of a backward pass.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    param_of: Vec<Option<usize>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Adds every bound parameter's gradient into `acc`, indexed by slot.
    pub fn accumulate_params(&self, acc: &mut [Vec<f64>]) {
        for (node, slot) in self.param_of.iter().enumerate() {
            if let (Some(slot), Some(g)) = (slot, &self.grads[node]) {
                let dst = &mut acc[*slot];
                if dst.is_empty() {
                    dst.extend_from_slice(g);
                } else {
                    dst.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
        }
    }
}
