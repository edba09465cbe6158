//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so walking the tape backwards is a valid reverse
//! topological order. Parameter leaves remember their index in the
//! [`ParamStore`] they were read from; [`Graph::backward`] returns gradients
//! keyed by that index.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{dot, matmul_rows, sigmoid_scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    AddLast(Var, Var),
    MulLast(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    MulScalar(Var, Var),
    Sigmoid(Var),
    Silu(Var),
    MeanSeq(Var),
    ExpandSeq(Var),
    ConcatSeq(Vec<Var>),
    SliceSeq(Var, usize),
    ConcatLast(Var, Var),
    SplitHeads(Var, usize),
    MergeHeads(Var, usize),
    BmmNt(Var, Var),
    Bmm(Var, Var),
    Softmax(Var),
    Normalize(Var, Vec<f64>),
    Gather(Var, Vec<usize>),
    Mse(Var, Var),
    CosineRows(Var, Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to parameter-store indices.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, param_index: usize) -> Option<&Tensor> {
        self.by_param.get(&param_index)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.by_param.iter().map(|(&i, t)| (i, t))
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// Global L2 norm over all parameter gradients.
    pub fn norm(&self) -> f64 {
        self.by_param
            .values()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.by_param.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: HashMap<usize, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{op:?}")));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Constant, false)
    }

    /// Leaf for a stored parameter. Repeated reads of the same id share one leaf.
    pub fn param(&mut self, store: &ParamStore, id: &str) -> Result<Var> {
        let i = store.index_of(id)?;
        if let Some(&v) = self.param_leaves.get(&i) {
            return Ok(v);
        }
        let p = store.by_index(i);
        let v = self.push(p.value.clone(), Op::Param(i), p.trainable)?;
        self.param_leaves.insert(i, v);
        Ok(v)
    }

    /// `x[.., K] · w[K, O]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let k = xv.last_dim();
        if wv.rank() != 2 || wv.shape()[0] != k {
            return Err(Error::shape("linear", xv.shape(), wv.shape()));
        }
        let o = wv.shape()[1];
        let rows = xv.rows();
        let data = matmul_rows(xv.data(), wv.data(), rows, k, o);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = o;
        let rg = self.rg(&[x, w]);
        self.push(Tensor::new(shape, data)?, Op::MatMul(x, w), rg)
    }

    /// Broadcast-add a `[D]` vector over the last axis.
    pub fn add_last(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let d = xv.last_dim();
        if bv.shape() != [d] {
            return Err(Error::shape("add_last", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d.max(1)) {
            for (y, &bb) in row.iter_mut().zip(bv.data()) {
                *y += bb;
            }
        }
        let rg = self.rg(&[x, b]);
        self.push(out, Op::AddLast(x, b), rg)
    }

    /// Broadcast-multiply by a `[D]` vector over the last axis.
    pub fn mul_last(&mut self, x: Var, g: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(g));
        let d = xv.last_dim();
        if gv.shape() != [d] {
            return Err(Error::shape("mul_last", xv.shape(), gv.shape()));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d.max(1)) {
            for (y, &gg) in row.iter_mut().zip(gv.data()) {
                *y *= gg;
            }
        }
        let rg = self.rg(&[x, g]);
        self.push(out, Op::MulLast(x, g), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(&[x]);
        self.push(out, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| 1.0 - v);
        let rg = self.rg(&[x]);
        self.push(out, Op::Affine(x, -1.0), rg)
    }

    /// Multiply every element by a `[1]`-shaped variable.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.shape() != [1] {
            return Err(Error::shape(
                "mul_scalar",
                self.value(x).shape(),
                sv.shape(),
            ));
        }
        let k = sv.data()[0];
        let out = self.value(x).map(|v| k * v);
        let rg = self.rg(&[x, s]);
        self.push(out, Op::MulScalar(x, s), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid_scalar);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * sigmoid_scalar(v));
        let rg = self.rg(&[x]);
        self.push(out, Op::Silu(x), rg)
    }

    /// `[B, L, D] -> [B, 1, D]` mean over the sequence axis.
    pub fn mean_seq(&mut self, x: Var) -> Result<Var> {
        let (b, l, d) = self.value(x).dims3("mean_pool_seq")?;
        if l == 0 {
            return Err(Error::EmptySequence("mean_pool_seq"));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let o = &mut out[bi * d..(bi + 1) * d];
            for li in 0..l {
                for (y, &v) in o
                    .iter_mut()
                    .zip(&xv[(bi * l + li) * d..(bi * l + li + 1) * d])
                {
                    *y += v;
                }
            }
            let inv = 1.0 / l as f64;
            o.iter_mut().for_each(|y| *y *= inv);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![b, 1, d], out)?, Op::MeanSeq(x), rg)
    }

    /// `[B, 1, D] -> [B, n, D]`.
    pub fn expand_seq(&mut self, x: Var, n: usize) -> Result<Var> {
        let (b, one, d) = self.value(x).dims3("expand_seq")?;
        if one != 1 {
            return Err(Error::shape(
                "expand_seq",
                self.value(x).shape(),
                &[b, 1, d],
            ));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * n * d);
        for bi in 0..b {
            for _ in 0..n {
                out.extend_from_slice(&xv[bi * d..(bi + 1) * d]);
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![b, n, d], out)?, Op::ExpandSeq(x), rg)
    }

    pub fn concat_seq(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_seq(&tensors)?;
        let rg = self.rg(parts);
        self.push(out, Op::ConcatSeq(parts.to_vec()), rg)
    }

    pub fn slice_seq(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_seq(start, len)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::SliceSeq(x, start), rg)
    }

    /// Concatenate along the last axis; leading shapes must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (da, db) = (av.last_dim(), bv.last_dim());
        if av.shape()[..av.rank() - 1] != bv.shape()[..bv.rank() - 1] {
            return Err(Error::shape("concat_last", av.shape(), bv.shape()));
        }
        let rows = av.rows();
        let mut out = Vec::with_capacity(rows * (da + db));
        for r in 0..rows {
            out.extend_from_slice(&av.data()[r * da..(r + 1) * da]);
            out.extend_from_slice(&bv.data()[r * db..(r + 1) * db]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = da + db;
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, out)?, Op::ConcatLast(a, b), rg)
    }

    /// `[B, L, H·E] -> [B·H, L, E]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let (b, l, d) = self.value(x).dims3("split_heads")?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        let out = permute_heads(self.value(x).data(), b, l, heads, d / heads, true);
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(vec![b * heads, l, d / heads], out)?,
            Op::SplitHeads(x, heads),
            rg,
        )
    }

    /// `[B·H, L, E] -> [B, L, H·E]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let (bh, l, e) = self.value(x).dims3("merge_heads")?;
        let b = bh / heads;
        let out = permute_heads(self.value(x).data(), b, l, heads, e, false);
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(vec![b, l, heads * e], out)?,
            Op::MergeHeads(x, heads),
            rg,
        )
    }

    /// `a[G, M, K] · b[G, N, K]ᵀ -> [G, M, N]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (g, m, k) = self.value(a).dims3("bmm_nt")?;
        let (g2, n, k2) = self.value(b).dims3("bmm_nt")?;
        if g != g2 || k != k2 {
            return Err(Error::shape(
                "bmm_nt",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; g * m * n];
        for gi in 0..g {
            for i in 0..m {
                let ar = &av[(gi * m + i) * k..(gi * m + i + 1) * k];
                for j in 0..n {
                    out[(gi * m + i) * n + j] =
                        dot(ar, &bv[(gi * n + j) * k..(gi * n + j + 1) * k]);
                }
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![g, m, n], out)?, Op::BmmNt(a, b), rg)
    }

    /// `a[G, M, N] · b[G, N, K] -> [G, M, K]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (g, m, n) = self.value(a).dims3("bmm")?;
        let (g2, n2, k) = self.value(b).dims3("bmm")?;
        if g != g2 || n != n2 {
            return Err(Error::shape(
                "bmm",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; g * m * k];
        for gi in 0..g {
            let o = matmul_rows(
                &av[gi * m * n..(gi + 1) * m * n],
                &bv[gi * n * k..(gi + 1) * n * k],
                m,
                n,
                k,
            );
            out[gi * m * k..(gi + 1) * m * k].copy_from_slice(&o);
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![g, m, k], out)?, Op::Bmm(a, b), rg)
    }

    /// Row softmax over the last axis. With `causal`, row `i` of an `M×N` block
    /// only sees columns `j ≤ i + (N − M)`; masked entries are exactly zero.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        let m = if xv.rank() >= 2 {
            xv.shape()[xv.rank() - 2]
        } else {
            1
        };
        let mut out = vec![0.0; xv.len()];
        if n > 0 {
            for (r, (row, o)) in xv.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
                let visible = if causal {
                    (r % m.max(1) + 1 + n.saturating_sub(m)).min(n)
                } else {
                    n
                };
                let mx = row[..visible]
                    .iter()
                    .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let mut z = 0.0;
                for j in 0..visible {
                    o[j] = (row[j] - mx).exp();
                    z += o[j];
                }
                o[..visible].iter_mut().for_each(|v| *v /= z);
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, out)?, Op::Softmax(x), rg)
    }

    /// Zero-mean, unit-variance normalisation over the last axis.
    pub fn normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if d == 0 {
            return Err(Error::EmptySequence("layer_norm"));
        }
        let mut out = vec![0.0; xv.len()];
        let mut rstds = Vec::with_capacity(xv.rows());
        for (row, o) in xv.data().chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for (y, &v) in o.iter_mut().zip(row) {
                *y = (v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, out)?, Op::Normalize(x, rstds), rg)
    }

    /// Rows of `table[V, D]` selected by `indices`, shaped `out_shape ++ [D]`.
    pub fn gather(&mut self, table: Var, indices: &[usize], out_shape: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::shape("gather", tv.shape(), &[0, 0]));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        if out_shape.iter().product::<usize>() != indices.len() {
            return Err(Error::shape("gather", out_shape, &[indices.len()]));
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(Error::Capacity {
                    what: "embedding index",
                    needed: i + 1,
                    limit: v,
                });
            }
            out.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let mut shape = out_shape.to_vec();
        shape.push(d);
        let rg = self.rg(&[table]);
        self.push(
            Tensor::new(shape, out)?,
            Op::Gather(table, indices.to_vec()),
            rg,
        )
    }

    /// Mean squared error over all entries, shape `[1]`.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::shape("mse", p.shape(), t.shape()));
        }
        let n = p.len().max(1) as f64;
        let s: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let rg = self.rg(&[pred, target]);
        self.push(Tensor::scalar(s / n), Op::Mse(pred, target), rg)
    }

    /// Row-wise cosine similarity over the last axis, shape `[rows]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("cosine", av.shape(), bv.shape()));
        }
        let d = av.last_dim();
        let out: Vec<f64> = av
            .data()
            .chunks(d)
            .zip(bv.data().chunks(d))
            .map(|(x, y)| cosine(x, y).0)
            .collect();
        let rg = self.rg(&[a, b]);
        let n = out.len();
        self.push(Tensor::new(vec![n], out)?, Op::CosineRows(a, b), rg)
    }

    /// Mean of all entries, shape `[1]`.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::EmptySequence("mean"));
        }
        let m = xv.sum() / xv.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Reverse pass from a `[1]`-shaped loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != [1] {
            return Err(Error::shape("backward", self.value(loss).shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let acc = |v: Var, g: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => {
                        for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                            *e += x;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            };
            let y = &node.value;
            match &node.op {
                Op::Constant => {}
                Op::Param(pi) => match out.by_param.get_mut(pi) {
                    Some(existing) => {
                        for (e, x) in existing.data_mut().iter_mut().zip(dy.data()) {
                            *e += x;
                        }
                    }
                    None => {
                        out.by_param.insert(*pi, dy);
                    }
                },
                Op::MatMul(x, w) => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (k, o) = (wv.shape()[0], wv.shape()[1]);
                    let rows = xv.rows();
                    if self.requires_grad(*x) {
                        let mut dx = vec![0.0; rows * k];
                        for r in 0..rows {
                            let dyr = &dy.data()[r * o..(r + 1) * o];
                            for kk in 0..k {
                                dx[r * k + kk] = dot(dyr, &wv.data()[kk * o..(kk + 1) * o]);
                            }
                        }
                        acc(*x, Tensor::new(xv.shape().to_vec(), dx)?, &mut grads);
                    }
                    if self.requires_grad(*w) {
                        let mut dw = vec![0.0; k * o];
                        for r in 0..rows {
                            let dyr = &dy.data()[r * o..(r + 1) * o];
                            for kk in 0..k {
                                let xv_rk = xv.data()[r * k + kk];
                                if xv_rk == 0.0 {
                                    continue;
                                }
                                for (d, &g) in dw[kk * o..(kk + 1) * o].iter_mut().zip(dyr) {
                                    *d += xv_rk * g;
                                }
                            }
                        }
                        acc(*w, Tensor::new(vec![k, o], dw)?, &mut grads);
                    }
                }
                Op::AddLast(x, b) => {
                    let d = dy.last_dim();
                    if self.requires_grad(*b) {
                        let mut db = vec![0.0; d];
                        for row in dy.data().chunks(d.max(1)) {
                            for (s, &g) in db.iter_mut().zip(row) {
                                *s += g;
                            }
                        }
                        acc(*b, Tensor::new(vec![d], db)?, &mut grads);
                    }
                    acc(*x, dy, &mut grads);
                }
                Op::MulLast(x, gain) => {
                    let (xv, gv) = (self.value(*x), self.value(*gain));
                    let d = dy.last_dim();
                    if self.requires_grad(*gain) {
                        let mut dg = vec![0.0; d];
                        for (row, xr) in dy.data().chunks(d.max(1)).zip(xv.data().chunks(d.max(1)))
                        {
                            for ((s, &g), &xx) in dg.iter_mut().zip(row).zip(xr) {
                                *s += g * xx;
                            }
                        }
                        acc(*gain, Tensor::new(vec![d], dg)?, &mut grads);
                    }
                    if self.requires_grad(*x) {
                        let mut dx = dy.clone();
                        for row in dx.data_mut().chunks_mut(d.max(1)) {
                            for (v, &g) in row.iter_mut().zip(gv.data()) {
                                *v *= g;
                            }
                        }
                        acc(*x, dx, &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, dy.clone(), &mut grads);
                    acc(*b, dy, &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*b, dy.scale(-1.0), &mut grads);
                    acc(*a, dy, &mut grads);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.requires_grad(*a) {
                        acc(*a, dy.zip_map(bv, "mul", |g, v| g * v)?, &mut grads);
                    }
                    if self.requires_grad(*b) {
                        acc(*b, dy.zip_map(av, "mul", |g, v| g * v)?, &mut grads);
                    }
                }
                Op::Affine(x, s) => acc(*x, dy.scale(*s), &mut grads),
                Op::MulScalar(x, s) => {
                    let (xv, sv) = (self.value(*x), self.value(*s));
                    if self.requires_grad(*s) {
                        acc(*s, Tensor::scalar(dot(dy.data(), xv.data())), &mut grads);
                    }
                    if self.requires_grad(*x) {
                        acc(*x, dy.scale(sv.data()[0]), &mut grads);
                    }
                }
                Op::Sigmoid(x) => {
                    acc(
                        *x,
                        dy.zip_map(y, "sigmoid", |g, s| g * s * (1.0 - s))?,
                        &mut grads,
                    );
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let dx = dy.zip_map(xv, "silu", |g, v| {
                        let s = sigmoid_scalar(v);
                        g * s * (1.0 + v * (1.0 - s))
                    })?;
                    acc(*x, dx, &mut grads);
                }
                Op::MeanSeq(x) => {
                    let (b, l, d) = self.value(*x).dims3("mean_seq")?;
                    let inv = 1.0 / l as f64;
                    let mut dx = vec![0.0; b * l * d];
                    for bi in 0..b {
                        for li in 0..l {
                            for di in 0..d {
                                dx[(bi * l + li) * d + di] = dy.data()[bi * d + di] * inv;
                            }
                        }
                    }
                    acc(*x, Tensor::new(vec![b, l, d], dx)?, &mut grads);
                }
                Op::ExpandSeq(x) => {
                    let (b, n, d) = dy.dims3("expand_seq")?;
                    let mut dx = vec![0.0; b * d];
                    for bi in 0..b {
                        for ni in 0..n {
                            for di in 0..d {
                                dx[bi * d + di] += dy.data()[(bi * n + ni) * d + di];
                            }
                        }
                    }
                    acc(*x, Tensor::new(vec![b, 1, d], dx)?, &mut grads);
                }
                Op::ConcatSeq(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let l = self.value(p).shape()[1];
                        if self.requires_grad(p) {
                            acc(p, dy.slice_seq(start, l)?, &mut grads);
                        }
                        start += l;
                    }
                }
                Op::SliceSeq(x, start) => {
                    let (b, l, d) = self.value(*x).dims3("slice_seq")?;
                    let len = dy.shape()[1];
                    let mut dx = vec![0.0; b * l * d];
                    for bi in 0..b {
                        let dst = (bi * l + start) * d;
                        dx[dst..dst + len * d]
                            .copy_from_slice(&dy.data()[bi * len * d..(bi + 1) * len * d]);
                    }
                    acc(*x, Tensor::new(vec![b, l, d], dx)?, &mut grads);
                }
                Op::ConcatLast(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (da, db) = (av.last_dim(), bv.last_dim());
                    let rows = av.rows();
                    let mut ga = Vec::with_capacity(rows * da);
                    let mut gb = Vec::with_capacity(rows * db);
                    for row in dy.data().chunks((da + db).max(1)).take(rows) {
                        ga.extend_from_slice(&row[..da]);
                        gb.extend_from_slice(&row[da..]);
                    }
                    acc(*a, Tensor::new(av.shape().to_vec(), ga)?, &mut grads);
                    acc(*b, Tensor::new(bv.shape().to_vec(), gb)?, &mut grads);
                }
                Op::SplitHeads(x, heads) => {
                    let (b, l, d) = self.value(*x).dims3("split_heads")?;
                    let dx = permute_heads(dy.data(), b, l, *heads, d / heads, false);
                    acc(*x, Tensor::new(vec![b, l, d], dx)?, &mut grads);
                }
                Op::MergeHeads(x, heads) => {
                    let (bh, l, e) = self.value(*x).dims3("merge_heads")?;
                    let dx = permute_heads(dy.data(), bh / heads, l, *heads, e, true);
                    acc(*x, Tensor::new(vec![bh, l, e], dx)?, &mut grads);
                }
                Op::BmmNt(a, b) => {
                    let (g, m, k) = self.value(*a).dims3("bmm_nt")?;
                    let n = self.value(*b).shape()[1];
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let dyv = dy.data();
                    if self.requires_grad(*a) {
                        let mut da = vec![0.0; g * m * k];
                        for gi in 0..g {
                            let o = matmul_rows(
                                &dyv[gi * m * n..(gi + 1) * m * n],
                                &bv[gi * n * k..(gi + 1) * n * k],
                                m,
                                n,
                                k,
                            );
                            da[gi * m * k..(gi + 1) * m * k].copy_from_slice(&o);
                        }
                        acc(*a, Tensor::new(vec![g, m, k], da)?, &mut grads);
                    }
                    if self.requires_grad(*b) {
                        let mut db = vec![0.0; g * n * k];
                        for gi in 0..g {
                            for i in 0..m {
                                let ar = &av[(gi * m + i) * k..(gi * m + i + 1) * k];
                                for j in 0..n {
                                    let c = dyv[(gi * m + i) * n + j];
                                    if c == 0.0 {
                                        continue;
                                    }
                                    for (d, &x) in db[(gi * n + j) * k..(gi * n + j + 1) * k]
                                        .iter_mut()
                                        .zip(ar)
                                    {
                                        *d += c * x;
                                    }
                                }
                            }
                        }
                        acc(*b, Tensor::new(vec![g, n, k], db)?, &mut grads);
                    }
                }
                Op::Bmm(a, b) => {
                    let (g, m, n) = self.value(*a).dims3("bmm")?;
                    let k = self.value(*b).shape()[2];
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let dyv = dy.data();
                    if self.requires_grad(*a) {
                        // da = dy · bᵀ
                        let mut da = vec![0.0; g * m * n];
                        for gi in 0..g {
                            for i in 0..m {
                                let dr = &dyv[(gi * m + i) * k..(gi * m + i + 1) * k];
                                for j in 0..n {
                                    da[(gi * m + i) * n + j] =
                                        dot(dr, &bv[(gi * n + j) * k..(gi * n + j + 1) * k]);
                                }
                            }
                        }
                        acc(*a, Tensor::new(vec![g, m, n], da)?, &mut grads);
                    }
                    if self.requires_grad(*b) {
                        // db = aᵀ · dy
                        let mut db = vec![0.0; g * n * k];
                        for gi in 0..g {
                            for i in 0..m {
                                let dr = &dyv[(gi * m + i) * k..(gi * m + i + 1) * k];
                                for j in 0..n {
                                    let c = av[(gi * m + i) * n + j];
                                    if c == 0.0 {
                                        continue;
                                    }
                                    for (d, &x) in db[(gi * n + j) * k..(gi * n + j + 1) * k]
                                        .iter_mut()
                                        .zip(dr)
                                    {
                                        *d += c * x;
                                    }
                                }
                            }
                        }
                        acc(*b, Tensor::new(vec![g, n, k], db)?, &mut grads);
                    }
                }
                Op::Softmax(x) => {
                    let n = y.last_dim();
                    let mut dx = vec![0.0; y.len()];
                    if n > 0 {
                        for ((yr, gr), o) in y
                            .data()
                            .chunks(n)
                            .zip(dy.data().chunks(n))
                            .zip(dx.chunks_mut(n))
                        {
                            let s = dot(yr, gr);
                            for ((d, &yy), &g) in o.iter_mut().zip(yr).zip(gr) {
                                *d = yy * (g - s);
                            }
                        }
                    }
                    acc(*x, Tensor::new(y.shape().to_vec(), dx)?, &mut grads);
                }
                Op::Normalize(x, rstds) => {
                    let d = y.last_dim();
                    let inv_d = 1.0 / d as f64;
                    let mut dx = vec![0.0; y.len()];
                    for (((yr, gr), o), &rstd) in y
                        .data()
                        .chunks(d)
                        .zip(dy.data().chunks(d))
                        .zip(dx.chunks_mut(d))
                        .zip(rstds)
                    {
                        let mg = gr.iter().sum::<f64>() * inv_d;
                        let mgy = dot(gr, yr) * inv_d;
                        for ((dd, &yy), &g) in o.iter_mut().zip(yr).zip(gr) {
                            *dd = rstd * (g - mg - yy * mgy);
                        }
                    }
                    acc(*x, Tensor::new(y.shape().to_vec(), dx)?, &mut grads);
                }
                Op::Gather(table, indices) => {
                    let tv = self.value(*table);
                    let d = tv.shape()[1];
                    let mut dt = Tensor::zeros(tv.shape());
                    for (r, &i) in indices.iter().enumerate() {
                        for (t, &g) in dt.data_mut()[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&dy.data()[r * d..(r + 1) * d])
                        {
                            *t += g;
                        }
                    }
                    acc(*table, dt, &mut grads);
                }
                Op::Mse(p, t) => {
                    let (pv, tv) = (self.value(*p), self.value(*t));
                    let k = 2.0 * dy.data()[0] / pv.len().max(1) as f64;
                    let dp = pv.zip_map(tv, "mse", |a, b| k * (a - b))?;
                    if self.requires_grad(*t) {
                        acc(*t, dp.scale(-1.0), &mut grads);
                    }
                    acc(*p, dp, &mut grads);
                }
                Op::CosineRows(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let d = av.last_dim();
                    let mut da = vec![0.0; av.len()];
                    let mut db = vec![0.0; bv.len()];
                    for (r, (x, z)) in av.data().chunks(d).zip(bv.data().chunks(d)).enumerate() {
                        let (c, nx, nz) = cosine(x, z);
                        let g = dy.data()[r];
                        for j in 0..d {
                            da[r * d + j] = g * (z[j] / (nx * nz) - c * x[j] / (nx * nx));
                            db[r * d + j] = g * (x[j] / (nx * nz) - c * z[j] / (nz * nz));
                        }
                    }
                    acc(*a, Tensor::new(av.shape().to_vec(), da)?, &mut grads);
                    acc(*b, Tensor::new(bv.shape().to_vec(), db)?, &mut grads);
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let g = dy.data()[0] / xv.len() as f64;
                    acc(*x, Tensor::full(xv.shape(), g), &mut grads);
                }
            }
        }
        Ok(out)
    }
}

const COSINE_EPS: f64 = 1e-12;

/// `(cos, |x|, |z|)` with a tiny floor inside the norms.
fn cosine(x: &[f64], z: &[f64]) -> (f64, f64, f64) {
    let nx = (dot(x, x) + COSINE_EPS).sqrt();
    let nz = (dot(z, z) + COSINE_EPS).sqrt();
    (dot(x, z) / (nx * nz), nx, nz)
}

/// Move between `[B, L, H, E]` and `[B, H, L, E]` layouts.
fn permute_heads(src: &[f64], b: usize, l: usize, h: usize, e: usize, split: bool) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for li in 0..l {
            for hi in 0..h {
                let merged = ((bi * l + li) * h + hi) * e;
                let heads = ((bi * h + hi) * l + li) * e;
                let (from, to) = if split {
                    (merged, heads)
                } else {
                    (heads, merged)
                };
                out[to..to + e].copy_from_slice(&src[from..from + e]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor) -> Tensor {
        let h = 1e-5;
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    fn store_with(x: Tensor) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x", x, true).unwrap();
        s
    }

    /// Check the gradient of `build(x)` summed against a fixed random weighting.
    fn check(x: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let weights = |g: &mut Graph, y: Var| {
            let n = g.value(y).len();
            let w = Tensor::new(
                g.value(y).shape().to_vec(),
                (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect(),
            )
            .unwrap();
            let wv = g.constant(w).unwrap();
            let p = g.mul(y, wv).unwrap();
            g.mean(p).unwrap()
        };
        let store = store_with(x.clone());
        let mut g = Graph::new();
        let xv = g.param(&store, "x").unwrap();
        let y = build(&mut g, xv);
        let loss = weights(&mut g, y);
        let grads = g.backward(loss).unwrap();
        let analytic = grads
            .get(0)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        let numeric = numeric_grad(
            |t| {
                let store = store_with(t.clone());
                let mut g = Graph::new();
                let xv = g.param(&store, "x").unwrap();
                let y = build(&mut g, xv);
                let l = weights(&mut g, y);
                g.value(l).data()[0]
            },
            &x,
        );
        let err = analytic.max_abs_diff(&numeric);
        assert!(
            err < 1e-7,
            "gradient mismatch {err}: {analytic:?} vs {numeric:?}"
        );
    }

    fn sample(shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |i| ((i as f64 * 0.7).sin() * 1.3) + 0.1)
    }

    #[test]
    fn grad_matmul_both_sides() {
        let w = sample(&[3, 4]);
        check(sample(&[2, 2, 3]), |g, x| {
            let wv = g.constant(w.clone()).unwrap();
            g.matmul(x, wv).unwrap()
        });
        let x = sample(&[2, 2, 3]);
        check(sample(&[3, 4]), |g, w| {
            let xv = g.constant(x.clone()).unwrap();
            g.matmul(xv, w).unwrap()
        });
    }

    #[test]
    fn grad_softmax_plain_and_causal() {
        check(sample(&[2, 3, 3]), |g, x| g.softmax(x, false).unwrap());
        check(sample(&[2, 3, 3]), |g, x| g.softmax(x, true).unwrap());
    }

    #[test]
    fn grad_normalize() {
        check(sample(&[3, 5]), |g, x| g.normalize(x, 1e-5).unwrap());
    }

    #[test]
    fn grad_bmm_family() {
        let other = sample(&[2, 4, 3]);
        check(sample(&[2, 2, 3]), |g, a| {
            let b = g.constant(other.clone()).unwrap();
            g.bmm_nt(a, b).unwrap()
        });
        check(sample(&[2, 4, 3]), |g, b| {
            let a = g.constant(sample(&[2, 2, 3])).unwrap();
            g.bmm_nt(a, b).unwrap()
        });
        check(sample(&[2, 2, 4]), |g, a| {
            let b = g.constant(other.clone()).unwrap();
            g.bmm(a, b).unwrap()
        });
        check(sample(&[2, 4, 3]), |g, b| {
            let a = g.constant(sample(&[2, 2, 4])).unwrap();
            g.bmm(a, b).unwrap()
        });
    }

    #[test]
    fn grad_sequence_ops() {
        check(sample(&[2, 3, 4]), |g, x| g.mean_seq(x).unwrap());
        check(sample(&[2, 1, 4]), |g, x| g.expand_seq(x, 3).unwrap());
        check(sample(&[2, 5, 2]), |g, x| g.slice_seq(x, 1, 3).unwrap());
        check(sample(&[2, 2, 4]), |g, x| {
            let c = g.constant(sample(&[2, 3, 4])).unwrap();
            g.concat_seq(&[c, x, c]).unwrap()
        });
        check(sample(&[2, 3, 4]), |g, x| {
            let s = g.split_heads(x, 2).unwrap();
            let s = g.silu(s).unwrap();
            g.merge_heads(s, 2).unwrap()
        });
    }

    #[test]
    fn grad_pointwise_and_broadcast() {
        check(sample(&[3, 4]), |g, x| g.sigmoid(x).unwrap());
        check(sample(&[3, 4]), |g, x| g.silu(x).unwrap());
        check(sample(&[3, 4]), |g, x| g.mul(x, x).unwrap());
        check(sample(&[3, 4]), |g, x| {
            let c = g.constant(sample(&[3, 2])).unwrap();
            g.concat_last(c, x).unwrap()
        });
        check(sample(&[4]), |g, b| {
            let x = g.constant(sample(&[3, 4])).unwrap();
            let y = g.mul_last(x, b).unwrap();
            g.add_last(y, b).unwrap()
        });
        check(sample(&[1]), |g, s| {
            let x = g.constant(sample(&[3, 4])).unwrap();
            g.mul_scalar(x, s).unwrap()
        });
        check(sample(&[5, 3]), |g, t| {
            g.gather(t, &[0, 4, 4, 2], &[2, 2]).unwrap()
        });
    }

    #[test]
    fn grad_losses() {
        check(sample(&[2, 3]), |g, x| {
            let t = g.constant(sample(&[2, 3]).scale(0.3)).unwrap();
            g.mse(x, t).unwrap()
        });
        check(sample(&[3, 4]), |g, x| {
            let t = g.constant(sample(&[3, 4]).map(|v| v * v - 0.2)).unwrap();
            g.cosine_rows(x, t).unwrap()
        });
    }

    #[test]
    fn shared_param_leaf_accumulates() {
        let store = store_with(Tensor::new(vec![1], vec![3.0]).unwrap());
        let mut g = Graph::new();
        let a = g.param(&store, "x").unwrap();
        let b = g.param(&store, "x").unwrap();
        assert_eq!(a, b);
        let p = g.mul(a, b).unwrap();
        let l = g.mean(p).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[6.0]);
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::full(&[2], 1.0), false).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        let p = g.mul(x, x).unwrap();
        let l = g.mean(p).unwrap();
        assert!(g.backward(l).unwrap().get(0).is_none());
    }

    #[test]
    fn causal_mask_zeroes_future() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 3])).unwrap();
        let y = g.softmax(x, true).unwrap();
        let v = g.value(y).data();
        assert_eq!(&v[..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&v[3..6], &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2], 1e308)).unwrap();
        assert!(matches!(g.affine(x, 10.0, 0.0), Err(Error::NonFinite(_))));
    }
}
