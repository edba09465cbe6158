//! Value-level forms of the numeric primitives.
//!
//! Each function evaluates the same graph kernels used during training on
//! constant inputs, so there is a single implementation of every operation.

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::nn::LN_EPS;
use crate::tensor::Tensor;

/// `y[b, m, o] = Σ_k x[b, m, k] · w[k, o] (+ bias[o])`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let wv = g.constant(w.clone())?;
    let mut y = g.matmul(xv, wv)?;
    if let Some(b) = bias {
        let bv = g.constant(b.clone())?;
        y = g.add_last(y, bv)?;
    }
    Ok(g.value(y).clone())
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(crate::tensor::sigmoid_scalar)
}

/// Mean over the sequence axis: `[B, L, D] -> [B, 1, D]`.
pub fn mean_pool_seq(h: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let hv = g.constant(h.clone())?;
    let y = g.mean_seq(hv)?;
    Ok(g.value(y).clone())
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let gv = g.constant(gain.clone())?;
    let bv = g.constant(bias.clone())?;
    let n = g.normalize(xv, LN_EPS)?;
    let y = g.mul_last(n, gv)?;
    let y = g.add_last(y, bv)?;
    Ok(g.value(y).clone())
}

/// Projection weights for one attention module, stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

/// Multi-head scaled dot-product cross-attention of `q` over `kv`.
pub fn cross_attention(
    q: &Tensor,
    kv: &Tensor,
    w: &AttentionWeights,
    heads: usize,
) -> Result<Tensor> {
    let d = w.wq.shape().get(1).copied().unwrap_or(0);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "width {d} not divisible by {heads} heads"
        )));
    }
    let mut store = crate::params::ParamStore::new();
    store.insert("a.wq", w.wq.clone(), false)?;
    store.insert("a.wk", w.wk.clone(), false)?;
    store.insert("a.wv", w.wv.clone(), false)?;
    store.insert("a.wo", w.wo.clone(), false)?;
    let mut g = Graph::new();
    let qv = g.constant(q.clone())?;
    let kvv = g.constant(kv.clone())?;
    let y = crate::nn::Attention::new("a", heads).forward(&mut g, &store, qv, kvv)?;
    Ok(g.value(y).clone())
}
