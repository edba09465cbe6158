//! Layer building blocks expressed on the autograd [`Graph`].

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};

pub const LN_EPS: f64 = 1e-5;

pub fn linear(g: &mut Graph, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match bias {
        Some(b) => g.add_last(y, b),
        None => Ok(y),
    }
}

/// Layer norm with affine `gain`/`bias`, reading `{prefix}.gain` and `{prefix}.bias`.
pub fn layer_norm(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let gain = g.param(store, &format!("{prefix}.gain"))?;
    let bias = g.param(store, &format!("{prefix}.bias"))?;
    let n = g.normalize(x, LN_EPS)?;
    let y = g.mul_last(n, gain)?;
    g.add_last(y, bias)
}

pub fn declare_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
    store.insert(
        format!("{prefix}.gain"),
        crate::Tensor::full(&[d], 1.0),
        true,
    )?;
    store.insert(format!("{prefix}.bias"), crate::Tensor::zeros(&[d]), true)?;
    Ok(())
}

/// Bias-free multi-head attention weights under one prefix.
#[derive(Clone, Debug)]
pub struct Attention {
    pub prefix: String,
    pub heads: usize,
    pub causal: bool,
}

impl Attention {
    pub fn new(prefix: impl Into<String>, heads: usize) -> Self {
        Self {
            prefix: prefix.into(),
            heads,
            causal: false,
        }
    }

    pub fn causal(mut self) -> Self {
        self.causal = true;
        self
    }

    pub fn wq(&self) -> String {
        format!("{}.wq", self.prefix)
    }
    pub fn wk(&self) -> String {
        format!("{}.wk", self.prefix)
    }
    pub fn wv(&self) -> String {
        format!("{}.wv", self.prefix)
    }
    pub fn wo(&self) -> String {
        format!("{}.wo", self.prefix)
    }

    /// Declare `wq [d_q, d]`, `wk`/`wv [d_kv, d]` and `wo [d, d_q]`.
    pub fn declare(
        &self,
        store: &mut ParamStore,
        seed: u64,
        d_q: usize,
        d_kv: usize,
        d: usize,
    ) -> Result<()> {
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{}: width {d} not divisible by {} heads",
                self.prefix, self.heads
            )));
        }
        store.init(seed, &self.wq(), &[d_q, d], Init::FanIn, true)?;
        store.init(seed, &self.wk(), &[d_kv, d], Init::FanIn, true)?;
        store.init(seed, &self.wv(), &[d_kv, d], Init::FanIn, true)?;
        store.init(seed, &self.wo(), &[d, d_q], Init::FanIn, true)?;
        Ok(())
    }

    /// Scaled dot-product attention of `q_in [B, Lq, Dq]` over `kv_in [B, Lk, Dkv]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q_in: Var, kv_in: Var) -> Result<Var> {
        let wq = g.param(store, &self.wq())?;
        let wk = g.param(store, &self.wk())?;
        let wv = g.param(store, &self.wv())?;
        let wo = g.param(store, &self.wo())?;
        let d = g.shape(wq)[1];
        if !d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {d} not divisible by {} heads",
                self.heads
            )));
        }
        let q = g.matmul(q_in, wq)?;
        let k = g.matmul(kv_in, wk)?;
        let v = g.matmul(kv_in, wv)?;
        let q = g.split_heads(q, self.heads)?;
        let k = g.split_heads(k, self.heads)?;
        let v = g.split_heads(v, self.heads)?;
        let scores = g.bmm_nt(q, k)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let scores = g.scale(scores, scale)?;
        let probs = g.softmax(scores, self.causal)?;
        let ctx = g.bmm(probs, v)?;
        let ctx = g.merge_heads(ctx, self.heads)?;
        g.matmul(ctx, wo)
    }
}

/// Two-layer SiLU MLP with biases: `{prefix}.w1/b1/w2/b2`.
pub fn declare_mlp(
    store: &mut ParamStore,
    seed: u64,
    prefix: &str,
    d_in: usize,
    hidden: usize,
    d_out: usize,
) -> Result<()> {
    store.init(
        seed,
        &format!("{prefix}.w1"),
        &[d_in, hidden],
        Init::FanIn,
        true,
    )?;
    store.init(seed, &format!("{prefix}.b1"), &[hidden], Init::Zeros, true)?;
    store.init(
        seed,
        &format!("{prefix}.w2"),
        &[hidden, d_out],
        Init::FanIn,
        true,
    )?;
    store.init(seed, &format!("{prefix}.b2"), &[d_out], Init::Zeros, true)?;
    Ok(())
}

pub fn mlp(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w1 = g.param(store, &format!("{prefix}.w1"))?;
    let b1 = g.param(store, &format!("{prefix}.b1"))?;
    let w2 = g.param(store, &format!("{prefix}.w2"))?;
    let b2 = g.param(store, &format!("{prefix}.b2"))?;
    let h = linear(g, x, w1, Some(b1))?;
    let h = g.silu(h)?;
    linear(g, h, w2, Some(b2))
}
