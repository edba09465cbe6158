//! Diffusion-transformer action expert predicting a velocity over an action chunk.
//!
//! Block `i`: `z += temb·W_t`, `z += SelfAttn(LN z)`,
//! `z += CrossAttn(LN z, LN cond_i) [+ CrossAttn'(LN z, geo)]`, `z += MLP(LN z)`.

use serde::{Deserialize, Serialize};

use super::timestep::timestep_embedding;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Attention};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

pub const PREFIX: &str = "dit.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DitConfig {
    pub n_dit_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub horizon: usize,
    pub action_dim: usize,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            n_dit_layers: 4,
            d_model: 32,
            heads: 4,
            horizon: 4,
            action_dim: 7,
        }
    }
}

/// What the blocks cross-attend to.
#[derive(Clone, Debug)]
pub enum Conditioning {
    /// One sequence reused by every block.
    Shared(Var),
    /// One sequence per block.
    PerLayer(Vec<Var>),
}

impl Conditioning {
    fn for_block(&self, i: usize) -> Var {
        match self {
            Conditioning::Shared(v) => *v,
            Conditioning::PerLayer(vs) => vs[i],
        }
    }
}

/// Value-level counterpart of [`Conditioning`].
#[derive(Clone, Debug)]
pub enum ConditioningInput {
    Shared(Tensor),
    PerLayer(Vec<Tensor>),
}

#[derive(Clone, Debug)]
pub struct Dit {
    pub config: DitConfig,
    /// Adds the parallel geometric cross-attention branch in every block.
    pub secondary_branch: bool,
}

impl Dit {
    pub fn new(config: DitConfig) -> Self {
        Self {
            config,
            secondary_branch: false,
        }
    }

    pub fn with_secondary_branch(mut self) -> Self {
        self.secondary_branch = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        if c.heads == 0 || !c.d_model.is_multiple_of(c.heads) {
            return Err(Error::Config(format!(
                "dit width {} not divisible by {} heads",
                c.d_model, c.heads
            )));
        }
        if c.n_dit_layers == 0 || c.horizon == 0 || c.action_dim == 0 {
            return Err(Error::Config(
                "dit layers, horizon and action dim must be positive".into(),
            ));
        }
        if !c.d_model.is_multiple_of(2) {
            return Err(Error::Config(
                "dit width must be even for the timestep embedding".into(),
            ));
        }
        Ok(())
    }

    fn self_attn(i: usize, heads: usize) -> Attention {
        Attention::new(format!("dit.block{i}.self_attn"), heads)
    }

    fn cross_attn(i: usize, heads: usize) -> Attention {
        Attention::new(format!("dit.block{i}.cross_attn"), heads)
    }

    pub fn geo_attn(i: usize, heads: usize) -> Attention {
        Attention::new(format!("dit.block{i}.geo_attn"), heads)
    }

    pub fn declare(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        self.validate()?;
        let c = &self.config;
        let d = c.d_model;
        store.init(seed, "dit.in.w", &[c.action_dim, d], Init::FanIn, true)?;
        store.init(seed, "dit.in.b", &[d], Init::Zeros, true)?;
        store.init(
            seed,
            "dit.act_pos",
            &[c.horizon, d],
            Init::Normal(0.5),
            true,
        )?;
        for i in 0..c.n_dit_layers {
            let p = format!("dit.block{i}");
            store.init(seed, &format!("{p}.time.w"), &[d, d], Init::FanIn, true)?;
            nn::declare_layer_norm(store, &format!("{p}.ln1"), d)?;
            Self::self_attn(i, c.heads).declare(store, seed, d, d, d)?;
            nn::declare_layer_norm(store, &format!("{p}.ln2"), d)?;
            nn::declare_layer_norm(store, &format!("{p}.cond_norm"), d)?;
            Self::cross_attn(i, c.heads).declare(store, seed, d, d, d)?;
            if self.secondary_branch {
                Self::geo_attn(i, c.heads).declare(store, seed, d, d, d)?;
            }
            nn::declare_layer_norm(store, &format!("{p}.ln3"), d)?;
            nn::declare_mlp(store, seed, &format!("{p}.mlp"), d, 2 * d, d)?;
        }
        nn::declare_layer_norm(store, "dit.ln_out", d)?;
        store.init(seed, "dit.out.w", &[d, c.action_dim], Init::FanIn, true)?;
        store.init(seed, "dit.out.b", &[c.action_dim], Init::Zeros, true)?;
        Ok(())
    }

    /// Block `i` applied to latents `z [B, T, D]` with timestep embedding `temb [B, 1, D]`.
    #[allow(clippy::too_many_arguments)]
    pub fn block(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        i: usize,
        z: Var,
        temb: Var,
        cond: Var,
        secondary: Option<Var>,
    ) -> Result<Var> {
        let heads = self.config.heads;
        let t = g.shape(z)[1];
        let p = format!("dit.block{i}");
        let wt = g.param(store, &format!("{p}.time.w"))?;
        let te = g.matmul(temb, wt)?;
        let te = g.expand_seq(te, t)?;
        let mut z = g.add(z, te)?;

        let h = nn::layer_norm(g, store, &format!("{p}.ln1"), z)?;
        let sa = Self::self_attn(i, heads).forward(g, store, h, h)?;
        z = g.add(z, sa)?;

        let h = nn::layer_norm(g, store, &format!("{p}.ln2"), z)?;
        let kv = nn::layer_norm(g, store, &format!("{p}.cond_norm"), cond)?;
        let mut ca = Self::cross_attn(i, heads).forward(g, store, h, kv)?;
        if let Some(geo) = secondary {
            let ga = Self::geo_attn(i, heads).forward(g, store, h, geo)?;
            ca = g.add(ca, ga)?;
        }
        z = g.add(z, ca)?;

        let h = nn::layer_norm(g, store, &format!("{p}.ln3"), z)?;
        let m = nn::mlp(g, store, &format!("{p}.mlp"), h)?;
        g.add(z, m)
    }

    /// Sinusoidal embedding per batch element as a constant `[B, 1, D]`.
    pub fn time_embedding(&self, g: &mut Graph, tau: &[f64]) -> Result<Var> {
        let d = self.config.d_model;
        let mut temb = Vec::with_capacity(tau.len() * d);
        for &tv in tau {
            temb.extend_from_slice(timestep_embedding(tv, d)?.data());
        }
        g.constant(Tensor::new(vec![tau.len(), 1, d], temb)?)
    }

    /// Velocity prediction `[B, T, d_a]` for `noisy [B, T, d_a]` at per-sample times `tau`.
    ///
    /// `secondary` feeds the geometric branch and is required iff the branch exists.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        noisy: Var,
        cond: &Conditioning,
        tau: &[f64],
        secondary: Option<Var>,
    ) -> Result<Var> {
        let c = &self.config;
        let (b, t, a) = g.value(noisy).dims3("dit input")?;
        if t != c.horizon || a != c.action_dim {
            return Err(Error::shape(
                "dit input",
                &[b, t, a],
                &[b, c.horizon, c.action_dim],
            ));
        }
        if tau.len() != b {
            return Err(Error::shape("dit tau", &[b], &[tau.len()]));
        }
        if let Conditioning::PerLayer(vs) = cond {
            if vs.len() != c.n_dit_layers {
                return Err(Error::Config(format!(
                    "layer-wise conditioning has {} sequences for {} dit layers",
                    vs.len(),
                    c.n_dit_layers
                )));
            }
        }
        match (self.secondary_branch, secondary) {
            (true, None) => {
                return Err(Error::SchemeContract(
                    "dual-attention expert needs geometric features".into(),
                ));
            }
            (false, Some(_)) => {
                return Err(Error::SchemeContract(
                    "geometric features given to a single-attention expert".into(),
                ));
            }
            _ => {}
        }

        let temb = self.time_embedding(g, tau)?;

        let w_in = g.param(store, "dit.in.w")?;
        let b_in = g.param(store, "dit.in.b")?;
        let mut z = nn::linear(g, noisy, w_in, Some(b_in))?;
        let pos_table = g.param(store, "dit.act_pos")?;
        let idx: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let pos = g.gather(pos_table, &idx, &[b, t])?;
        z = g.add(z, pos)?;

        for i in 0..c.n_dit_layers {
            z = self.block(g, store, i, z, temb, cond.for_block(i), secondary)?;
        }
        let h = nn::layer_norm(g, store, "dit.ln_out", z)?;
        let w_out = g.param(store, "dit.out.w")?;
        let b_out = g.param(store, "dit.out.b")?;
        nn::linear(g, h, w_out, Some(b_out))
    }
}

/// Value-level velocity prediction.
pub fn dit_forward(
    noisy: &Tensor,
    cond: &ConditioningInput,
    tau: &[f64],
    dit: &Dit,
    store: &ParamStore,
    secondary: Option<&Tensor>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(noisy.clone())?;
    let c = match cond {
        ConditioningInput::Shared(t) => Conditioning::Shared(g.constant(t.clone())?),
        ConditioningInput::PerLayer(ts) => {
            let vs = ts
                .iter()
                .map(|t| g.constant(t.clone()))
                .collect::<Result<Vec<_>>>()?;
            Conditioning::PerLayer(vs)
        }
    };
    let s = secondary.map(|t| g.constant(t.clone())).transpose()?;
    let out = dit.forward(&mut g, store, x, &c, tau, s)?;
    Ok(g.value(out).clone())
}
