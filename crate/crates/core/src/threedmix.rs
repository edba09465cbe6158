//! Semantic-conditioned gated fusion of language-model states with geometric tokens.
//!
//! ```text
//! F_geo  = F_vggt · W_proj
//! s      = mean_L(H)
//! g_j    = σ([s ; F_geo_j] · W_gate)
//! fused_j = g_j ⊙ (s · W_s) + (1 − g_j) ⊙ (F_geo_j · W_g)
//! H_cond = [H ; fused]
//! ```
//! No biases anywhere. `W_gate` starts at zero so every gate starts at 0.5.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

/// Parameter ids of one fusion block under a prefix, e.g. `mix.` or `mix.layer2.`.
#[derive(Clone, Debug)]
pub struct MixNames {
    pub w_proj: String,
    pub w_gate: String,
    pub w_s: String,
    pub w_g: String,
}

impl MixNames {
    /// Single-block layout: `{prefix}w_proj`, `{prefix}w_gate`, ...
    pub fn single(prefix: &str) -> Self {
        Self {
            w_proj: format!("{prefix}w_proj"),
            w_gate: format!("{prefix}w_gate"),
            w_s: format!("{prefix}w_s"),
            w_g: format!("{prefix}w_g"),
        }
    }

    /// Layer-wise layout: shared `{prefix}w_proj`, per-layer `{prefix}layer{i}.w_gate`, ...
    pub fn layer(prefix: &str, i: usize) -> Self {
        Self {
            w_proj: format!("{prefix}w_proj"),
            w_gate: format!("{prefix}layer{i}.w_gate"),
            w_s: format!("{prefix}layer{i}.w_s"),
            w_g: format!("{prefix}layer{i}.w_g"),
        }
    }
}

fn declare_gate(store: &mut ParamStore, seed: u64, n: &MixNames, d: usize) -> Result<()> {
    store.init(seed, &n.w_gate, &[2 * d, d], Init::Zeros, true)?;
    store.init(seed, &n.w_s, &[d, d], Init::FanIn, true)?;
    store.init(seed, &n.w_g, &[d, d], Init::FanIn, true)?;
    Ok(())
}

pub fn declare_single(
    store: &mut ParamStore,
    seed: u64,
    prefix: &str,
    d_vggt: usize,
    d: usize,
) -> Result<()> {
    let n = MixNames::single(prefix);
    store.init(seed, &n.w_proj, &[d_vggt, d], Init::FanIn, true)?;
    declare_gate(store, seed, &n, d)
}

pub fn declare_layerwise(
    store: &mut ParamStore,
    seed: u64,
    prefix: &str,
    d_vggt: usize,
    d: usize,
    layers: usize,
) -> Result<()> {
    store.init(
        seed,
        &format!("{prefix}w_proj"),
        &[d_vggt, d],
        Init::FanIn,
        true,
    )?;
    for i in 0..layers {
        declare_gate(store, seed, &MixNames::layer(prefix, i), d)?;
    }
    Ok(())
}

/// Graph handles of one gated fusion.
#[derive(Clone, Copy, Debug)]
pub struct FuseVars {
    pub gate: Var,
    pub fused: Var,
}

pub fn project_geo_graph(g: &mut Graph, f_vggt: Var, w_proj: Var) -> Result<Var> {
    g.matmul(f_vggt, w_proj)
}

pub fn gate_and_fuse_graph(
    g: &mut Graph,
    h: Var,
    f_geo: Var,
    w_gate: Var,
    w_s: Var,
    w_g: Var,
) -> Result<FuseVars> {
    let (bh, _, dh) = g.value(h).dims3("gate_and_fuse")?;
    let (bf, n, df) = g.value(f_geo).dims3("gate_and_fuse")?;
    if bh != bf || dh != df {
        return Err(Error::shape("gate_and_fuse", g.shape(h), g.shape(f_geo)));
    }
    let s = g.mean_seq(h)?;
    let s_b = g.expand_seq(s, n)?;
    let pair = g.concat_last(s_b, f_geo)?;
    let logits = g.matmul(pair, w_gate)?;
    let gate = g.sigmoid(logits)?;
    let sem = g.matmul(s, w_s)?;
    let sem = g.expand_seq(sem, n)?;
    let geo = g.matmul(f_geo, w_g)?;
    let a = g.mul(gate, sem)?;
    let inv = g.one_minus(gate)?;
    let b = g.mul(inv, geo)?;
    let fused = g.add(a, b)?;
    Ok(FuseVars { gate, fused })
}

pub fn build_conditioning_graph(g: &mut Graph, h: Var, fused: Var) -> Result<Var> {
    let (_, _, dh) = g.value(h).dims3("build_conditioning")?;
    let (_, _, df) = g.value(fused).dims3("build_conditioning")?;
    if dh != df {
        return Err(Error::shape(
            "build_conditioning",
            g.shape(h),
            g.shape(fused),
        ));
    }
    g.concat_seq(&[h, fused])
}

/// Full single-block pipeline on the graph; returns the conditioning sequence and gate.
pub fn threedmix_graph(
    g: &mut Graph,
    store: &ParamStore,
    names: &MixNames,
    h: Var,
    f_vggt: Var,
) -> Result<(Var, FuseVars)> {
    let w_proj = g.param(store, &names.w_proj)?;
    let f_geo = project_geo_graph(g, f_vggt, w_proj)?;
    fuse_projected_graph(g, store, names, h, f_geo)
}

/// Gate and concatenate with an already projected `F_geo`.
pub fn fuse_projected_graph(
    g: &mut Graph,
    store: &ParamStore,
    names: &MixNames,
    h: Var,
    f_geo: Var,
) -> Result<(Var, FuseVars)> {
    let w_gate = g.param(store, &names.w_gate)?;
    let w_s = g.param(store, &names.w_s)?;
    let w_g = g.param(store, &names.w_g)?;
    let fv = gate_and_fuse_graph(g, h, f_geo, w_gate, w_s, w_g)?;
    let cond = build_conditioning_graph(g, h, fv.fused)?;
    Ok((cond, fv))
}

/// Values of one fusion block.
#[derive(Clone, Debug, PartialEq)]
pub struct ThreeDMixParams {
    pub w_proj: Tensor,
    pub w_gate: Tensor,
    pub w_s: Tensor,
    pub w_g: Tensor,
}

impl ThreeDMixParams {
    pub fn from_store(store: &ParamStore, names: &MixNames) -> Result<Self> {
        Ok(Self {
            w_proj: store.value(&names.w_proj)?.clone(),
            w_gate: store.value(&names.w_gate)?.clone(),
            w_s: store.value(&names.w_s)?.clone(),
            w_g: store.value(&names.w_g)?.clone(),
        })
    }

    /// Freshly initialised block: zero gate weights, fan-in uniform elsewhere.
    pub fn init(seed: u64, d_vggt: usize, d: usize) -> Self {
        let mut s = ParamStore::new();
        declare_single(&mut s, seed, "", d_vggt, d).expect("fresh store");
        Self::from_store(&s, &MixNames::single("")).expect("declared above")
    }
}

/// Shared projection plus one gate block per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerwiseThreeDMixParams {
    pub w_proj: Tensor,
    /// `(W_gate, W_s, W_g)` per layer.
    pub layers: Vec<(Tensor, Tensor, Tensor)>,
}

impl LayerwiseThreeDMixParams {
    pub fn from_store(store: &ParamStore, prefix: &str, layers: usize) -> Result<Self> {
        let mut out = Vec::with_capacity(layers);
        for i in 0..layers {
            let n = MixNames::layer(prefix, i);
            out.push((
                store.value(&n.w_gate)?.clone(),
                store.value(&n.w_s)?.clone(),
                store.value(&n.w_g)?.clone(),
            ));
        }
        Ok(Self {
            w_proj: store.value(&format!("{prefix}w_proj"))?.clone(),
            layers: out,
        })
    }

    /// Layer `i` as a standalone block.
    pub fn block(&self, i: usize) -> ThreeDMixParams {
        let (w_gate, w_s, w_g) = self.layers[i].clone();
        ThreeDMixParams {
            w_proj: self.w_proj.clone(),
            w_gate,
            w_s,
            w_g,
        }
    }
}

/// Per-position, per-channel gate values, each strictly inside `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateField {
    pub values: Tensor,
}

/// `[H ; fused]` with the lengths of both parts.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningSequence {
    pub tokens: Tensor,
    pub semantic_len: usize,
    pub geo_len: usize,
}

impl ConditioningSequence {
    pub fn semantic_prefix(&self) -> Tensor {
        self.tokens
            .slice_seq(0, self.semantic_len)
            .expect("prefix within tokens")
    }
}

pub fn project_geo(f_vggt: &Tensor, w_proj: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let f = g.constant(f_vggt.clone())?;
    let w = g.constant(w_proj.clone())?;
    let y = project_geo_graph(&mut g, f, w)?;
    Ok(g.value(y).clone())
}

pub fn gate_and_fuse(
    h: &Tensor,
    f_geo: &Tensor,
    p: &ThreeDMixParams,
) -> Result<(GateField, Tensor)> {
    let mut g = Graph::new();
    let hv = g.constant(h.clone())?;
    let fv = g.constant(f_geo.clone())?;
    let w_gate = g.constant(p.w_gate.clone())?;
    let w_s = g.constant(p.w_s.clone())?;
    let w_g = g.constant(p.w_g.clone())?;
    let out = gate_and_fuse_graph(&mut g, hv, fv, w_gate, w_s, w_g)?;
    Ok((
        GateField {
            values: g.value(out.gate).clone(),
        },
        g.value(out.fused).clone(),
    ))
}

pub fn build_conditioning(h: &Tensor, fused: &Tensor) -> Result<ConditioningSequence> {
    let (bh, l, dh) = h.dims3("build_conditioning")?;
    let (bf, n, df) = fused.dims3("build_conditioning")?;
    if bh != bf || dh != df {
        return Err(Error::shape("build_conditioning", h.shape(), fused.shape()));
    }
    Ok(ConditioningSequence {
        tokens: Tensor::concat_seq(&[h, fused])?,
        semantic_len: l,
        geo_len: n,
    })
}

/// Complete single-block pipeline on values.
pub fn threedmix(
    h: &Tensor,
    f_vggt: &Tensor,
    p: &ThreeDMixParams,
) -> Result<(GateField, ConditioningSequence)> {
    let f_geo = project_geo(f_vggt, &p.w_proj)?;
    let (gate, fused) = gate_and_fuse(h, &f_geo, p)?;
    Ok((gate, build_conditioning(h, &fused)?))
}

/// One conditioning sequence per layer; the projection is computed once and shared.
pub fn layerwise_fuse(
    per_layer_h: &[Tensor],
    f_vggt: &Tensor,
    p: &LayerwiseThreeDMixParams,
) -> Result<Vec<ConditioningSequence>> {
    if per_layer_h.len() != p.layers.len() {
        return Err(Error::Config(format!(
            "{} hidden-state layers for {} fusion blocks",
            per_layer_h.len(),
            p.layers.len()
        )));
    }
    let f_geo = project_geo(f_vggt, &p.w_proj)?;
    per_layer_h
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let (_, fused) = gate_and_fuse(h, &f_geo, &p.block(i))?;
            build_conditioning(h, &fused)
        })
        .collect()
}

/// Which of `n_layers` layers receive fused tokens when skipping `k` layers between injections.
pub fn sparse_layer_schedule(n_layers: usize, k: i64) -> Result<Vec<bool>> {
    sparse_layer_schedule_with_phase(n_layers, k, 0)
}

/// Like [`sparse_layer_schedule`] with the first injection at layer `phase` (0-based).
pub fn sparse_layer_schedule_with_phase(
    n_layers: usize,
    k: i64,
    phase: usize,
) -> Result<Vec<bool>> {
    if n_layers == 0 {
        return Err(Error::Config(
            "sparse schedule needs at least one layer".into(),
        ));
    }
    if k < 0 {
        return Err(Error::Config(format!("sparse skip count {k} is negative")));
    }
    if phase >= n_layers {
        return Err(Error::Config(format!(
            "sparse phase {phase} outside {n_layers} layers"
        )));
    }
    let stride = k as usize + 1;
    Ok((0..n_layers)
        .map(|i| i >= phase && (i - phase).is_multiple_of(stride))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn identity_projection() {
        let f = RngStream::new(1, 1).normal_tensor(&[2, 3, 4], 1.0);
        assert_eq!(project_geo(&f, &Tensor::identity(4)).unwrap(), f);
        let z = project_geo(
            &Tensor::zeros(&[2, 3, 4]),
            &RngStream::new(1, 2).normal_tensor(&[4, 5], 1.0),
        )
        .unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gate_weights_blend_evenly() {
        let p = ThreeDMixParams::init(3, 4, 5);
        let mut r = RngStream::new(2, 0);
        let h = r.normal_tensor(&[2, 3, 5], 1.0);
        let f = r.normal_tensor(&[2, 2, 5], 1.0);
        let (gate, fused) = gate_and_fuse(&h, &f, &p).unwrap();
        assert!(gate.values.data().iter().all(|&v| v == 0.5));
        let s = crate::ops::mean_pool_seq(&h).unwrap();
        let sem = crate::ops::linear(&s, &p.w_s, None).unwrap();
        let geo = crate::ops::linear(&f, &p.w_g, None).unwrap();
        for b in 0..2 {
            for j in 0..2 {
                for c in 0..5 {
                    let want = 0.5 * (sem.get(&[b, 0, c]) + geo.get(&[b, j, c]));
                    assert!((fused.get(&[b, j, c]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn empty_geo_leaves_semantics() {
        let p = ThreeDMixParams::init(3, 4, 5);
        let h = RngStream::new(2, 0).normal_tensor(&[1, 3, 5], 1.0);
        let (_, c) = threedmix(&h, &Tensor::zeros(&[1, 0, 4]), &p).unwrap();
        assert_eq!((c.semantic_len, c.geo_len), (3, 0));
        assert!(c.tokens.bit_eq(&h));
    }

    #[test]
    fn conditioning_rejects_width_mismatch() {
        let r = build_conditioning(&Tensor::zeros(&[1, 2, 4]), &Tensor::zeros(&[1, 2, 5]));
        assert!(matches!(r, Err(Error::Shape { .. })));
    }

    #[test]
    fn schedule_enumeration() {
        assert_eq!(sparse_layer_schedule(4, 0).unwrap(), vec![true; 4]);
        assert_eq!(
            sparse_layer_schedule(4, 1).unwrap(),
            vec![true, false, true, false]
        );
        assert_eq!(
            sparse_layer_schedule(4, 2).unwrap(),
            vec![true, false, false, true]
        );
        assert_eq!(sparse_layer_schedule(1, 5).unwrap(), vec![true]);
        assert_eq!(
            sparse_layer_schedule_with_phase(4, 1, 1).unwrap(),
            vec![false, true, false, true]
        );
        assert!(sparse_layer_schedule(4, -1).is_err());
        assert!(sparse_layer_schedule(0, 0).is_err());
    }

    #[test]
    fn layerwise_length_mismatch() {
        let mut s = ParamStore::new();
        declare_layerwise(&mut s, 1, "mix.", 4, 5, 2).unwrap();
        let p = LayerwiseThreeDMixParams::from_store(&s, "mix.", 2).unwrap();
        let h = Tensor::zeros(&[1, 2, 5]);
        assert!(layerwise_fuse(&[h], &Tensor::zeros(&[1, 1, 4]), &p).is_err());
    }
}
