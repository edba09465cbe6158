//! Scheme-specific operations, on the autograd graph and as value-level wrappers.

use crate::autograd::{Graph, Var};
use crate::backbones::Dit;
use crate::error::{Error, Result};
use crate::nn::{self, Attention, LN_EPS};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;
use crate::threedmix::{self, ConditioningSequence};

use super::FusionSchemeId;

pub const AE_PROJ: &str = "ae.w_proj";
pub const EARLY_PROJ: &str = "early.w_proj";
pub const MIXER_GATE: &str = "mixer.w_gate";
pub const MIXER_PROJ: &str = "mixer.w_proj";
pub const XATTN: &str = "xattn.attn";
pub const MIX_PREFIX: &str = "mix.";
pub const TOK_ALIGN: &str = "tok.w_align";
pub const TOK_PROJ: &str = "tok.w_proj";
pub const MID_PROJ: &str = "mid.w_proj";
pub const MID_ALPHA: &str = "mid.alpha";
pub const MID_LN: &str = "mid.ln";
pub const MID_ATTN: &str = "mid.attn";
pub const SF_PROJ: &str = "sf.proj";
pub const VIS_ATTN: &str = "vis.attn";

/// Widths a scheme's parameters depend on.
#[derive(Clone, Copy, Debug)]
pub struct SchemeDims {
    pub d_model: usize,
    pub d_vggt: usize,
    pub heads: usize,
    pub n_dit_layers: usize,
    /// One gate block per expert layer instead of a single shared one.
    pub layerwise: bool,
}

/// Insert the parameters owned by `id` (the dual-attention branch lives in the expert).
pub fn declare(
    store: &mut ParamStore,
    seed: u64,
    id: FusionSchemeId,
    dims: &SchemeDims,
) -> Result<()> {
    let (d, dv, h) = (dims.d_model, dims.d_vggt, dims.heads);
    match id {
        FusionSchemeId::None => {}
        FusionSchemeId::AeFusion => {
            store.init(seed, AE_PROJ, &[dv, d], Init::FanIn, true)?;
        }
        FusionSchemeId::EarlyFusion => {
            store.init(seed, EARLY_PROJ, &[dv, d], Init::FanIn, true)?;
        }
        FusionSchemeId::ConcatFusion => declare_mixer(store, seed, dv, d)?,
        FusionSchemeId::CrossattnFusion => {
            declare_mixer(store, seed, dv, d)?;
            Attention::new(XATTN, h).declare(store, seed, d, d, d)?;
        }
        FusionSchemeId::GatedFusion => {
            if dims.layerwise {
                threedmix::declare_layerwise(store, seed, MIX_PREFIX, dv, d, dims.n_dit_layers)?;
            } else {
                threedmix::declare_single(store, seed, MIX_PREFIX, dv, d)?;
            }
        }
        FusionSchemeId::ThreedTokens => {
            store.init(seed, TOK_ALIGN, &[d, d], Init::FanIn, true)?;
            store.init(seed, TOK_PROJ, &[dv, d], Init::FanIn, true)?;
        }
        FusionSchemeId::MidlayerInjection => {
            store.init(seed, MID_PROJ, &[dv, d], Init::FanIn, true)?;
            nn::declare_layer_norm(store, MID_LN, d)?;
            Attention::new(MID_ATTN, h).declare(store, seed, d, d, d)?;
            store.init(seed, MID_ALPHA, &[1], Init::Zeros, true)?;
        }
        FusionSchemeId::SpatialForcing => {
            nn::declare_mlp(store, seed, SF_PROJ, d, 2 * d, dv)?;
        }
        FusionSchemeId::VisualFusion => {
            Attention::new(VIS_ATTN, h).declare(store, seed, d, dv, d)?;
        }
    }
    Ok(())
}

fn declare_mixer(store: &mut ParamStore, seed: u64, dv: usize, d: usize) -> Result<()> {
    store.init(seed, MIXER_GATE, &[2 * dv, dv], Init::Zeros, true)?;
    store.init(seed, MIXER_PROJ, &[dv, d], Init::FanIn, true)?;
    Ok(())
}

/// `[X ; F_vggt · W_proj]`, bounded by the backbone's maximum length.
pub fn early_fusion_inputs_graph(
    g: &mut Graph,
    x: Var,
    f_vggt: Var,
    w_proj: Var,
    max_len: usize,
) -> Result<Var> {
    let l = g.shape(x)[1];
    let n = g.shape(f_vggt)[1];
    if l + n > max_len {
        return Err(Error::Capacity {
            what: "early-fusion sequence length",
            needed: l + n,
            limit: max_len,
        });
    }
    let f = g.matmul(f_vggt, w_proj)?;
    g.concat_seq(&[x, f])
}

/// Per-patch gate between frame-specific and global geometric tokens, then projection:
/// `m = σ([frame ; global] · W_mix)`, `out = (m ⊙ frame + (1 − m) ⊙ global) · W_proj`.
pub fn gate_mixer_graph(
    g: &mut Graph,
    frame: Var,
    global: Var,
    w_mix: Var,
    w_proj: Var,
) -> Result<Var> {
    let (_, n, _) = g.value(frame).dims3("gate_mixer")?;
    let (_, one, _) = g.value(global).dims3("gate_mixer")?;
    if one != 1 {
        return Err(Error::SchemeContract(format!(
            "gate mixer needs exactly one global token, got {one}"
        )));
    }
    let gb = g.expand_seq(global, n)?;
    let pair = g.concat_last(frame, gb)?;
    let logits = g.matmul(pair, w_mix)?;
    let m = g.sigmoid(logits)?;
    let a = g.mul(m, frame)?;
    let inv = g.one_minus(m)?;
    let b = g.mul(inv, gb)?;
    let blend = g.add(a, b)?;
    g.matmul(blend, w_proj)
}

/// `F' = CrossAttn(F, H, H) + F`, then `[H ; F']`.
pub fn crossattn_fusion_graph(
    g: &mut Graph,
    store: &ParamStore,
    heads: usize,
    h: Var,
    f_geo: Var,
) -> Result<Var> {
    let a = Attention::new(XATTN, heads).forward(g, store, f_geo, h)?;
    let f2 = g.add(a, f_geo)?;
    threedmix::build_conditioning_graph(g, h, f2)
}

/// `1 − cos(h · W_align, f · W_proj)` averaged over the batch.
pub fn threed_tokens_loss_graph(
    g: &mut Graph,
    h_tok: Var,
    f_pooled: Var,
    w_align: Var,
    w_proj: Var,
) -> Result<Var> {
    let a = g.matmul(h_tok, w_align)?;
    let b = g.matmul(f_pooled, w_proj)?;
    let cos = g.cosine_rows(a, b)?;
    let m = g.mean(cos)?;
    g.affine(m, -1.0, 1.0)
}

/// `H + α · CrossAttn(LN H, F_geo, F_geo)`.
pub fn midlayer_inject_graph(
    g: &mut Graph,
    store: &ParamStore,
    heads: usize,
    h: Var,
    f_geo: Var,
) -> Result<Var> {
    let n = nn::layer_norm(g, store, MID_LN, h)?;
    let a = Attention::new(MID_ATTN, heads).forward(g, store, n, f_geo)?;
    let alpha = g.param(store, MID_ALPHA)?;
    let a = g.mul_scalar(a, alpha)?;
    g.add(h, a)
}

/// Fixed sinusoidal table over patch index, `[n, d]`.
pub fn patch_position_table(n: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[n, d], |idx| {
        let (j, c) = (idx / d, idx % d);
        let freq = 10_000f64.powf(-((c / 2 * 2) as f64) / d as f64);
        let phase = j as f64 * freq;
        if c % 2 == 0 {
            phase.sin()
        } else {
            phase.cos()
        }
    })
}

/// `−mean cos(MLP(norm(H_vis)), F_vggt + E_pos)` over every visual position.
pub fn spatial_forcing_loss_graph(
    g: &mut Graph,
    store: &ParamStore,
    h_vis: Var,
    f_vggt: Var,
) -> Result<Var> {
    let (b, n, _) = g.value(h_vis).dims3("spatial forcing")?;
    let (bf, nf, dv) = g.value(f_vggt).dims3("spatial forcing")?;
    if (b, n) != (bf, nf) {
        return Err(Error::shape(
            "spatial forcing slice",
            g.shape(h_vis),
            g.shape(f_vggt),
        ));
    }
    let x = g.normalize(h_vis, LN_EPS)?;
    let p = nn::mlp(g, store, SF_PROJ, x)?;
    let table = patch_position_table(n, dv);
    let mut pos = Vec::with_capacity(b * n * dv);
    for _ in 0..b {
        pos.extend_from_slice(table.data());
    }
    let pos = g.constant(Tensor::new(vec![b, n, dv], pos)?)?;
    let target = g.add(f_vggt, pos)?;
    let cos = g.cosine_rows(p, target)?;
    let m = g.mean(cos)?;
    g.scale(m, -1.0)
}

/// `T_2D + CrossAttn(T_2D, T_3D, T_3D)`; the caller's input norm completes the residual-then-norm.
pub fn visual_fusion_residual_graph(
    g: &mut Graph,
    store: &ParamStore,
    heads: usize,
    t2d: Var,
    t3d: Var,
) -> Result<Var> {
    let a = Attention::new(VIS_ATTN, heads).forward(g, store, t2d, t3d)?;
    g.add(t2d, a)
}

fn run<F>(f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = f(&mut g)?;
    Ok(g.value(v).clone())
}

/// One expert block with the parallel geometric branch.
pub fn ae_fusion_block(
    dit: &Dit,
    store: &ParamStore,
    block: usize,
    z: &Tensor,
    tau: &[f64],
    h_mllm: &Tensor,
    f_geo: Option<&Tensor>,
) -> Result<Tensor> {
    let f_geo = f_geo.ok_or_else(|| {
        Error::SchemeContract("dual-attention block needs projected geometric features".into())
    })?;
    run(|g| {
        let zv = g.constant(z.clone())?;
        let temb = dit.time_embedding(g, tau)?;
        let h = g.constant(h_mllm.clone())?;
        let f = g.constant(f_geo.clone())?;
        dit.block(g, store, block, zv, temb, h, Some(f))
    })
}

pub fn early_fusion_inputs(
    x: &Tensor,
    f_vggt: &Tensor,
    w_proj: &Tensor,
    max_len: usize,
) -> Result<Tensor> {
    run(|g| {
        let xv = g.constant(x.clone())?;
        let f = g.constant(f_vggt.clone())?;
        let w = g.constant(w_proj.clone())?;
        early_fusion_inputs_graph(g, xv, f, w, max_len)
    })
}

pub fn gate_mixer(
    frame: &Tensor,
    global: &Tensor,
    w_mix: &Tensor,
    w_proj: &Tensor,
) -> Result<Tensor> {
    run(|g| {
        let f = g.constant(frame.clone())?;
        let gl = g.constant(global.clone())?;
        let wm = g.constant(w_mix.clone())?;
        let wp = g.constant(w_proj.clone())?;
        gate_mixer_graph(g, f, gl, wm, wp)
    })
}

/// Plain concatenation of the (mixed) geometric tokens after the semantic ones.
pub fn concat_fusion(h: &Tensor, f_geo: &Tensor) -> Result<ConditioningSequence> {
    threedmix::build_conditioning(h, f_geo)
}

pub fn crossattn_fusion(
    h: &Tensor,
    f_geo: &Tensor,
    store: &ParamStore,
    heads: usize,
) -> Result<ConditioningSequence> {
    let (_, l, _) = h.dims3("crossattn_fusion")?;
    let (_, n, _) = f_geo.dims3("crossattn_fusion")?;
    let tokens = run(|g| {
        let hv = g.constant(h.clone())?;
        let f = g.constant(f_geo.clone())?;
        crossattn_fusion_graph(g, store, heads, hv, f)
    })?;
    Ok(ConditioningSequence {
        tokens,
        semantic_len: l,
        geo_len: n,
    })
}

/// Delegates to the 3D-Mix pipeline.
pub fn gated_fusion(
    h: &Tensor,
    f_vggt: &Tensor,
    p: &threedmix::ThreeDMixParams,
) -> Result<ConditioningSequence> {
    Ok(threedmix::threedmix(h, f_vggt, p)?.1)
}

/// `h_tok [B, D]` (or `[B, 1, D]`) against pooled geometry `[B, D_vggt]`.
pub fn threed_tokens_loss(
    h_tok: &Tensor,
    f_pooled: &Tensor,
    w_align: &Tensor,
    w_proj: &Tensor,
) -> Result<f64> {
    let t = run(|g| {
        let h = g.constant(h_tok.clone())?;
        let f = g.constant(f_pooled.clone())?;
        let wa = g.constant(w_align.clone())?;
        let wp = g.constant(w_proj.clone())?;
        threed_tokens_loss_graph(g, h, f, wa, wp)
    })?;
    Ok(t.data()[0])
}

pub fn midlayer_inject(
    h: &Tensor,
    f_geo: &Tensor,
    store: &ParamStore,
    heads: usize,
) -> Result<Tensor> {
    run(|g| {
        let hv = g.constant(h.clone())?;
        let f = g.constant(f_geo.clone())?;
        midlayer_inject_graph(g, store, heads, hv, f)
    })
}

pub fn spatial_forcing_loss(h_vis: &Tensor, f_vggt: &Tensor, store: &ParamStore) -> Result<f64> {
    let t = run(|g| {
        let h = g.constant(h_vis.clone())?;
        let f = g.constant(f_vggt.clone())?;
        spatial_forcing_loss_graph(g, store, h, f)
    })?;
    Ok(t.data()[0])
}

/// `LN(T_2D + CrossAttn(T_2D, T_3D, T_3D))` with the norm read from `{ln_prefix}.gain/.bias`.
pub fn visual_fusion(
    t2d: &Tensor,
    t3d: &Tensor,
    store: &ParamStore,
    heads: usize,
    ln_prefix: &str,
) -> Result<Tensor> {
    run(|g| {
        let a = g.constant(t2d.clone())?;
        let b = g.constant(t3d.clone())?;
        let r = visual_fusion_residual_graph(g, store, heads, a, b)?;
        nn::layer_norm(g, store, ln_prefix, r)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn dims() -> SchemeDims {
        SchemeDims {
            d_model: 8,
            d_vggt: 6,
            heads: 2,
            n_dit_layers: 2,
            layerwise: false,
        }
    }

    #[test]
    fn early_fusion_capacity() {
        let x = Tensor::zeros(&[1, 5, 8]);
        let f = Tensor::zeros(&[1, 4, 6]);
        let w = Tensor::zeros(&[6, 8]);
        assert_eq!(
            early_fusion_inputs(&x, &f, &w, 9).unwrap().shape(),
            &[1, 9, 8]
        );
        assert!(matches!(
            early_fusion_inputs(&x, &f, &w, 8),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn gate_mixer_needs_global_token() {
        let f = Tensor::zeros(&[1, 3, 6]);
        let gl = Tensor::zeros(&[1, 2, 6]);
        let r = gate_mixer(&f, &gl, &Tensor::zeros(&[12, 6]), &Tensor::zeros(&[6, 8]));
        assert!(matches!(r, Err(Error::SchemeContract(_))));
    }

    #[test]
    fn threed_token_loss_extremes() {
        let h = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let i = Tensor::identity(2);
        assert!(threed_tokens_loss(&h, &h, &i, &i).unwrap().abs() < 1e-12);
        assert!((threed_tokens_loss(&h, &h.scale(-3.0), &i, &i).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn spatial_forcing_rejects_length_mismatch() {
        let mut s = ParamStore::new();
        declare(&mut s, 1, FusionSchemeId::SpatialForcing, &dims()).unwrap();
        let r = spatial_forcing_loss(&Tensor::zeros(&[1, 3, 8]), &Tensor::zeros(&[1, 4, 6]), &s);
        assert!(matches!(r, Err(Error::Shape { .. })));
    }

    #[test]
    fn midlayer_alpha_starts_at_zero() {
        let mut s = ParamStore::new();
        declare(&mut s, 1, FusionSchemeId::MidlayerInjection, &dims()).unwrap();
        let mut r = RngStream::new(1, 0);
        let h = r.normal_tensor(&[2, 3, 8], 1.0);
        let f = r.normal_tensor(&[2, 4, 8], 1.0);
        assert!(midlayer_inject(&h, &f, &s, 2).unwrap().bit_eq(&h));
    }

    #[test]
    fn positional_table_rows_differ() {
        let t = patch_position_table(8, 48);
        assert_eq!(t.shape(), &[8, 48]);
        assert_eq!(t.get(&[0, 0]), 0.0);
        assert_eq!(t.get(&[0, 1]), 1.0);
        for a in 0..8 {
            for b in a + 1..8 {
                let ra = &t.data()[a * 48..(a + 1) * 48];
                let rb = &t.data()[b * 48..(b + 1) * 48];
                assert!(ra.iter().zip(rb).any(|(x, y)| (x - y).abs() > 1e-3));
            }
        }
    }
}
