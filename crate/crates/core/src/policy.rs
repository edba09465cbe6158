//! A complete toy vision-language-action policy: language backbone, optional
//! geometric encoder, one fusion scheme and a flow-matching action expert.
//!
//! GR00T-style: every expert block attends to the final backbone layer.
//! π-style: expert block `i` attends to backbone layer `n_layers − n_dit + i`.

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbones::scene::INSTRUCTION_LEN;
use crate::backbones::{
    Conditioning, Dit, DitConfig, GeoEncoder, GeoEncoderConfig, GeoTokens, GeoVars, SceneBatch,
    SceneSpec, ToyMllm, ToyMllmConfig,
};
use crate::error::{Error, Result};
use crate::flow::{euler_from, fm_training_targets_per_sample, FlowConfig};
use crate::fusion::ops::{self as sops, SchemeDims};
use crate::fusion::{FusionSchemeId, SchemeBundle};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::threedmix::{self, MixNames};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Groot,
    Pi,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Groot => "groot",
            Arch::Pi => "pi",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "groot" => Ok(Arch::Groot),
            "pi" => Ok(Arch::Pi),
            _ => Err(Error::Config(format!(
                "unknown architecture `{s}` (valid: groot, pi)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub arch: Arch,
    pub scheme: FusionSchemeId,
    pub mllm: ToyMllmConfig,
    pub geo: GeoEncoderConfig,
    pub dit: DitConfig,
    pub flow: FlowConfig,
    /// Expert layers skipped between gated injections (π-style only).
    pub sparse_k: usize,
    /// First expert layer that receives gated tokens (π-style only).
    pub sparse_phase: usize,
    pub lambda_align: f64,
    pub sf_weight: f64,
    /// 1-based backbone layer for mid-layer injection and spatial forcing.
    pub mid_layer: usize,
    /// Use only the first `n` geometric patch tokens.
    pub geo_token_limit: Option<usize>,
    /// Number of appended `<|vggt|>` tokens for the 3D-token scheme, 0 or 1.
    pub vggt_tokens: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        let mllm = ToyMllmConfig::default();
        let mid_layer = mllm.n_layers / 2;
        Self {
            arch: Arch::Groot,
            scheme: FusionSchemeId::None,
            mllm,
            geo: GeoEncoderConfig::default(),
            dit: DitConfig::default(),
            flow: FlowConfig::default(),
            sparse_k: 0,
            sparse_phase: 0,
            lambda_align: 0.1,
            sf_weight: 0.1,
            mid_layer,
            geo_token_limit: None,
            vggt_tokens: 1,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        self.mllm.validate()?;
        self.flow.validate()?;
        if self.mllm.d_model != self.dit.d_model {
            return Err(Error::Config(format!(
                "backbone width {} differs from expert width {}",
                self.mllm.d_model, self.dit.d_model
            )));
        }
        if self.arch == Arch::Pi && self.mllm.n_layers < self.dit.n_dit_layers {
            return Err(Error::Config(format!(
                "layer-wise conditioning needs at least {} backbone layers, have {}",
                self.dit.n_dit_layers, self.mllm.n_layers
            )));
        }
        if self.mid_layer == 0 || self.mid_layer > self.mllm.n_layers {
            return Err(Error::Config(format!(
                "mid layer {} outside 1..={}",
                self.mid_layer, self.mllm.n_layers
            )));
        }
        if self.vggt_tokens > 1 {
            return Err(Error::Config(
                "at most one <|vggt|> token is supported".into(),
            ));
        }
        if self.sparse_phase >= self.dit.n_dit_layers {
            return Err(Error::Config(format!(
                "sparse phase {} outside {} expert layers",
                self.sparse_phase, self.dit.n_dit_layers
            )));
        }
        for (name, v) in [
            ("lambda_align", self.lambda_align),
            ("sf_weight", self.sf_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} = {v} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }

    pub fn slots(&self) -> usize {
        self.geo.n_patches
    }
}

/// Where geometric tokens come from in a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum GeoInput<'a> {
    /// Run the policy's own encoder inside the graph.
    Encode,
    /// Use precomputed (possibly corrupted) tokens.
    Given(&'a GeoTokens),
    /// No geometry available.
    Absent,
}

/// Conditioning produced by the backbone and fusion scheme.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub cond: Conditioning,
    pub secondary: Option<Var>,
    /// Unweighted alignment loss, training only.
    pub aux: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub action: Var,
    pub aux: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Policy {
    pub config: PolicyConfig,
    pub bundle: SchemeBundle,
    pub mllm: ToyMllm,
    pub geo: Option<GeoEncoder>,
    pub dit: Dit,
    pub store: ParamStore,
}

impl Policy {
    /// Fresh policy. Every parameter's initial value depends only on `(seed, id)`
    /// and the geometric encoder depends on neither.
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, true)
    }

    /// A policy that has no geometric encoder at all.
    pub fn without_geo_encoder(config: PolicyConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, false)
    }

    fn build(config: PolicyConfig, seed: u64, with_geo: bool) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mllm = ToyMllm::new(config.mllm.clone());
        mllm.declare(&mut store, seed)?;
        let geo = if with_geo {
            let e = GeoEncoder::new(config.geo.clone());
            e.declare(&mut store, config.mllm.vocab_size)?;
            Some(e)
        } else {
            None
        };
        let mut dit = Dit::new(config.dit.clone());
        if config.scheme == FusionSchemeId::AeFusion {
            dit = dit.with_secondary_branch();
        }
        dit.declare(&mut store, seed)?;
        let dims = SchemeDims {
            d_model: config.mllm.d_model,
            d_vggt: config.geo.d_vggt,
            heads: config.mllm.heads,
            n_dit_layers: config.dit.n_dit_layers,
            layerwise: config.arch == Arch::Pi,
        };
        sops::declare(&mut store, seed, config.scheme, &dims)?;
        let bundle = SchemeBundle::new(config.scheme, config.lambda_align, config.sf_weight);
        Ok(Self {
            config,
            bundle,
            mllm,
            geo,
            dit,
            store,
        })
    }

    /// Remove the encoder and its weights, as for deployment without geometry.
    pub fn drop_geo_encoder(&mut self) {
        self.geo = None;
        self.store.remove_prefix(crate::backbones::geo::PREFIX);
    }

    pub fn scheme(&self) -> FusionSchemeId {
        self.config.scheme
    }

    pub fn batch(&self, scenes: &[SceneSpec]) -> Result<SceneBatch> {
        SceneBatch::new(scenes, self.config.slots(), self.config.mllm.vocab_size)
    }

    /// Value-level geometric tokens from this policy's encoder.
    pub fn geo_tokens(&self, scenes: &[SceneSpec]) -> Result<GeoTokens> {
        let enc = self
            .geo
            .as_ref()
            .ok_or_else(|| Error::SchemeContract("policy has no geometric encoder".into()))?;
        crate::backbones::geo_encoder_forward(scenes, &enc.config, &self.store)
    }

    fn geo_vars(&self, g: &mut Graph, batch: &SceneBatch, input: GeoInput) -> Result<GeoVars> {
        let v = match input {
            GeoInput::Encode => {
                let enc = self.geo.as_ref().ok_or_else(|| {
                    Error::SchemeContract(format!(
                        "{} needs a geometric encoder",
                        self.config.scheme
                    ))
                })?;
                enc.forward_graph(g, &self.store, batch)?
            }
            GeoInput::Given(t) => {
                let want = [batch.batch, batch.slots, self.config.geo.d_vggt];
                if t.patches.shape() != want {
                    return Err(Error::shape("geometric tokens", t.patches.shape(), &want));
                }
                GeoVars {
                    patches: g.constant(t.patches.clone())?,
                    global: g.constant(t.global.clone())?,
                }
            }
            GeoInput::Absent => {
                return Err(Error::SchemeContract(format!(
                    "{} reads geometric features but none were provided",
                    self.config.scheme
                )));
            }
        };
        match self.config.geo_token_limit {
            Some(n) if n < batch.slots => Ok(GeoVars {
                patches: g.slice_seq(v.patches, 0, n)?,
                global: v.global,
            }),
            _ => Ok(v),
        }
    }

    /// Backbone pass plus fusion; yields what the expert attends to.
    pub fn encode(
        &self,
        g: &mut Graph,
        batch: &SceneBatch,
        geo: GeoInput,
        training: bool,
    ) -> Result<Encoded> {
        use FusionSchemeId as S;
        let scheme = self.config.scheme;
        let st = &self.store;
        let m = &self.mllm;
        let heads = self.config.mllm.heads;
        let needs_geo = if training {
            scheme.training_geo_required()
        } else {
            self.bundle.hooks.inference_geo_required
        };
        let geo = if needs_geo {
            Some(self.geo_vars(g, batch, geo)?)
        } else {
            None
        };
        let geo_ref =
            || geo.ok_or_else(|| Error::SchemeContract("geometric features missing".into()));

        let text = m.embed_instruction(g, st, batch)?;
        let mut raw = m.visual_raw(g, st, batch)?;
        if scheme == S::VisualFusion {
            raw = sops::visual_fusion_residual_graph(g, st, heads, raw, geo_ref()?.patches)?;
        }
        let vis = m.visual_finish(g, st, raw)?;
        let mut x0 = g.concat_seq(&[text, vis])?;
        if scheme == S::EarlyFusion {
            let w = g.param(st, sops::EARLY_PROJ)?;
            x0 = sops::early_fusion_inputs_graph(
                g,
                x0,
                geo_ref()?.patches,
                w,
                self.config.mllm.max_len,
            )?;
        }
        let mut token_pos = None;
        if scheme == S::ThreedTokens && self.config.vggt_tokens == 1 {
            let l = g.shape(x0)[1];
            let tok = m.special_token(g, st, batch.batch, l)?;
            x0 = g.concat_seq(&[x0, tok])?;
            token_pos = Some(l);
        }

        let mid = self.config.mid_layer - 1;
        let mid_geo = if scheme == S::MidlayerInjection {
            let w = g.param(st, sops::MID_PROJ)?;
            Some(g.matmul(geo_ref()?.patches, w)?)
        } else {
            None
        };
        let hs = m.run_layers(g, st, x0, |g, i, h| match mid_geo {
            Some(f) if i == mid => sops::midlayer_inject_graph(g, st, heads, h, f),
            _ => Ok(h),
        })?;

        let aux = match (training, scheme) {
            (true, S::SpatialForcing) => {
                let p = geo_ref()?.patches;
                let n = g.shape(p)[1];
                let hv = g.slice_seq(hs[mid], INSTRUCTION_LEN, n)?;
                Some(sops::spatial_forcing_loss_graph(g, st, hv, p)?)
            }
            (true, S::ThreedTokens) => {
                let pos = token_pos.ok_or_else(|| {
                    Error::SchemeContract("<|vggt|> token absent from the sequence".into())
                })?;
                let last = *hs.last().expect("at least one layer");
                let ht = g.slice_seq(last, pos, 1)?;
                let wa = g.param(st, sops::TOK_ALIGN)?;
                let wp = g.param(st, sops::TOK_PROJ)?;
                Some(sops::threed_tokens_loss_graph(
                    g,
                    ht,
                    geo_ref()?.global,
                    wa,
                    wp,
                )?)
            }
            _ => None,
        };

        let geo_seq = match scheme {
            S::ConcatFusion | S::CrossattnFusion => {
                let gv = geo_ref()?;
                let wm = g.param(st, sops::MIXER_GATE)?;
                let wp = g.param(st, sops::MIXER_PROJ)?;
                Some(sops::gate_mixer_graph(g, gv.patches, gv.global, wm, wp)?)
            }
            S::GatedFusion => {
                let w = g.param(st, &format!("{}w_proj", sops::MIX_PREFIX))?;
                Some(threedmix::project_geo_graph(g, geo_ref()?.patches, w)?)
            }
            _ => None,
        };
        let schedule = threedmix::sparse_layer_schedule_with_phase(
            self.config.dit.n_dit_layers,
            self.config.sparse_k as i64,
            self.config.sparse_phase,
        )?;
        let layerwise = self.config.arch == Arch::Pi;
        let fuse = |g: &mut Graph, i: usize, h: Var| -> Result<Var> {
            match (scheme, geo_seq) {
                (S::ConcatFusion, Some(f)) => threedmix::build_conditioning_graph(g, h, f),
                (S::CrossattnFusion, Some(f)) => sops::crossattn_fusion_graph(g, st, heads, h, f),
                (S::GatedFusion, Some(f)) => {
                    if layerwise && !schedule[i] {
                        return Ok(h);
                    }
                    let names = if layerwise {
                        MixNames::layer(sops::MIX_PREFIX, i)
                    } else {
                        MixNames::single(sops::MIX_PREFIX)
                    };
                    Ok(threedmix::fuse_projected_graph(g, st, &names, h, f)?.0)
                }
                _ => Ok(h),
            }
        };
        let cond = match self.config.arch {
            Arch::Groot => {
                Conditioning::Shared(fuse(g, 0, *hs.last().expect("at least one layer"))?)
            }
            Arch::Pi => {
                let nl = self.config.mllm.n_layers;
                let nd = self.config.dit.n_dit_layers;
                let mut seqs = Vec::with_capacity(nd);
                for i in 0..nd {
                    seqs.push(fuse(g, i, hs[nl - nd + i])?);
                }
                Conditioning::PerLayer(seqs)
            }
        };

        let secondary = if scheme == S::AeFusion {
            let w = g.param(st, sops::AE_PROJ)?;
            Some(g.matmul(geo_ref()?.patches, w)?)
        } else {
            None
        };
        Ok(Encoded {
            cond,
            secondary,
            aux,
        })
    }

    /// Training objective for clean `targets`, noise `eps` and per-sample `tau`.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        batch: &SceneBatch,
        targets: &Tensor,
        eps: &Tensor,
        tau: &[f64],
    ) -> Result<LossVars> {
        let (a_tau, v) = fm_training_targets_per_sample(targets, eps, tau)?;
        let enc = self.encode(g, batch, GeoInput::Encode, true)?;
        let x = g.constant(a_tau)?;
        let pred = self
            .dit
            .forward(g, &self.store, x, &enc.cond, tau, enc.secondary)?;
        let vt = g.constant(v)?;
        let action = g.mse(pred, vt)?;
        let total = match enc.aux {
            Some(a) => {
                let w = g.scale(a, self.bundle.aux_weight)?;
                g.add(action, w)?
            }
            None => action,
        };
        Ok(LossVars {
            total,
            action,
            aux: enc.aux,
        })
    }

    /// Expert velocity for one noisy chunk at a shared time `tau`.
    pub fn predict_velocity(
        &self,
        scenes: &[SceneSpec],
        a_tau: &Tensor,
        tau: f64,
        geo: GeoInput,
    ) -> Result<Tensor> {
        let batch = self.batch(scenes)?;
        let mut g = Graph::new();
        let enc = self.encode(&mut g, &batch, geo, false)?;
        let x = g.constant(a_tau.clone())?;
        let v = self.dit.forward(
            &mut g,
            &self.store,
            x,
            &enc.cond,
            &vec![tau; batch.batch],
            enc.secondary,
        )?;
        Ok(g.value(v).clone())
    }

    /// Euler-integrate the learned field from `noise [B, T, d_a]`.
    pub fn sample_actions(
        &self,
        scenes: &[SceneSpec],
        noise: &Tensor,
        geo: GeoInput,
    ) -> Result<Tensor> {
        let batch = self.batch(scenes)?;
        let g = RefCell::new(Graph::new());
        let enc = self.encode(&mut g.borrow_mut(), &batch, geo, false)?;
        let field = |a: &Tensor, tau: f64| -> Result<Tensor> {
            let mut g = g.borrow_mut();
            let x = g.constant(a.clone())?;
            let v = self.dit.forward(
                &mut g,
                &self.store,
                x,
                &enc.cond,
                &vec![tau; batch.batch],
                enc.secondary,
            )?;
            Ok(g.value(v).clone())
        };
        euler_from(&field, noise.clone(), self.config.flow.n_euler_steps)
    }

    /// Shape of one batch of action chunks.
    pub fn chunk_shape(&self, batch: usize) -> [usize; 3] {
        [batch, self.config.dit.horizon, self.config.dit.action_dim]
    }

    /// Apply the scheme's null setting, after which sampled actions equal the
    /// base policy built from the same seed, bit for bit.
    ///
    /// | scheme | setting |
    /// |---|---|
    /// | ae_fusion | every expert `geo_attn` output projection zeroed |
    /// | visual_fusion | fusion attention output projection zeroed |
    /// | midlayer_injection | adapter scale `alpha = 0` |
    /// | early, concat, crossattn, gated | zero geometric tokens |
    /// | threed_tokens | no `<|vggt|>` token |
    /// | spatial_forcing, none | nothing; inference never reads geometry |
    pub fn neutralize(&mut self) -> Result<()> {
        let zero = |store: &mut ParamStore, id: &str| -> Result<()> {
            let shape = store.get(id)?.value.shape().to_vec();
            store.set(id, Tensor::zeros(&shape))
        };
        match self.scheme() {
            FusionSchemeId::AeFusion => {
                let ids: Vec<String> = self
                    .store
                    .ids()
                    .into_iter()
                    .filter(|id| id.ends_with(".geo_attn.wo"))
                    .map(String::from)
                    .collect();
                for id in ids {
                    zero(&mut self.store, &id)?;
                }
            }
            FusionSchemeId::VisualFusion => {
                zero(&mut self.store, &format!("{}.wo", sops::VIS_ATTN))?
            }
            FusionSchemeId::MidlayerInjection => zero(&mut self.store, sops::MID_ALPHA)?,
            FusionSchemeId::EarlyFusion
            | FusionSchemeId::ConcatFusion
            | FusionSchemeId::CrossattnFusion
            | FusionSchemeId::GatedFusion => self.config.geo_token_limit = Some(0),
            FusionSchemeId::ThreedTokens => self.config.vggt_tokens = 0,
            FusionSchemeId::SpatialForcing | FusionSchemeId::None => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn scenes() -> Vec<SceneSpec> {
        vec![
            SceneSpec {
                object_positions: vec![[0.1, 0.2, 0.3], [0.6, 0.5, 0.9]],
                object_ids: vec![3, 7],
                instruction_id: 1,
            },
            SceneSpec {
                object_positions: vec![[0.8, 0.1, 0.4], [0.2, 0.9, 0.1], [0.5, 0.5, 0.5]],
                object_ids: vec![1, 2, 0],
                instruction_id: 0,
            },
        ]
    }

    #[test]
    fn every_scheme_runs_in_both_architectures() {
        let noise = RngStream::new(1, 0).normal_tensor(&[2, 4, 7], 1.0);
        for arch in [Arch::Groot, Arch::Pi] {
            for scheme in FusionSchemeId::ALL {
                let cfg = PolicyConfig {
                    arch,
                    scheme,
                    ..Default::default()
                };
                let p = Policy::new(cfg, 3).unwrap();
                let a = p
                    .sample_actions(&scenes(), &noise, GeoInput::Encode)
                    .unwrap();
                assert_eq!(a.shape(), &[2, 4, 7], "{arch} {scheme}");
                let batch = p.batch(&scenes()).unwrap();
                let mut g = Graph::new();
                let l = p
                    .loss_graph(&mut g, &batch, &noise, &noise.scale(0.5), &[0.3, 0.7])
                    .unwrap();
                assert!(g.value(l.total).data()[0].is_finite());
                assert_eq!(l.aux.is_some(), p.bundle.aux_weight > 0.0, "{scheme}");
            }
        }
    }

    #[test]
    fn geometry_schemes_reject_missing_geometry() {
        let noise = Tensor::zeros(&[2, 4, 7]);
        let cfg = PolicyConfig {
            scheme: FusionSchemeId::GatedFusion,
            ..Default::default()
        };
        let p = Policy::without_geo_encoder(cfg, 3).unwrap();
        let r = p.sample_actions(&scenes(), &noise, GeoInput::Encode);
        assert!(matches!(r, Err(Error::SchemeContract(_))));
    }

    #[test]
    fn config_validation() {
        let bad = PolicyConfig {
            mid_layer: 0,
            ..Default::default()
        };
        assert!(Policy::new(bad, 1).is_err());
        let mut pi = PolicyConfig {
            arch: Arch::Pi,
            ..Default::default()
        };
        pi.dit.n_dit_layers = 5;
        assert!(Policy::new(pi, 1).is_err());
        assert!("pie".parse::<Arch>().is_err());
    }
}
