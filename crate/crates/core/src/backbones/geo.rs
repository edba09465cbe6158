//! Synthetic stand-in for the frozen geometric encoder.
//!
//! Each patch token is `p · basis + bias + appearance[label]` where the three
//! basis rows are orthonormal and `bias`/`appearance` are orthogonal to them.
//! Positions are therefore recovered exactly by `token · basisᵀ`.

use serde::{Deserialize, Serialize};

use super::scene::{SceneBatch, SceneSpec};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::tensor::{dot, Tensor};

pub const PREFIX: &str = "geo.";
/// Geometric encoder weights never depend on the experiment seed.
pub const GEO_SEED: u64 = 0x5647_4754;

pub const BASIS: &str = "geo.pos_basis";
pub const BIAS: &str = "geo.bias";
pub const APPEARANCE: &str = "geo.appearance";

const APPEARANCE_STD: f64 = 0.3;
const BIAS_STD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoEncoderConfig {
    pub n_patches: usize,
    pub d_vggt: usize,
    pub frozen: bool,
}

impl Default for GeoEncoderConfig {
    fn default() -> Self {
        Self {
            n_patches: 8,
            d_vggt: 48,
            frozen: true,
        }
    }
}

/// Per-patch geometric tokens plus one pooled global token.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoTokens {
    /// `[B, N, D_vggt]`
    pub patches: Tensor,
    /// `[B, 1, D_vggt]`, the mean over patches.
    pub global: Tensor,
}

impl GeoTokens {
    pub fn n_patches(&self) -> usize {
        self.patches.shape()[1]
    }

    /// Keep only the first `n` patch tokens; the global token is unchanged.
    pub fn truncate(&self, n: usize) -> Result<Self> {
        Ok(Self {
            patches: self.patches.slice_seq(0, n.min(self.n_patches()))?,
            global: self.global.clone(),
        })
    }
}

/// Graph handles of the encoder output.
#[derive(Clone, Copy, Debug)]
pub struct GeoVars {
    pub patches: Var,
    pub global: Var,
}

#[derive(Clone, Debug)]
pub struct GeoEncoder {
    pub config: GeoEncoderConfig,
}

impl GeoEncoder {
    pub fn new(config: GeoEncoderConfig) -> Self {
        Self { config }
    }

    /// Insert the encoder weights; trainable iff the config is not frozen.
    pub fn declare(&self, store: &mut ParamStore, vocab_size: usize) -> Result<()> {
        let dv = self.config.d_vggt;
        if dv < 3 {
            return Err(Error::Config(format!(
                "geo width {dv} cannot hold a 3D basis"
            )));
        }
        let mut rng = RngStream::named(GEO_SEED, BASIS);
        let basis = orthonormal_rows(&mut rng, 3, dv);
        let mut bias = RngStream::named(GEO_SEED, BIAS).normal_tensor(&[dv], BIAS_STD);
        remove_components(bias.data_mut(), &basis);
        let mut appearance =
            RngStream::named(GEO_SEED, APPEARANCE).normal_tensor(&[vocab_size, dv], APPEARANCE_STD);
        for row in appearance.data_mut().chunks_mut(dv) {
            remove_components(row, &basis);
        }
        let trainable = !self.config.frozen;
        store.insert(BASIS, basis, trainable)?;
        store.insert(BIAS, bias, trainable)?;
        store.insert(APPEARANCE, appearance, trainable)?;
        Ok(())
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &SceneBatch,
    ) -> Result<GeoVars> {
        if batch.slots != self.config.n_patches {
            return Err(Error::shape(
                "geo encoder slots",
                &[self.config.n_patches],
                &[batch.slots],
            ));
        }
        let basis = g.param(store, BASIS)?;
        let bias = g.param(store, BIAS)?;
        let appearance = g.param(store, APPEARANCE)?;
        let pos = g.constant(batch.positions.clone())?;
        let t = g.matmul(pos, basis)?;
        let t = g.add_last(t, bias)?;
        let a = g.gather(appearance, &batch.slot_tokens, &[batch.batch, batch.slots])?;
        let patches = g.add(t, a)?;
        let global = g.mean_seq(patches)?;
        Ok(GeoVars { patches, global })
    }
}

/// Encode a batch of scenes with the weights in `store`.
pub fn geo_encoder_forward(
    scenes: &[SceneSpec],
    config: &GeoEncoderConfig,
    store: &ParamStore,
) -> Result<GeoTokens> {
    let vocab = store.value(APPEARANCE)?.shape()[0];
    let batch = SceneBatch::new(scenes, config.n_patches, vocab)?;
    let mut g = Graph::new();
    let v = GeoEncoder::new(config.clone()).forward_graph(&mut g, store, &batch)?;
    Ok(GeoTokens {
        patches: g.value(v.patches).clone(),
        global: g.value(v.global).clone(),
    })
}

/// Known linear decode `[B, N, D_vggt] → [B, N, 3]`.
pub fn decode_positions(patches: &Tensor, store: &ParamStore) -> Result<Tensor> {
    let basis = store.value(BASIS)?;
    let dv = basis.shape()[1];
    if patches.last_dim() != dv {
        return Err(Error::shape(
            "decode_positions",
            patches.shape(),
            basis.shape(),
        ));
    }
    let mut shape = patches.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = 3;
    let mut out = Vec::with_capacity(patches.rows() * 3);
    for row in patches.data().chunks(dv) {
        for b in basis.data().chunks(dv) {
            out.push(dot(row, b));
        }
    }
    Tensor::new(shape, out)
}

fn orthonormal_rows(rng: &mut RngStream, rows: usize, d: usize) -> Tensor {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while out.len() < rows {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for u in &out {
            let c = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= c * b);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            out.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    Tensor::new(vec![rows, d], out.concat()).expect("rows * d entries")
}

/// Project `v` onto the orthogonal complement of the (orthonormal) rows of `basis`.
fn remove_components(v: &mut [f64], basis: &Tensor) {
    let d = v.len();
    for b in basis.data().chunks(d) {
        let c = dot(v, b);
        v.iter_mut().zip(b).for_each(|(a, bb)| *a -= c * bb);
    }
}
