//! A small causal transformer standing in for the multimodal language model.
//!
//! Input sequence: `[BOS, target label]` followed by one coarse visual token
//! per object slot. Visual tokens carry object identity only, so the hidden
//! states never depend on where objects are.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::scene::{SceneBatch, SceneSpec, INSTRUCTION_LEN, TOKEN_VGGT};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Attention};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

pub const PREFIX: &str = "mllm.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyMllmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl Default for ToyMllmConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 4,
            heads: 4,
            max_len: 32,
            vocab_size: 64,
        }
    }
}

impl ToyMllmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "mllm width {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("mllm needs at least one layer".into()));
        }
        if self.vocab_size <= TOKEN_VGGT {
            return Err(Error::Config(
                "mllm vocabulary too small for special tokens".into(),
            ));
        }
        Ok(())
    }
}

/// Hidden states of every layer from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct MllmOutput {
    pub per_layer: Vec<Tensor>,
}

impl MllmOutput {
    pub fn last(&self) -> &Tensor {
        self.per_layer.last().expect("at least one layer")
    }
}

#[derive(Debug)]
pub struct ToyMllm {
    pub config: ToyMllmConfig,
    layer_calls: AtomicUsize,
}

impl Clone for ToyMllm {
    fn clone(&self) -> Self {
        Self::new(self.config.clone())
    }
}

impl ToyMllm {
    pub fn new(config: ToyMllmConfig) -> Self {
        Self {
            config,
            layer_calls: AtomicUsize::new(0),
        }
    }

    /// Total transformer layers executed since construction.
    pub fn layer_calls(&self) -> usize {
        self.layer_calls.load(Ordering::Relaxed)
    }

    pub fn declare(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        let d = c.d_model;
        store.init(
            seed,
            "mllm.tok_emb",
            &[c.vocab_size, d],
            Init::Normal(1.0),
            true,
        )?;
        store.init(
            seed,
            "mllm.pos_emb",
            &[c.max_len, d],
            Init::Normal(0.5),
            true,
        )?;
        nn::declare_layer_norm(store, "mllm.vis_norm", d)?;
        for i in 0..c.n_layers {
            let p = format!("mllm.layer{i}");
            nn::declare_layer_norm(store, &format!("{p}.ln1"), d)?;
            self.attention(i).declare(store, seed, d, d, d)?;
            nn::declare_layer_norm(store, &format!("{p}.ln2"), d)?;
            nn::declare_mlp(store, seed, &format!("{p}.mlp"), d, 2 * d, d)?;
        }
        Ok(())
    }

    fn attention(&self, layer: usize) -> Attention {
        Attention::new(format!("mllm.layer{layer}.attn"), self.config.heads).causal()
    }

    fn positions(&self, batch: usize, start: usize, len: usize) -> Result<Vec<usize>> {
        if start + len > self.config.max_len {
            return Err(Error::Capacity {
                what: "mllm sequence length",
                needed: start + len,
                limit: self.config.max_len,
            });
        }
        Ok((0..batch).flat_map(|_| start..start + len).collect())
    }

    fn add_positions(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        start: usize,
    ) -> Result<Var> {
        let (b, l, _) = g.value(x).dims3("positions")?;
        let idx = self.positions(b, start, l)?;
        let table = g.param(store, "mllm.pos_emb")?;
        let pos = g.gather(table, &idx, &[b, l])?;
        g.add(x, pos)
    }

    /// Instruction tokens with positions `0..INSTRUCTION_LEN`, `[B, 2, D]`.
    pub fn embed_instruction(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &SceneBatch,
    ) -> Result<Var> {
        let table = g.param(store, "mllm.tok_emb")?;
        let e = g.gather(
            table,
            &batch.instruction_tokens,
            &[batch.batch, INSTRUCTION_LEN],
        )?;
        self.add_positions(g, store, e, 0)
    }

    /// Raw identity embeddings of the slot tokens, `[B, slots, D]`, before the visual norm.
    pub fn visual_raw(&self, g: &mut Graph, store: &ParamStore, batch: &SceneBatch) -> Result<Var> {
        let table = g.param(store, "mllm.tok_emb")?;
        g.gather(table, &batch.slot_tokens, &[batch.batch, batch.slots])
    }

    /// Visual input norm plus positions; turns raw visual embeddings into sequence tokens.
    pub fn visual_finish(&self, g: &mut Graph, store: &ParamStore, raw: Var) -> Result<Var> {
        let x = nn::layer_norm(g, store, "mllm.vis_norm", raw)?;
        self.add_positions(g, store, x, INSTRUCTION_LEN)
    }

    /// The `<|vggt|>` special token placed at sequence position `position`.
    pub fn special_token(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: usize,
        position: usize,
    ) -> Result<Var> {
        let table = g.param(store, "mllm.tok_emb")?;
        let e = g.gather(table, &vec![TOKEN_VGGT; batch], &[batch, 1])?;
        self.add_positions(g, store, e, position)
    }

    /// One pre-norm causal transformer layer.
    pub fn layer(&self, g: &mut Graph, store: &ParamStore, i: usize, x: Var) -> Result<Var> {
        self.layer_calls.fetch_add(1, Ordering::Relaxed);
        let p = format!("mllm.layer{i}");
        let h = nn::layer_norm(g, store, &format!("{p}.ln1"), x)?;
        let a = self.attention(i).forward(g, store, h, h)?;
        let x = g.add(x, a)?;
        let h = nn::layer_norm(g, store, &format!("{p}.ln2"), x)?;
        let m = nn::mlp(g, store, &format!("{p}.mlp"), h)?;
        g.add(x, m)
    }

    /// Run every layer once. `after_layer(g, i, h)` may rewrite layer `i`'s output
    /// before the next layer consumes it; the rewritten value is what gets recorded.
    pub fn run_layers<F>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x0: Var,
        mut after_layer: F,
    ) -> Result<Vec<Var>>
    where
        F: FnMut(&mut Graph, usize, Var) -> Result<Var>,
    {
        let l = g.shape(x0)[1];
        if l > self.config.max_len {
            return Err(Error::Capacity {
                what: "mllm sequence length",
                needed: l,
                limit: self.config.max_len,
            });
        }
        let mut out = Vec::with_capacity(self.config.n_layers);
        let mut x = x0;
        for i in 0..self.config.n_layers {
            x = self.layer(g, store, i, x)?;
            x = after_layer(g, i, x)?;
            out.push(x);
        }
        Ok(out)
    }

    /// Base input sequence `[instruction ; visual]`.
    pub fn base_inputs(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &SceneBatch,
    ) -> Result<Var> {
        let text = self.embed_instruction(g, store, batch)?;
        let raw = self.visual_raw(g, store, batch)?;
        let vis = self.visual_finish(g, store, raw)?;
        g.concat_seq(&[text, vis])
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &SceneBatch,
    ) -> Result<Vec<Var>> {
        let x0 = self.base_inputs(g, store, batch)?;
        self.run_layers(g, store, x0, |_, _, h| Ok(h))
    }
}

/// Per-layer hidden states for a batch of scenes.
pub fn mllm_forward(
    scenes: &[SceneSpec],
    slots: usize,
    mllm: &ToyMllm,
    store: &ParamStore,
) -> Result<MllmOutput> {
    let batch = SceneBatch::new(scenes, slots, mllm.config.vocab_size)?;
    let mut g = Graph::new();
    let vars = mllm.forward_graph(&mut g, store, &batch)?;
    Ok(MllmOutput {
        per_layer: vars.into_iter().map(|v| g.value(v).clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (ToyMllm, ParamStore) {
        let m = ToyMllm::new(ToyMllmConfig::default());
        let mut s = ParamStore::new();
        m.declare(&mut s, 3).unwrap();
        (m, s)
    }

    fn scenes() -> Vec<SceneSpec> {
        vec![
            SceneSpec {
                object_positions: vec![[0.1, 0.2, 0.3], [0.5, 0.5, 0.5]],
                object_ids: vec![0, 5],
                instruction_id: 0,
            },
            SceneSpec {
                object_positions: vec![[0.9, 0.1, 0.4]],
                object_ids: vec![2],
                instruction_id: 0,
            },
        ]
    }

    #[test]
    fn shape_contract() {
        let (m, s) = setup();
        let out = mllm_forward(&scenes(), 8, &m, &s).unwrap();
        assert_eq!(out.per_layer.len(), 4);
        for h in &out.per_layer {
            assert_eq!(h.shape(), &[2, INSTRUCTION_LEN + 8, 32]);
        }
    }

    #[test]
    fn positions_are_invisible() {
        let (m, s) = setup();
        let a = mllm_forward(&scenes(), 8, &m, &s).unwrap();
        let mut moved = scenes();
        moved[0].object_positions[1] = [0.0, 1.0, 0.25];
        moved[1].object_positions[0] = [0.3, 0.3, 0.3];
        let b = mllm_forward(&moved, 8, &m, &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deterministic_and_single_pass() {
        let (m, s) = setup();
        let a = mllm_forward(&scenes(), 8, &m, &s).unwrap();
        assert_eq!(m.layer_calls(), 4);
        let (m2, s2) = setup();
        let b = mllm_forward(&scenes(), 8, &m2, &s2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn capacity_error() {
        let (m, s) = setup();
        assert!(matches!(
            mllm_forward(&scenes(), 31, &m, &s),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn causal_prefix_is_unaffected_by_appended_tokens() {
        let (m, s) = setup();
        let batch = SceneBatch::new(&scenes(), 8, 64).unwrap();
        let mut g = Graph::new();
        let x0 = m.base_inputs(&mut g, &s, &batch).unwrap();
        let base = m.run_layers(&mut g, &s, x0, |_, _, h| Ok(h)).unwrap();
        let extra = g.constant(Tensor::full(&[2, 3, 32], 0.7)).unwrap();
        let x1 = g.concat_seq(&[x0, extra]).unwrap();
        let longer = m.run_layers(&mut g, &s, x1, |_, _, h| Ok(h)).unwrap();
        let prefix = g.value(*longer.last().unwrap()).slice_seq(0, 10).unwrap();
        assert!(prefix.bit_eq(g.value(*base.last().unwrap())));
    }
}
