use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TOKEN_BOS: usize = 0;
pub const TOKEN_EMPTY: usize = 1;
/// The special `<|vggt|>` token used by the 3D-token scheme.
pub const TOKEN_VGGT: usize = 2;
pub const LABEL_OFFSET: usize = 3;

/// Number of instruction tokens at the front of every sequence: `[BOS, target label]`.
pub const INSTRUCTION_LEN: usize = 2;

pub fn label_token(label: usize) -> usize {
    LABEL_OFFSET + label
}

/// A synthetic tabletop scene: labelled objects in the unit cube and the
/// index of the object the instruction refers to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub object_positions: Vec<[f64; 3]>,
    pub object_ids: Vec<usize>,
    pub instruction_id: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.object_ids.is_empty() || self.object_positions.len() != self.object_ids.len() {
            return Err(Error::Domain(format!(
                "scene needs matching, non-empty positions and ids ({} vs {})",
                self.object_positions.len(),
                self.object_ids.len()
            )));
        }
        if self.instruction_id >= self.object_ids.len() {
            return Err(Error::Domain(format!(
                "instruction {} does not index one of {} objects",
                self.instruction_id,
                self.object_ids.len()
            )));
        }
        for p in &self.object_positions {
            if p.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Domain(format!(
                    "object position {p:?} outside the unit cube"
                )));
            }
        }
        Ok(())
    }

    pub fn target_position(&self) -> [f64; 3] {
        self.object_positions[self.instruction_id]
    }

    pub fn target_label(&self) -> usize {
        self.object_ids[self.instruction_id]
    }
}

/// Scenes packed into fixed-width slots, one slot per geometric patch.
#[derive(Clone, Debug)]
pub struct SceneBatch {
    pub batch: usize,
    pub slots: usize,
    /// `[B, slots, 3]`; empty slots hold the origin.
    pub positions: Tensor,
    /// Token id per slot, `B * slots` entries; empty slots hold [`TOKEN_EMPTY`].
    pub slot_tokens: Vec<usize>,
    /// `[BOS, target label token]` per scene, `B * INSTRUCTION_LEN` entries.
    pub instruction_tokens: Vec<usize>,
}

impl SceneBatch {
    pub fn new(scenes: &[SceneSpec], slots: usize, vocab_size: usize) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::EmptySequence("scene batch"));
        }
        let b = scenes.len();
        let mut positions = Tensor::zeros(&[b, slots, 3]);
        let mut slot_tokens = vec![TOKEN_EMPTY; b * slots];
        let mut instruction_tokens = Vec::with_capacity(b * INSTRUCTION_LEN);
        for (bi, s) in scenes.iter().enumerate() {
            s.validate()?;
            if s.object_ids.len() > slots {
                return Err(Error::Capacity {
                    what: "objects per scene",
                    needed: s.object_ids.len(),
                    limit: slots,
                });
            }
            for (j, (&id, p)) in s.object_ids.iter().zip(&s.object_positions).enumerate() {
                let tok = label_token(id);
                if tok >= vocab_size {
                    return Err(Error::Capacity {
                        what: "object label vocabulary",
                        needed: tok + 1,
                        limit: vocab_size,
                    });
                }
                slot_tokens[bi * slots + j] = tok;
                for (c, &v) in p.iter().enumerate() {
                    positions.set(&[bi, j, c], v);
                }
            }
            instruction_tokens.push(TOKEN_BOS);
            instruction_tokens.push(label_token(s.target_label()));
        }
        Ok(Self {
            batch: b,
            slots,
            positions,
            slot_tokens,
            instruction_tokens,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> SceneSpec {
        SceneSpec {
            object_positions: vec![[0.1, 0.2, 0.3], [0.9, 0.5, 0.0]],
            object_ids: vec![4, 7],
            instruction_id: 1,
        }
    }

    #[test]
    fn validation() {
        assert!(scene().validate().is_ok());
        let mut s = scene();
        s.instruction_id = 2;
        assert!(s.validate().is_err());
        let mut s = scene();
        s.object_positions[0][2] = 1.5;
        assert!(s.validate().is_err());
    }

    #[test]
    fn batch_layout() {
        let b = SceneBatch::new(&[scene()], 3, 64).unwrap();
        assert_eq!(b.slot_tokens, vec![7, 10, TOKEN_EMPTY]);
        assert_eq!(b.instruction_tokens, vec![TOKEN_BOS, 10]);
        assert_eq!(b.positions.get(&[0, 1, 0]), 0.9);
        assert!(matches!(
            SceneBatch::new(&[scene()], 1, 64),
            Err(Error::Capacity { .. })
        ));
    }
}
