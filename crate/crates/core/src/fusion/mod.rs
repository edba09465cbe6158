//! The nine geometric fusion schemes plus the unfused base, selectable by name.

pub mod ops;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionSchemeId {
    None,
    AeFusion,
    EarlyFusion,
    ConcatFusion,
    CrossattnFusion,
    GatedFusion,
    ThreedTokens,
    MidlayerInjection,
    SpatialForcing,
    VisualFusion,
}

impl FusionSchemeId {
    pub const ALL: [FusionSchemeId; 10] = [
        FusionSchemeId::None,
        FusionSchemeId::AeFusion,
        FusionSchemeId::EarlyFusion,
        FusionSchemeId::ConcatFusion,
        FusionSchemeId::CrossattnFusion,
        FusionSchemeId::GatedFusion,
        FusionSchemeId::ThreedTokens,
        FusionSchemeId::MidlayerInjection,
        FusionSchemeId::SpatialForcing,
        FusionSchemeId::VisualFusion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionSchemeId::None => "none",
            FusionSchemeId::AeFusion => "ae_fusion",
            FusionSchemeId::EarlyFusion => "early_fusion",
            FusionSchemeId::ConcatFusion => "concat_fusion",
            FusionSchemeId::CrossattnFusion => "crossattn_fusion",
            FusionSchemeId::GatedFusion => "gated_fusion",
            FusionSchemeId::ThreedTokens => "threed_tokens",
            FusionSchemeId::MidlayerInjection => "midlayer_injection",
            FusionSchemeId::SpatialForcing => "spatial_forcing",
            FusionSchemeId::VisualFusion => "visual_fusion",
        }
    }

    /// Display name used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            FusionSchemeId::None => "Base",
            FusionSchemeId::AeFusion => "AE-Fusion",
            FusionSchemeId::EarlyFusion => "Early-Fusion",
            FusionSchemeId::ConcatFusion => "Concat-Fusion",
            FusionSchemeId::CrossattnFusion => "CrossAttn-Fusion",
            FusionSchemeId::GatedFusion => "Gated-Fusion",
            FusionSchemeId::ThreedTokens => "3D-Tokens",
            FusionSchemeId::MidlayerInjection => "MidLayer-Injection",
            FusionSchemeId::SpatialForcing => "Spatial-Forcing",
            FusionSchemeId::VisualFusion => "Visual-Fusion",
        }
    }

    pub fn valid_ids() -> String {
        Self::ALL
            .iter()
            .map(|s| s.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    }

    pub fn hooks(self) -> Hooks {
        let mut h = Hooks::default();
        match self {
            FusionSchemeId::None => return h,
            FusionSchemeId::AeFusion => h.dit_block = true,
            FusionSchemeId::EarlyFusion | FusionSchemeId::VisualFusion => h.mllm_input = true,
            FusionSchemeId::ConcatFusion
            | FusionSchemeId::CrossattnFusion
            | FusionSchemeId::GatedFusion => h.mllm_output = true,
            FusionSchemeId::ThreedTokens => {
                h.mllm_input = true;
                h.loss_terms = true;
            }
            FusionSchemeId::MidlayerInjection => h.mllm_mid_layer = true,
            FusionSchemeId::SpatialForcing => h.loss_terms = true,
        }
        h.inference_geo_required = !matches!(
            self,
            FusionSchemeId::ThreedTokens | FusionSchemeId::SpatialForcing
        );
        h
    }

    /// Whether the scheme reads geometric features while training.
    pub fn training_geo_required(self) -> bool {
        self != FusionSchemeId::None
    }
}

impl fmt::Display for FusionSchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionSchemeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::UnknownScheme {
                given: s.to_string(),
                valid: Self::valid_ids(),
            })
    }
}

/// Which parts of the pipeline a scheme touches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hooks {
    pub mllm_input: bool,
    pub mllm_mid_layer: bool,
    pub mllm_output: bool,
    pub dit_block: bool,
    pub loss_terms: bool,
    pub inference_geo_required: bool,
}

/// A scheme, its hooks and its auxiliary-loss weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeBundle {
    pub id: FusionSchemeId,
    pub hooks: Hooks,
    /// Weight of the auxiliary alignment term; zero for schemes without one.
    pub aux_weight: f64,
}

impl SchemeBundle {
    pub fn new(id: FusionSchemeId, lambda_align: f64, sf_weight: f64) -> Self {
        let aux_weight = match id {
            FusionSchemeId::ThreedTokens => lambda_align,
            FusionSchemeId::SpatialForcing => sf_weight,
            _ => 0.0,
        };
        Self {
            id,
            hooks: id.hooks(),
            aux_weight,
        }
    }
}

/// Action loss plus weighted alignment loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignLossReport {
    pub l_action: f64,
    pub l_align: f64,
    pub lambda: f64,
    pub total: f64,
}

impl AlignLossReport {
    pub fn new(l_action: f64, l_align: f64, lambda: f64) -> Self {
        Self {
            l_action,
            l_align,
            lambda,
            total: l_action + lambda * l_align,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_has_nine_schemes_and_base() {
        assert_eq!(FusionSchemeId::ALL.len(), 10);
        let names: std::collections::BTreeSet<_> =
            FusionSchemeId::ALL.iter().map(|s| s.as_str()).collect();
        assert_eq!(names.len(), 10);
        for id in FusionSchemeId::ALL {
            assert_eq!(id.as_str().parse::<FusionSchemeId>().unwrap(), id);
        }
    }

    #[test]
    fn unknown_id_lists_valid_ones() {
        let e = "gated".parse::<FusionSchemeId>().unwrap_err().to_string();
        assert!(
            e.contains("gated_fusion") && e.contains("spatial_forcing"),
            "{e}"
        );
    }

    #[test]
    fn geometry_requirement_at_inference() {
        for id in FusionSchemeId::ALL {
            let want = !matches!(
                id,
                FusionSchemeId::None
                    | FusionSchemeId::ThreedTokens
                    | FusionSchemeId::SpatialForcing
            );
            assert_eq!(id.hooks().inference_geo_required, want, "{id}");
        }
    }

    #[test]
    fn total_loss_identity() {
        let r = AlignLossReport::new(0.5, 1.5, 0.1);
        assert_eq!(r.total, 0.5 + 0.1 * 1.5);
    }
}
