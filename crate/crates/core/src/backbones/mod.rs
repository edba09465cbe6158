//! Toy stand-ins for the language model, the geometric encoder and the action expert.

pub mod dit;
pub mod geo;
pub mod mllm;
pub mod scene;
pub mod timestep;

pub use dit::{dit_forward, Conditioning, ConditioningInput, Dit, DitConfig};
pub use geo::{
    decode_positions, geo_encoder_forward, GeoEncoder, GeoEncoderConfig, GeoTokens, GeoVars,
};
pub use mllm::{mllm_forward, MllmOutput, ToyMllm, ToyMllmConfig};
pub use scene::{SceneBatch, SceneSpec};
pub use timestep::timestep_embedding;
