//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is optional
//! and falls back to the default listed in [`KEYS`]; unknown keys are errors.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::bench::{CorruptionMode, TrainConfig};
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::fusion::FusionSchemeId;
use crate::policy::{Arch, PolicyConfig};

/// Every accepted key with its default and meaning.
pub const KEYS: &[(&str, &str, &str)] = &[
    (
        "scheme",
        "gated_fusion",
        "fusion scheme id, `none` for the base model",
    ),
    (
        "arch",
        "groot",
        "`groot` (shared final-layer conditioning) or `pi` (layer-wise)",
    ),
    (
        "seed",
        "7",
        "seed for data, initialization, training and evaluation",
    ),
    (
        "tau_alpha",
        "1",
        "alpha of the Beta distribution of flow times",
    ),
    (
        "tau_beta",
        "1",
        "beta of the Beta distribution of flow times",
    ),
    ("euler_steps", "10", "Euler steps at inference"),
    ("noise_std", "1", "standard deviation of the starting noise"),
    (
        "sparse_k",
        "0",
        "layer-wise gated fusion skips k expert layers between injections",
    ),
    (
        "sparse_phase",
        "0",
        "first expert layer that receives gated tokens",
    ),
    (
        "corruption",
        "none",
        "inference-time geometry corruption: none, zeros, gaussian[:sigma]",
    ),
    (
        "freeze_geo",
        "true",
        "keep the geometric encoder frozen during training",
    ),
    ("steps", "6000", "training steps"),
    ("batch_size", "16", "episodes per step"),
    ("dataset_size", "4096", "training episodes"),
    (
        "lr_backbone",
        "0.001",
        "peak learning rate of the language backbone",
    ),
    (
        "lr_head",
        "0.01",
        "peak learning rate of the action expert and fusion parameters",
    ),
    (
        "warmup_steps",
        "100",
        "linear warm-up steps before cosine decay",
    ),
    ("beta1", "0", "Adam first-moment decay; 0 keeps no momentum"),
    ("beta2", "0.999", "Adam second-moment decay"),
    ("grad_clip", "1", "global gradient-norm clip, 0 disables"),
    (
        "eval_episodes",
        "256",
        "evaluation episodes per task variant",
    ),
    (
        "lambda_align",
        "0.1",
        "weight of the 3D-token alignment loss",
    ),
    (
        "sf_weight",
        "0.1",
        "weight of the spatial-forcing alignment loss",
    ),
    (
        "mid_layer",
        "2",
        "1-based backbone layer for mid-layer injection and spatial forcing",
    ),
    ("out_dir", "runs", "output directory"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scheme: FusionSchemeId,
    pub arch: Arch,
    pub seed: u64,
    pub flow: FlowConfig,
    pub sparse_k: usize,
    pub sparse_phase: usize,
    pub corruption: CorruptionMode,
    pub freeze_geo: bool,
    pub train: TrainConfig,
    pub dataset_size: usize,
    pub eval_episodes: usize,
    pub lambda_align: f64,
    pub sf_weight: f64,
    pub mid_layer: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut c = Self {
            scheme: FusionSchemeId::GatedFusion,
            arch: Arch::Groot,
            seed: 0,
            flow: FlowConfig::default(),
            sparse_k: 0,
            sparse_phase: 0,
            corruption: CorruptionMode::None,
            freeze_geo: true,
            train: TrainConfig::default(),
            dataset_size: 0,
            eval_episodes: 0,
            lambda_align: 0.0,
            sf_weight: 0.0,
            mid_layer: 0,
            out_dir: PathBuf::new(),
        };
        for (k, v, _) in KEYS {
            c.set(k, v).expect("documented defaults parse");
        }
        c
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "scheme" => self.scheme = value.parse()?,
            "arch" => self.arch = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "tau_alpha" => self.flow.alpha = parse(key, value)?,
            "tau_beta" => self.flow.beta = parse(key, value)?,
            "euler_steps" => self.flow.n_euler_steps = parse(key, value)?,
            "noise_std" => self.flow.noise_std = parse(key, value)?,
            "sparse_k" => self.sparse_k = parse(key, value)?,
            "sparse_phase" => self.sparse_phase = parse(key, value)?,
            "corruption" => self.corruption = value.parse()?,
            "freeze_geo" => self.freeze_geo = parse(key, value)?,
            "steps" => self.train.steps = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "dataset_size" => self.dataset_size = parse(key, value)?,
            "lr_backbone" => self.train.lr_backbone = parse(key, value)?,
            "lr_head" => self.train.lr_head = parse(key, value)?,
            "warmup_steps" => self.train.warmup_steps = parse(key, value)?,
            "beta1" => self.train.beta1 = parse(key, value)?,
            "beta2" => self.train.beta2 = parse(key, value)?,
            "grad_clip" => self.train.grad_clip = parse(key, value)?,
            "eval_episodes" => self.eval_episodes = parse(key, value)?,
            "lambda_align" => self.lambda_align = parse(key, value)?,
            "sf_weight" => self.sf_weight = parse(key, value)?,
            "mid_layer" => self.mid_layer = parse(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(Error::UnknownParam(key.to_string())),
        }
        Ok(())
    }

    /// Defaults overridden by the entries of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse { line: n + 1, msg };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
            c.set(k.trim(), v.trim()).map_err(|e| match e {
                Error::UnknownParam(k) => err(format!("unknown key `{k}`")),
                other => err(other.to_string()),
            })?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.policy_config().validate()?;
        self.train.validate()?;
        self.corruption.validate()?;
        if self.dataset_size == 0 || self.eval_episodes == 0 {
            return Err(Error::Config(
                "dataset_size and eval_episodes must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Every key with its current value, in [`KEYS`] order; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _, _) in KEYS {
            let v = match *k {
                "scheme" => self.scheme.to_string(),
                "arch" => self.arch.to_string(),
                "seed" => self.seed.to_string(),
                "tau_alpha" => self.flow.alpha.to_string(),
                "tau_beta" => self.flow.beta.to_string(),
                "euler_steps" => self.flow.n_euler_steps.to_string(),
                "noise_std" => self.flow.noise_std.to_string(),
                "sparse_k" => self.sparse_k.to_string(),
                "sparse_phase" => self.sparse_phase.to_string(),
                "corruption" => self.corruption.to_string(),
                "freeze_geo" => self.freeze_geo.to_string(),
                "steps" => self.train.steps.to_string(),
                "batch_size" => self.train.batch_size.to_string(),
                "dataset_size" => self.dataset_size.to_string(),
                "lr_backbone" => self.train.lr_backbone.to_string(),
                "lr_head" => self.train.lr_head.to_string(),
                "warmup_steps" => self.train.warmup_steps.to_string(),
                "beta1" => self.train.beta1.to_string(),
                "beta2" => self.train.beta2.to_string(),
                "grad_clip" => self.train.grad_clip.to_string(),
                "eval_episodes" => self.eval_episodes.to_string(),
                "lambda_align" => self.lambda_align.to_string(),
                "sf_weight" => self.sf_weight.to_string(),
                "mid_layer" => self.mid_layer.to_string(),
                "out_dir" => self.out_dir.display().to_string(),
                _ => unreachable!("every documented key is rendered"),
            };
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn policy_config(&self) -> PolicyConfig {
        let mut p = PolicyConfig {
            arch: self.arch,
            scheme: self.scheme,
            flow: self.flow.clone(),
            sparse_k: self.sparse_k,
            sparse_phase: self.sparse_phase,
            lambda_align: self.lambda_align,
            sf_weight: self.sf_weight,
            mid_layer: self.mid_layer,
            ..Default::default()
        };
        p.geo.frozen = self.freeze_geo;
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documentation() {
        let c = ExperimentConfig::default();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.eval_episodes, 256);
        assert_eq!(c.scheme, FusionSchemeId::GatedFusion);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let c = ExperimentConfig::parse("scheme = spatial_forcing\narch=pi\n# note\ncorruption = gaussian:0.5\nlr_head = 0.003\n").unwrap();
        assert_eq!(c.arch, Arch::Pi);
        assert_eq!(c.corruption, CorruptionMode::Gaussian { sigma: 0.5 });
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_and_malformed_keys_are_rejected() {
        match ExperimentConfig::parse("seed = 1\nlearning_rate = 3") {
            Err(Error::Parse { line: 2, msg }) => assert!(msg.contains("learning_rate"), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert!(ExperimentConfig::parse("seed 1").is_err());
        assert!(ExperimentConfig::parse("steps = many").is_err());
        assert!(ExperimentConfig::parse("scheme = gated").is_err());
        assert!(ExperimentConfig::parse("eval_episodes = 0").is_err());
    }
}
