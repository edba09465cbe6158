//! A reach-the-named-object benchmark whose answer depends on 3D positions.
//!
//! Each scene holds a few labelled objects at random points of the unit cube.
//! The instruction names one label, the target chunk is a straight-line reach
//! from a fixed home pose to that object. Labels are visible to every policy,
//! positions only through the geometric tokens, so a position-blind policy
//! can do no better than guessing the mean of the position prior.

pub mod dataset;
pub mod train;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbones::{GeoTokens, SceneSpec};
use crate::error::{Error, Result};
use crate::flow::ActionChunk;
use crate::policy::{GeoInput, Policy};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub use dataset::{dataset_hash, export_dataset, import_dataset};
pub use train::{train_policy, TrainConfig, TrainOutcome};

pub const HORIZON: usize = 4;
pub const ACTION_DIM: usize = 7;
/// Gripper channel; 1 closes the gripper.
pub const GRIP: usize = 6;
pub const HOME: [f64; 3] = [0.5, 0.5, 1.0];
/// Max-norm action error below which an episode counts as a success.
pub const SUCCESS_TOL: f64 = 0.05;
/// Distinct object labels the generator draws from.
pub const LABEL_POOL: usize = 8;
/// Translation steps are expressed in units of the largest possible per-step
/// displacement, `1 / HORIZON`, so every channel spans at most `[-1, 1]`.
pub const STEP_UNIT: f64 = 1.0 / HORIZON as f64;
/// Patch slots per scene; upper bound on objects.
pub const SLOTS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

/// A named evaluation condition: a fixed number of objects per scene.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskVariant {
    pub name: String,
    pub n_objects: usize,
}

impl TaskVariant {
    pub fn reach(n_objects: usize) -> Self {
        Self {
            name: format!("reach_{n_objects}obj"),
            n_objects,
        }
    }

    /// The three default variants, two to four objects.
    pub fn defaults() -> Vec<Self> {
        (2..=4).map(Self::reach).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub scene: SceneSpec,
    /// `[1, HORIZON, ACTION_DIM]`
    pub target: ActionChunk,
    pub split: Split,
}

/// Straight-line reach from [`HOME`] to the instructed object in `HORIZON`
/// equal steps of [`STEP_UNIT`]-normalized displacement; the gripper closes
/// on the last step only.
pub fn target_action(scene: &SceneSpec) -> ActionChunk {
    let p = scene.target_position();
    let mut a = Tensor::zeros(&[1, HORIZON, ACTION_DIM]);
    for t in 0..HORIZON {
        for c in 0..3 {
            a.set(&[0, t, c], (p[c] - HOME[c]) / HORIZON as f64 / STEP_UNIT);
        }
    }
    a.set(&[0, HORIZON - 1, GRIP], 1.0);
    ActionChunk { actions: a }
}

pub fn generate_episode(rng: &mut RngStream, n_objects: usize, split: Split) -> Result<Episode> {
    if n_objects == 0 || n_objects > SLOTS {
        return Err(Error::Domain(format!(
            "n_objects {n_objects} outside 1..={SLOTS}"
        )));
    }
    let object_positions = (0..n_objects)
        .map(|_| [rng.uniform(), rng.uniform(), rng.uniform()])
        .collect();
    let object_ids = rng.distinct(LABEL_POOL, n_objects);
    let instruction_id = rng.below(n_objects);
    let scene = SceneSpec {
        object_positions,
        object_ids,
        instruction_id,
    };
    let target = target_action(&scene);
    Ok(Episode {
        scene,
        target,
        split,
    })
}

/// Training set with `2..=4` objects per scene, drawn in order from one stream.
pub fn generate_dataset(seed: u64, n: usize, split: Split) -> Result<Vec<Episode>> {
    let mut rng = RngStream::named(seed, &format!("data/{}", split.as_str()));
    (0..n)
        .map(|_| {
            let k = 2 + rng.below(3);
            generate_episode(&mut rng, k, split)
        })
        .collect()
}

/// `n` evaluation episodes of one variant, independent of the training stream.
pub fn generate_eval_episodes(seed: u64, variant: &TaskVariant, n: usize) -> Result<Vec<Episode>> {
    let mut rng = RngStream::named(seed, &format!("data/eval/{}", variant.name));
    (0..n)
        .map(|_| generate_episode(&mut rng, variant.n_objects, Split::Eval))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CorruptionMode {
    None,
    Zeros,
    Gaussian { sigma: f64 },
}

impl CorruptionMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CorruptionMode::Gaussian { sigma } if !(sigma > 0.0 && sigma.is_finite()) => Err(
                Error::Config(format!("gaussian corruption needs sigma > 0, got {sigma}")),
            ),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for CorruptionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorruptionMode::None => f.write_str("none"),
            CorruptionMode::Zeros => f.write_str("zeros"),
            CorruptionMode::Gaussian { sigma } => write!(f, "gaussian:{sigma}"),
        }
    }
}

/// `none`, `zeros`, `gaussian` (σ = 1) or `gaussian:<σ>`.
impl FromStr for CorruptionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let m = match s {
            "none" => CorruptionMode::None,
            "zeros" => CorruptionMode::Zeros,
            "gaussian" => CorruptionMode::Gaussian { sigma: 1.0 },
            _ => match s.strip_prefix("gaussian:") {
                Some(v) => CorruptionMode::Gaussian {
                    sigma: v
                        .parse()
                        .map_err(|_| Error::Config(format!("bad gaussian sigma `{v}`")))?,
                },
                None => {
                    return Err(Error::Config(format!(
                        "unknown corruption `{s}` (valid: none, zeros, gaussian, gaussian:<sigma>)"
                    )))
                }
            },
        };
        m.validate()?;
        Ok(m)
    }
}

/// Replace geometric tokens as an inference-time ablation. Patches are drawn
/// before the global token.
pub fn corrupt_geo(tokens: &GeoTokens, mode: CorruptionMode, rng: &mut RngStream) -> GeoTokens {
    match mode {
        CorruptionMode::None => tokens.clone(),
        CorruptionMode::Zeros => GeoTokens {
            patches: Tensor::zeros(tokens.patches.shape()),
            global: Tensor::zeros(tokens.global.shape()),
        },
        CorruptionMode::Gaussian { sigma } => {
            let patches = rng.normal_tensor(tokens.patches.shape(), sigma);
            let global = rng.normal_tensor(tokens.global.shape(), sigma);
            GeoTokens { patches, global }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub success_rate: f64,
    /// Mean Frobenius distance between predicted and target chunks.
    pub mean_l2_error: f64,
    pub n_episodes: usize,
}

impl Metrics {
    pub fn from_errors(errors: &[(f64, f64)]) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::EmptySequence("metrics"));
        }
        let n = errors.len();
        let hits = errors.iter().filter(|(max, _)| *max < SUCCESS_TOL).count();
        let l2 = errors.iter().map(|(_, l2)| l2).sum::<f64>() / n as f64;
        Ok(Self {
            success_rate: hits as f64 / n as f64,
            mean_l2_error: l2,
            n_episodes: n,
        })
    }
}

/// Anything that turns scenes and starting noise into action chunks.
pub trait ChunkPolicy: Sync {
    /// Whether [`ChunkPolicy::sample`] reads geometric tokens.
    fn needs_geometry(&self) -> bool;
    fn geometry(&self, scenes: &[SceneSpec]) -> Result<GeoTokens>;
    fn sample(
        &self,
        scenes: &[SceneSpec],
        geo: Option<&GeoTokens>,
        noise: &Tensor,
    ) -> Result<Tensor>;
    fn noise_std(&self) -> f64;
}

impl ChunkPolicy for Policy {
    fn needs_geometry(&self) -> bool {
        self.bundle.hooks.inference_geo_required
    }

    fn geometry(&self, scenes: &[SceneSpec]) -> Result<GeoTokens> {
        self.geo_tokens(scenes)
    }

    fn sample(
        &self,
        scenes: &[SceneSpec],
        geo: Option<&GeoTokens>,
        noise: &Tensor,
    ) -> Result<Tensor> {
        let input = match geo {
            Some(t) => GeoInput::Given(t),
            None => GeoInput::Absent,
        };
        self.sample_actions(scenes, noise, input)
    }

    fn noise_std(&self) -> f64 {
        self.config.flow.noise_std
    }
}

/// Integrates the true constant velocity `A* − ε`.
pub struct OraclePolicy {
    pub n_euler_steps: usize,
}

impl ChunkPolicy for OraclePolicy {
    fn needs_geometry(&self) -> bool {
        false
    }

    fn geometry(&self, _scenes: &[SceneSpec]) -> Result<GeoTokens> {
        Err(Error::SchemeContract("the oracle reads no geometry".into()))
    }

    fn sample(
        &self,
        scenes: &[SceneSpec],
        _geo: Option<&GeoTokens>,
        noise: &Tensor,
    ) -> Result<Tensor> {
        let per = HORIZON * ACTION_DIM;
        let mut parts = Vec::with_capacity(scenes.len());
        for (i, s) in scenes.iter().enumerate() {
            let eps = Tensor::new(
                vec![1, HORIZON, ACTION_DIM],
                noise.data()[i * per..(i + 1) * per].to_vec(),
            )?;
            let v = target_action(s).actions.sub(&eps)?;
            let field = |_: &Tensor, _: f64| Ok(v.clone());
            parts.push(crate::flow::euler_from(&field, eps, self.n_euler_steps)?);
        }
        Tensor::concat_seq(&parts.iter().collect::<Vec<_>>())?.reshape(&[
            scenes.len(),
            HORIZON,
            ACTION_DIM,
        ])
    }

    fn noise_std(&self) -> f64 {
        1.0
    }
}

/// Emits its starting noise unchanged.
pub struct RandomPolicy;

impl ChunkPolicy for RandomPolicy {
    fn needs_geometry(&self) -> bool {
        false
    }

    fn geometry(&self, _scenes: &[SceneSpec]) -> Result<GeoTokens> {
        Err(Error::SchemeContract(
            "the random policy reads no geometry".into(),
        ))
    }

    fn sample(
        &self,
        _scenes: &[SceneSpec],
        _geo: Option<&GeoTokens>,
        noise: &Tensor,
    ) -> Result<Tensor> {
        Ok(noise.clone())
    }

    fn noise_std(&self) -> f64 {
        1.0
    }
}

/// Episodes evaluated per forward batch. Results do not depend on it.
const EVAL_CHUNK: usize = 32;

/// Sample one chunk per episode and score it against the target.
///
/// Episode `i` draws its noise from stream `eval/noise/{i}` and its corruption
/// from `eval/corrupt/{i}` under `seed`, so results are independent of chunking
/// and thread count.
pub fn evaluate_policy(
    policy: &dyn ChunkPolicy,
    episodes: &[Episode],
    corruption: CorruptionMode,
    seed: u64,
) -> Result<Metrics> {
    if episodes.is_empty() {
        return Err(Error::EmptySequence("evaluation episodes"));
    }
    corruption.validate()?;
    let starts: Vec<usize> = (0..episodes.len()).step_by(EVAL_CHUNK).collect();
    let per_chunk: Vec<Vec<(f64, f64)>> = starts
        .par_iter()
        .map(|&s| {
            let eps = &episodes[s..(s + EVAL_CHUNK).min(episodes.len())];
            evaluate_chunk(policy, eps, s, corruption, seed)
        })
        .collect::<Result<_>>()?;
    Metrics::from_errors(&per_chunk.concat())
}

fn evaluate_chunk(
    policy: &dyn ChunkPolicy,
    episodes: &[Episode],
    offset: usize,
    corruption: CorruptionMode,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let scenes: Vec<SceneSpec> = episodes.iter().map(|e| e.scene.clone()).collect();
    let b = scenes.len();
    let per = HORIZON * ACTION_DIM;
    let mut noise = Vec::with_capacity(b * per);
    for i in 0..b {
        let mut r = RngStream::named(seed, &format!("eval/noise/{}", offset + i));
        noise.extend(r.normal_tensor(&[per], policy.noise_std()).into_data());
    }
    let noise = Tensor::new(vec![b, HORIZON, ACTION_DIM], noise)?;
    let geo = if policy.needs_geometry() {
        let clean = policy.geometry(&scenes)?;
        Some(corrupt_per_episode(&clean, corruption, seed, offset)?)
    } else {
        None
    };
    let out = policy.sample(&scenes, geo.as_ref(), &noise)?;
    let want = [b, HORIZON, ACTION_DIM];
    if out.shape() != want {
        return Err(Error::shape("policy output", &want, out.shape()));
    }
    Ok(episodes
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let pred = &out.data()[i * per..(i + 1) * per];
            let mut max = 0.0f64;
            let mut sq = 0.0;
            for (p, t) in pred.iter().zip(e.target.actions.data()) {
                let d = p - t;
                max = max.max(d.abs());
                sq += d * d;
            }
            (if max.is_nan() { f64::INFINITY } else { max }, sq.sqrt())
        })
        .collect())
}

fn corrupt_per_episode(
    tokens: &GeoTokens,
    mode: CorruptionMode,
    seed: u64,
    offset: usize,
) -> Result<GeoTokens> {
    if mode == CorruptionMode::None {
        return Ok(tokens.clone());
    }
    let b = tokens.patches.shape()[0];
    let mut patches = Vec::with_capacity(b);
    let mut globals = Vec::with_capacity(b);
    for i in 0..b {
        let one = GeoTokens {
            patches: slice_batch(&tokens.patches, i)?,
            global: slice_batch(&tokens.global, i)?,
        };
        let mut r = RngStream::named(seed, &format!("eval/corrupt/{}", offset + i));
        let c = corrupt_geo(&one, mode, &mut r);
        patches.push(c.patches);
        globals.push(c.global);
    }
    Ok(GeoTokens {
        patches: stack_batch(&patches)?,
        global: stack_batch(&globals)?,
    })
}

fn slice_batch(t: &Tensor, i: usize) -> Result<Tensor> {
    let per: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = 1;
    Tensor::new(shape, t.data()[i * per..(i + 1) * per].to_vec())
}

fn stack_batch(parts: &[Tensor]) -> Result<Tensor> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.len();
    Tensor::new(
        shape,
        parts
            .iter()
            .flat_map(|p| p.data().iter().copied())
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene_at(p: [f64; 3]) -> SceneSpec {
        SceneSpec {
            object_positions: vec![[0.1, 0.1, 0.1], p],
            object_ids: vec![0, 1],
            instruction_id: 1,
        }
    }

    #[test]
    fn object_at_home_gives_zero_translation() {
        let a = target_action(&scene_at(HOME)).actions;
        for t in 0..HORIZON {
            for c in 0..6 {
                assert_eq!(a.get(&[0, t, c]), 0.0);
            }
        }
        assert_eq!(a.get(&[0, HORIZON - 1, GRIP]), 1.0);
    }

    #[test]
    fn translation_is_linear_in_offset() {
        let d = [0.1, -0.2, -0.3];
        let one =
            target_action(&scene_at([HOME[0] + d[0], HOME[1] + d[1], HOME[2] + d[2]])).actions;
        let two = target_action(&scene_at([
            HOME[0] + 2.0 * d[0],
            HOME[1] + 2.0 * d[1],
            HOME[2] + 2.0 * d[2],
        ]))
        .actions;
        for t in 0..HORIZON {
            for c in 0..3 {
                assert!((two.get(&[0, t, c]) - 2.0 * one.get(&[0, t, c])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn episodes_are_deterministic_and_valid() {
        let a = generate_episode(&mut RngStream::new(5, 1), 4, Split::Train).unwrap();
        let b = generate_episode(&mut RngStream::new(5, 1), 4, Split::Train).unwrap();
        assert_eq!(a, b);
        a.scene.validate().unwrap();
        assert_eq!(a.target, target_action(&a.scene));
        assert!(generate_episode(&mut RngStream::new(5, 1), 0, Split::Train).is_err());
        assert!(generate_episode(&mut RngStream::new(5, 1), SLOTS + 1, Split::Train).is_err());
    }

    #[test]
    fn corruption_modes() {
        let t = GeoTokens {
            patches: RngStream::new(1, 1).normal_tensor(&[2, 8, 48], 3.0),
            global: Tensor::full(&[2, 1, 48], 0.5),
        };
        let mut r = RngStream::new(1, 2);
        assert_eq!(corrupt_geo(&t, CorruptionMode::None, &mut r), t);
        let z = corrupt_geo(&t, CorruptionMode::Zeros, &mut r);
        assert_eq!(z.patches.data().iter().map(|v| v.abs()).sum::<f64>(), 0.0);
        assert!("gaussian:0".parse::<CorruptionMode>().is_err());
        assert_eq!(
            "gaussian:2.5".parse::<CorruptionMode>().unwrap(),
            CorruptionMode::Gaussian { sigma: 2.5 }
        );
        assert_eq!(
            "zeros".parse::<CorruptionMode>().unwrap().to_string(),
            "zeros"
        );
    }

    #[test]
    fn gaussian_corruption_has_requested_spread() {
        let t = GeoTokens {
            patches: Tensor::zeros(&[1, 100, 100]),
            global: Tensor::zeros(&[1, 1, 100]),
        };
        let c = corrupt_geo(
            &t,
            CorruptionMode::Gaussian { sigma: 1.0 },
            &mut RngStream::new(3, 0),
        );
        let d = c.patches.data();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let std = (d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        assert!((std - 1.0).abs() < 0.05, "{std}");
    }

    #[test]
    fn oracle_succeeds_and_random_fails() {
        let eps = generate_eval_episodes(1, &TaskVariant::reach(3), 64).unwrap();
        let m = evaluate_policy(
            &OraclePolicy { n_euler_steps: 10 },
            &eps,
            CorruptionMode::None,
            1,
        )
        .unwrap();
        assert_eq!(m.success_rate, 1.0);
        let m = evaluate_policy(&RandomPolicy, &eps, CorruptionMode::None, 1).unwrap();
        assert_eq!(m.success_rate, 0.0);
        assert_eq!(m.n_episodes, 64);
    }

    #[test]
    fn metrics_need_episodes() {
        assert!(Metrics::from_errors(&[]).is_err());
        let m = Metrics::from_errors(&[(0.01, 0.1), (0.2, 0.3)]).unwrap();
        assert_eq!(m.success_rate, 0.5);
    }
}
