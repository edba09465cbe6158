//! Flow-matching training with a two-tier learning rate.
//!
//! The backbone (`mllm.*`) trains at `lr_backbone`, everything else trainable
//! at `lr_head`. Both follow linear warm-up then cosine decay, after a global
//! gradient-norm clip. The optimizer is Adam; with the default `beta1 = 0` it
//! keeps no first moment.

use serde::{Deserialize, Serialize};

use super::{Episode, ACTION_DIM, HORIZON};
use crate::autograd::Graph;
use crate::backbones::mllm;
use crate::backbones::SceneSpec;
use crate::error::{Error, Result};
use crate::flow::sample_tau;
use crate::params::ParamStore;
use crate::policy::{Policy, PolicyConfig};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            batch_size: 16,
            lr_backbone: 1e-3,
            lr_head: 1e-2,
            warmup_steps: 100,
            beta1: 0.0,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, v) in [("lr_backbone", self.lr_backbone), ("lr_head", self.lr_head)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} = {v} must be finite and non-negative"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "Adam betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        // Written so that NaN fails both checks.
        let eps_ok = self.adam_eps > 0.0;
        let clip_ok = self.grad_clip >= 0.0;
        if !eps_ok || !clip_ok {
            return Err(Error::Config(
                "adam_eps must be positive and grad_clip non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Multiplier on the base rates at 0-based `step`.
    pub fn schedule(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let p = ((step - self.warmup_steps) as f64 / span).min(1.0);
        0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub policy: Policy,
    /// Total loss before each update.
    pub loss_curve: Vec<f64>,
}

/// Build a fresh policy from `(config, seed)` and fit it to `dataset`.
pub fn train_policy(
    config: &PolicyConfig,
    dataset: &[Episode],
    train: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let mut policy = Policy::new(config.clone(), seed)?;
    let loss_curve = fit(&mut policy, dataset, train, seed)?;
    Ok(TrainOutcome { policy, loss_curve })
}

/// Train `policy` in place and return the per-step loss.
///
/// The data stream (`train/data` under `seed`) depends only on the dataset
/// size, batch size and noise scale, so every scheme sees the same batches,
/// noise and times.
pub fn fit(
    policy: &mut Policy,
    dataset: &[Episode],
    train: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::EmptySequence("training dataset"));
    }
    train.validate()?;
    let mut data = RngStream::named(seed, "train/data");
    let mut adam = Adam::new(&policy.store);
    let mut curve = Vec::with_capacity(train.steps);
    let b = train.batch_size;
    for step in 0..train.steps {
        let idx: Vec<usize> = (0..b).map(|_| data.below(dataset.len())).collect();
        let eps = data.normal_tensor(&[b, HORIZON, ACTION_DIM], policy.config.flow.noise_std);
        let tau: Vec<f64> = (0..b)
            .map(|_| sample_tau(&mut data, &policy.config.flow))
            .collect();

        let scenes: Vec<SceneSpec> = idx.iter().map(|&i| dataset[i].scene.clone()).collect();
        let targets = Tensor::new(
            vec![b, HORIZON, ACTION_DIM],
            idx.iter()
                .flat_map(|&i| dataset[i].target.actions.data().iter().copied())
                .collect(),
        )?;
        let batch = policy.batch(&scenes)?;
        let diverged = |e: Error| match e {
            Error::NonFinite(_) => Error::Diverged {
                step,
                loss: f64::NAN,
            },
            other => other,
        };
        let mut g = Graph::new();
        let loss = policy
            .loss_graph(&mut g, &batch, &targets, &eps, &tau)
            .map_err(diverged)?;
        let value = g.value(loss.total).data()[0];
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        curve.push(value);
        let mut grads = g.backward(loss.total).map_err(diverged)?;
        let norm = grads.norm();
        if !norm.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        if train.grad_clip > 0.0 && norm > train.grad_clip {
            grads.scale(train.grad_clip / norm);
        }
        let s = train.schedule(step);
        adam.step(&mut policy.store, &grads, train, |id| {
            s * if id.starts_with(mllm::PREFIX) {
                train.lr_backbone
            } else {
                train.lr_head
            }
        });
    }
    Ok(curve)
}

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &crate::autograd::Gradients,
        c: &TrainConfig,
        lr: impl Fn(&str) -> f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (i, g) in grads.iter() {
            let p = store.by_index_mut(i);
            if !p.trainable {
                continue;
            }
            let rate = lr(&p.id);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, (w, &gk)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                *w -= rate * (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.adam_eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{generate_dataset, Split};
    use crate::fusion::FusionSchemeId;

    fn short() -> TrainConfig {
        TrainConfig {
            steps: 30,
            batch_size: 4,
            warmup_steps: 5,
            ..Default::default()
        }
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let c = TrainConfig::default();
        assert!((c.schedule(0) - 0.01).abs() < 1e-15);
        assert_eq!(c.schedule(99), 1.0);
        assert_eq!(c.schedule(100), 1.0);
        assert!(c.schedule(c.steps - 1) < 1e-4);
    }

    #[test]
    fn same_seed_same_curve_and_frozen_geometry() {
        let data = generate_dataset(3, 32, Split::Train).unwrap();
        let cfg = PolicyConfig {
            scheme: FusionSchemeId::GatedFusion,
            ..Default::default()
        };
        let a = train_policy(&cfg, &data, &short(), 3).unwrap();
        let b = train_policy(&cfg, &data, &short(), 3).unwrap();
        let bits = |c: &[f64]| c.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.loss_curve), bits(&b.loss_curve));
        let fresh = Policy::new(cfg, 3).unwrap();
        for p in fresh.store.iter().filter(|p| p.id.starts_with("geo.")) {
            assert!(
                a.policy.store.value(&p.id).unwrap().bit_eq(&p.value),
                "{}",
                p.id
            );
        }
        assert_ne!(
            a.policy.store.value("mix.w_proj").unwrap(),
            fresh.store.value("mix.w_proj").unwrap()
        );
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(train_policy(&PolicyConfig::default(), &[], &short(), 1).is_err());
    }

    #[test]
    fn divergence_reports_the_step() {
        let data = generate_dataset(3, 8, Split::Train).unwrap();
        let t = TrainConfig {
            lr_head: 1e300,
            lr_backbone: 1e300,
            grad_clip: 0.0,
            warmup_steps: 0,
            ..short()
        };
        match train_policy(&PolicyConfig::default(), &data, &t, 1) {
            Err(Error::Diverged { step, .. }) => assert!(step > 0),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.loss_curve)),
        }
    }
}
