//! Flow-matching objective and Euler sampling over action chunks.
//!
//! Interpolant `A_τ = (1 − τ)·ε + τ·A`, velocity target `v = A − ε`.
//! Sampling starts at `τ = 0` from noise and takes left-endpoint steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub alpha: f64,
    pub beta: f64,
    pub n_euler_steps: usize,
    pub noise_std: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            n_euler_steps: 10,
            noise_std: 1.0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0 && self.alpha.is_finite() && self.beta.is_finite())
        {
            return Err(Error::Config(format!(
                "tau distribution needs alpha, beta > 0 (got {}, {})",
                self.alpha, self.beta
            )));
        }
        if self.n_euler_steps == 0 {
            return Err(Error::Config("at least one Euler step is required".into()));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "noise_std {} must be positive",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// A chunk of `T` future actions per batch element, `[B, T, d_a]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    pub actions: Tensor,
}

impl ActionChunk {
    pub fn new(actions: Tensor) -> Result<Self> {
        actions.dims3("action chunk")?;
        actions.check_finite("action chunk")?;
        Ok(Self { actions })
    }
}

/// One `τ ~ Beta(alpha, beta)` draw, strictly inside `(0, 1)`.
pub fn sample_tau(rng: &mut RngStream, config: &FlowConfig) -> f64 {
    rng.beta(config.alpha, config.beta)
}

/// `(1 − τ)·e + τ·x`, exact at `τ = 0`, at `τ = 1` and whenever `e == x`.
fn lerp(e: f64, x: f64, tau: f64) -> f64 {
    let d = x - e;
    if tau < 0.5 {
        e + tau * d
    } else {
        x - (1.0 - tau) * d
    }
}

/// `(A_τ, v)` for clean actions `a`, noise `eps` and time `tau`.
pub fn fm_training_targets(a: &Tensor, eps: &Tensor, tau: f64) -> Result<(Tensor, Tensor)> {
    let a_tau = eps.zip_map(a, "fm_training_targets", |e, x| lerp(e, x, tau))?;
    let v = a.sub(eps)?;
    Ok((a_tau, v))
}

/// Like [`fm_training_targets`] with one `τ` per batch element.
pub fn fm_training_targets_per_sample(
    a: &Tensor,
    eps: &Tensor,
    tau: &[f64],
) -> Result<(Tensor, Tensor)> {
    let (b, t, d) = a.dims3("fm_training_targets")?;
    if eps.shape() != a.shape() {
        return Err(Error::shape("fm_training_targets", a.shape(), eps.shape()));
    }
    if tau.len() != b {
        return Err(Error::shape("fm_training_targets tau", &[b], &[tau.len()]));
    }
    let per = t * d;
    let a_tau = Tensor::from_fn(a.shape(), |i| {
        lerp(eps.data()[i], a.data()[i], tau[i / per])
    });
    Ok((a_tau, a.sub(eps)?))
}

/// Mean squared error over every entry.
pub fn fm_loss(v_pred: &Tensor, v_target: &Tensor) -> Result<f64> {
    if v_pred.shape() != v_target.shape() {
        return Err(Error::shape("fm_loss", v_pred.shape(), v_target.shape()));
    }
    let n = v_pred.len().max(1) as f64;
    Ok(v_pred
        .data()
        .iter()
        .zip(v_target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// Anything that predicts a velocity for a noisy chunk at time `τ`.
pub trait VelocityField {
    fn velocity(&self, a_tau: &Tensor, tau: f64) -> Result<Tensor>;
}

impl<F> VelocityField for F
where
    F: Fn(&Tensor, f64) -> Result<Tensor>,
{
    fn velocity(&self, a_tau: &Tensor, tau: f64) -> Result<Tensor> {
        self(a_tau, tau)
    }
}

/// Integrate from `ε ~ N(0, noise_std²)` of the given shape.
pub fn euler_integrate(
    field: &dyn VelocityField,
    shape: &[usize],
    rng: &mut RngStream,
    config: &FlowConfig,
) -> Result<Tensor> {
    config.validate()?;
    let eps = rng.normal_tensor(shape, config.noise_std);
    euler_from(field, eps, config.n_euler_steps)
}

/// Integrate from a given starting chunk with `n` left-endpoint steps over `[0, 1]`.
pub fn euler_from(field: &dyn VelocityField, start: Tensor, n: usize) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::Config("at least one Euler step is required".into()));
    }
    let dt = 1.0 / n as f64;
    let mut a = start;
    for k in 0..n {
        let tau = k as f64 * dt;
        let v = field.velocity(&a, tau)?;
        if v.shape() != a.shape() {
            return Err(Error::shape("euler velocity", a.shape(), v.shape()));
        }
        a = a.zip_map(&v, "euler step", |x, dv| x + dt * dv)?;
        a.check_finite(&format!("euler step {k}"))?;
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_are_exact() {
        let mut r = RngStream::new(1, 0);
        let a = r.normal_tensor(&[2, 4, 7], 1.0);
        let e = r.normal_tensor(&[2, 4, 7], 1.0);
        assert_eq!(fm_training_targets(&a, &e, 0.0).unwrap().0, e);
        assert_eq!(fm_training_targets(&a, &e, 1.0).unwrap().0, a);
        let (at, v) = fm_training_targets(&a, &a, 0.37).unwrap();
        assert_eq!(at, a);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn per_sample_matches_scalar() {
        let mut r = RngStream::new(2, 0);
        let a = r.normal_tensor(&[2, 3, 2], 1.0);
        let e = r.normal_tensor(&[2, 3, 2], 1.0);
        let (at, _) = fm_training_targets_per_sample(&a, &e, &[0.2, 0.8]).unwrap();
        let (a0, _) = fm_training_targets(
            &a.slice_seq(0, 3).unwrap(),
            &e.slice_seq(0, 3).unwrap(),
            0.2,
        )
        .unwrap();
        assert_eq!(&at.data()[..6], &a0.data()[..6]);
    }

    #[test]
    fn loss_cases() {
        let a = Tensor::full(&[1, 2, 3], 0.25);
        assert_eq!(fm_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.5);
        assert!((fm_loss(&b, &a).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_field_is_fixed_point() {
        let start = RngStream::new(3, 0).normal_tensor(&[1, 4, 7], 1.0);
        let zero = |a: &Tensor, _t: f64| Ok(Tensor::zeros(a.shape()));
        assert_eq!(euler_from(&zero, start.clone(), 10).unwrap(), start);
    }

    #[test]
    fn config_validation() {
        assert!(FlowConfig {
            alpha: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(FlowConfig {
            n_euler_steps: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(FlowConfig::default().validate().is_ok());
    }
}
