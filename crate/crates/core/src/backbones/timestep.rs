use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_PERIOD: f64 = 10_000.0;
/// `τ ∈ [0, 1]` is stretched so the fastest frequency turns many times over the interval.
const TAU_SCALE: f64 = 1000.0;

/// Sinusoidal embedding of `τ`: first half `sin(τ·ω_i)`, second half `cos(τ·ω_i)`
/// with geometrically spaced `ω_i`. Shape `[1, D]`.
pub fn timestep_embedding(tau: f64, d: usize) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Domain(format!("tau = {tau} outside [0, 1]")));
    }
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "timestep embedding width {d} must be even and positive"
        )));
    }
    let half = d / 2;
    let mut out = vec![0.0; d];
    for i in 0..half {
        let freq = MAX_PERIOD.powf(-(i as f64) / half as f64);
        let phase = tau * TAU_SCALE * freq;
        out[i] = phase.sin();
        out[half + i] = phase.cos();
    }
    Tensor::new(vec![1, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_phase() {
        let e = timestep_embedding(0.0, 8).unwrap();
        assert_eq!(e.shape(), &[1, 8]);
        assert!(e.data()[..4].iter().all(|&v| v == 0.0));
        assert!(e.data()[4..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn injective_on_tenths() {
        let embs: Vec<Tensor> = (0..=10)
            .map(|i| timestep_embedding(i as f64 / 10.0, 32).unwrap())
            .collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let dist: f64 = embs[i]
                    .sub(&embs[j])
                    .unwrap()
                    .data()
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                assert!(dist > 1e-3, "tau {i} and {j} collide ({dist})");
            }
        }
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(timestep_embedding(1.5, 8), Err(Error::Domain(_))));
        assert!(matches!(timestep_embedding(-0.1, 8), Err(Error::Domain(_))));
        assert!(timestep_embedding(1.0, 8).is_ok());
    }
}
