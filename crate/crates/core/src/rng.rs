//! Named, seedable random streams.
//!
//! Every source of randomness in the crate is an [`RngStream`] identified by a
//! `(seed, stream_id)` pair. The generator is ChaCha8 with the stream id mapped
//! onto ChaCha's native stream selector, so draws are identical on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

pub const ALGORITHM: &str = "chacha8";

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    /// Stream keyed by a string label, e.g. a parameter id.
    pub fn named(seed: u64, label: &str) -> Self {
        Self::new(seed, stream_id_for(label))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Independent child stream; the parent is not advanced.
    pub fn derive(&self, label: &str) -> Self {
        Self::new(
            self.seed,
            stream_id_for(&format!("{}/{label}", self.stream_id)),
        )
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// One draw from `Beta(alpha, beta)`, resampled until it lies strictly inside `(0, 1)`.
    pub fn beta(&mut self, alpha: f64, beta: f64) -> f64 {
        let dist = Beta::new(alpha, beta).expect("beta parameters validated by caller");
        loop {
            let x: f64 = dist.sample(&mut self.rng);
            if x > 0.0 && x < 1.0 {
                return x;
            }
        }
    }

    pub fn normal_tensor(&mut self, shape: &[usize], std: f64) -> Tensor {
        Tensor::from_fn(shape, |_| std * self.normal())
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], bound: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.uniform_range(-bound, bound))
    }

    /// `k` distinct values from `0..n`, in draw order.
    pub fn distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.rng, n, k).into_vec()
    }
}

/// Stable 64-bit stream id for a label.
pub fn stream_id_for(label: &str) -> u64 {
    let digest = Sha256::digest(label.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_stream_replay() {
        let mut a = RngStream::new(7, 3);
        let mut b = RngStream::new(7, 3);
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn streams_differ() {
        let mut a = RngStream::new(7, 3);
        let mut b = RngStream::new(7, 4);
        let xs: Vec<f64> = (0..8).map(|_| a.uniform()).collect();
        let ys: Vec<f64> = (0..8).map(|_| b.uniform()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn known_first_draw_is_pinned() {
        // Guards against a silent generator change between dependency versions.
        let mut r = RngStream::new(0, 0);
        let first = r.rng.gen::<u64>();
        assert_eq!(first, 13_080_132_717_333_068_652);
    }
}
