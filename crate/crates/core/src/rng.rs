//! Path-keyed deterministic random streams.
//!
//! Every parameter tensor draws from its own ChaCha stream whose key is
//! derived from `(seed, path)`, so the value of a tensor never depends on
//! the order in which tensors are constructed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

pub fn keyed_rng(seed: u64, path: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(path.as_bytes());
    let key: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(key)
}

/// `n` samples from N(0, std^2) on the stream keyed by `(seed, path)`.
pub fn gaussian(seed: u64, path: &str, n: usize, std: f64) -> Vec<f64> {
    let mut rng = keyed_rng(seed, path);
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * std
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_path_keyed() {
        let a = gaussian(7, "layers.0.wq", 16, 1.0);
        let b = gaussian(7, "layers.0.wq", 16, 1.0);
        let c = gaussian(7, "layers.0.wk", 16, 1.0);
        let d = gaussian(8, "layers.0.wq", 16, 1.0);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert!(a.iter().all(|x| x.is_finite()));
    }
}
