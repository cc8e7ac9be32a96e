//! Deterministic RNG derivation. Every consumer gets a ChaCha stream keyed
//! by (master seed, domain, batch index, item index), so data generation is
//! a pure function of those four values and seed domains cannot collide.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;
use crate::tensor::{FrameMask, Shape, Tensor};

/// Seed-domain tags. Distinct tags guarantee disjoint streams for the same
/// master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    /// Training batches.
    Train,
    /// Held-out evaluation batches.
    HeldOut,
    /// Parameter initialization.
    Init,
    /// Noise draws (sigma, epsilon) inside the training loop.
    TrainNoise,
    /// Noise draws during sampling/evaluation.
    SampleNoise,
    /// Coordinate sampling in gradient checks.
    GradCheck,
}

impl Domain {
    fn tag(self) -> u64 {
        match self {
            Domain::Train => 0,
            Domain::HeldOut => 1,
            Domain::Init => 2,
            Domain::TrainNoise => 3,
            Domain::SampleNoise => 4,
            Domain::GradCheck => 5,
        }
    }
}

/// ChaCha8 keyed directly with the four components; no hashing needed since
/// the key width fits all of them.
pub fn derive_rng(master_seed: u64, domain: Domain, batch_index: u64, item: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&master_seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.tag().to_le_bytes());
    key[16..24].copy_from_slice(&batch_index.to_le_bytes());
    key[24..32].copy_from_slice(&item.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// One standard-normal draw, always sampled in f64.
pub fn normal_f64(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Standard-normal tensor with padded frames zeroed.
pub fn normal_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: Shape, mask: &FrameMask) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = T::from_f64(normal_f64(rng));
    }
    mask.zero_padding(&mut t);
    t
}

/// Uniform draw in [lo, hi).
pub fn uniform_f64(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Uniform integer in [lo, hi] inclusive.
pub fn uniform_usize(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    debug_assert!(hi >= lo);
    lo + (rng.gen::<u64>() % (hi - lo + 1) as u64) as usize
}
