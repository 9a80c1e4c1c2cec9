//! Seeded parameter initialization and counter-based randomness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::math;
use crate::tensor::Tensor;

pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, rows: usize, cols: usize, bound: f64) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        Tensor::new(rows, cols, data).expect("finite init")
    }

    /// Glorot-uniform matrix for a `fan_in → fan_out` map.
    pub fn glorot(&mut self, rows: usize, cols: usize) -> Tensor {
        let bound = math::sqrt(6.0 / (rows + cols) as f64);
        self.uniform(rows, cols, bound)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform value in `[0, 1)` determined entirely by the key.
pub fn unit_from_key(key: &[u64]) -> f64 {
    let h = key.iter().fold(0x51_7C_C1_B7_27_22_0A_95u64, |acc, &k| mix64(acc ^ k));
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
