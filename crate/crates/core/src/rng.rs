//! Seeded random number helpers.
//!
//! Everything stochastic in the crate (weight init, synthetic data,
//! shuffles) draws from a ChaCha8 stream created here, so a run is fully
//! determined by its seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// A deterministic generator for the given seed.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal sample via the Box-Muller transform.
pub fn randn(rng: &mut impl Rng) -> f64 {
    // u1 in (0, 1] so the log is finite.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Tensor of i.i.d. normal samples with the given standard deviation.
pub fn randn_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| randn(rng) * std).collect();
    Tensor::from_vec(shape, data).expect("length matches shape by construction")
}

/// Tensor of i.i.d. uniform samples from `[lo, hi)`.
pub fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).expect("length matches shape by construction")
}
