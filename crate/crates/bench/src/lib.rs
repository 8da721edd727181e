//! Deterministic inputs shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sift_core::spectral::msign_exact;
use sift_core::Matrix;

/// `rows x cols` matrix with i.i.d. standard normal entries.
pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

/// `U · diag(σ) · Vᵀ` with random orthonormal factors and singular values
/// spaced geometrically from 1 down to `1 / kappa`.
pub fn conditioned(rows: usize, cols: usize, kappa: f64, seed: u64) -> Matrix {
    let r = rows.min(cols);
    let u = msign_exact(&gaussian(rows, r, seed)).expect("full rank draw");
    let v = msign_exact(&gaussian(cols, r, seed ^ 0x5eed)).expect("full rank draw");
    let step = if r > 1 { kappa.ln() / (r - 1) as f64 } else { 0.0 };
    let us = Matrix::from_fn(rows, r, |i, j| u.get(i, j) * (-step * j as f64).exp());
    us.matmul_transpose(&v)
}

/// Rank-`rank` matrix `A Bᵀ` with Gaussian factors.
pub fn low_rank(rows: usize, cols: usize, rank: usize, seed: u64) -> Matrix {
    gaussian(rows, rank, seed).matmul_transpose(&gaussian(cols, rank, seed.wrapping_add(1)))
}
