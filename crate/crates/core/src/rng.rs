//! Counter-based seeding. Every random draw in the crate comes from a
//! generator keyed by a tuple of integers, so results never depend on which
//! worker ran which replicate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::Matrix;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a key tuple into a single 64-bit seed.
pub fn derive_seed(key: &[u64]) -> u64 {
    key.iter().fold(0x6a09_e667_f3bc_c908, |h, &k| splitmix64(h ^ splitmix64(k)))
}

/// Generator for the stream identified by `key`.
pub fn keyed_rng(key: &[u64]) -> ChaCha8Rng {
    let base = derive_seed(key);
    let mut seed = [0u8; 32];
    for (i, chunk) in seed.chunks_exact_mut(8).enumerate() {
        chunk.copy_from_slice(&splitmix64(base.wrapping_add(i as u64)).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// rows×cols matrix of independent standard normals.
pub fn standard_normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// A = ZᵀZ with Z df×dim standard normal, rescaled to unit diagonal.
pub fn rescaled_wishart<R: Rng + ?Sized>(dim: usize, df: usize, rng: &mut R) -> Matrix {
    let z = standard_normal_matrix(df, dim, rng);
    let a = z.tr_matmul(&z);
    let d = a.diag();
    Matrix::from_fn(dim, dim, |i, j| if i == j { 1.0 } else { a[(i, j)] / (d[i] * d[j]).sqrt() })
}
