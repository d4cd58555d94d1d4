#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sercloud::serialize::PointCloud;
use sercloud::tensor::{FeatureMatrix, Matrix};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform cloud in the unit cube with `c` random features, split into
/// `batches` contiguous batches.
pub fn uniform_cloud(n: usize, c: usize, batches: usize, seed: u64) -> PointCloud {
    let mut r = rng(seed);
    let positions = (0..n).map(|_| r.gen::<[f64; 3]>()).collect();
    let feats = (0..n * c).map(|_| r.gen_range(-1.0..1.0)).collect();
    let batch = (0..n).map(|i| (i * batches / n) as u16).collect();
    PointCloud::new(positions, FeatureMatrix::from_vec(n, c, feats).unwrap(), batch).unwrap()
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, r: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.gen_range(-scale..scale)).collect()).unwrap()
}

/// Z-order key by the textbook bit loop: bit 3j is x_j, 3j+1 is y_j,
/// 3j+2 is z_j.
pub fn morton_naive(x: u32, y: u32, z: u32, bits: u32) -> u64 {
    let mut key = 0u64;
    for j in 0..bits {
        key |= (((x >> j) & 1) as u64) << (3 * j);
        key |= (((y >> j) & 1) as u64) << (3 * j + 1);
        key |= (((z >> j) & 1) as u64) << (3 * j + 2);
    }
    key
}

pub fn max_rel_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()));
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}
