#![allow(dead_code)]

use ibpd::hilbert::BlockLayout;
use ibpd::{BlockVector, LinearBlockOperator};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn layout(d: &[usize]) -> BlockLayout {
    BlockLayout::new(d.to_vec()).unwrap()
}

pub fn blocked(rows: &BlockLayout, cols: &BlockLayout, m: &DMatrix<f64>) -> LinearBlockOperator {
    LinearBlockOperator::from_dense(rows.clone(), cols.clone(), m).unwrap()
}

pub fn dvec(v: &BlockVector) -> DVector<f64> {
    DVector::from_column_slice(v.data())
}

pub fn soft(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Largest singular value by a dense SVD.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}
