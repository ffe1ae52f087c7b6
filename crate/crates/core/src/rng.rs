//! Seeded random sources. ChaCha8 keeps streams stable across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::DenseMatrix;

pub type ShareRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> ShareRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent seed for a labelled sub-stream (splitmix64 finaliser).
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for b in label.bytes().chain(index.to_le_bytes()) {
        h = h.wrapping_add(u64::from(b)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^ (h >> 31)
}

pub fn normal(rng: &mut ShareRng) -> f64 {
    StandardNormal.sample(rng)
}

/// Matrix with i.i.d. `N(0, sigma²)` entries, filled row-major.
pub fn gaussian_matrix(rng: &mut ShareRng, rows: usize, cols: usize, sigma: f64) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| sigma * normal(rng))
}

/// Random matrix with orthonormal columns (Gram–Schmidt applied twice).
pub fn random_orthonormal(rng: &mut ShareRng, rows: usize, cols: usize) -> DenseMatrix {
    assert!(cols <= rows, "cannot fit {cols} orthonormal columns in R^{rows}");
    loop {
        let g = gaussian_matrix(rng, rows, cols, 1.0);
        if let Some(q) = orthonormalize_columns(&g) {
            return q;
        }
    }
}

/// Modified Gram–Schmidt with re-orthogonalisation; `None` if the columns are
/// numerically dependent.
pub fn orthonormalize_columns(m: &DenseMatrix) -> Option<DenseMatrix> {
    let mut cols: Vec<Vec<f64>> = (0..m.cols()).map(|j| m.column(j)).collect();
    for j in 0..cols.len() {
        for _ in 0..2 {
            for i in 0..j {
                let dot: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = cols.split_at_mut(j);
                for (x, q) in tail[0].iter_mut().zip(&head[i]) {
                    *x -= dot * q;
                }
            }
        }
        let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return None;
        }
        cols[j].iter_mut().for_each(|v| *v /= norm);
    }
    DenseMatrix::from_columns(&cols).ok()
}
