//! Seedable, splittable random streams.
//!
//! A [`SeedStream`] names a root seed; every consumer derives its own
//! ChaCha stream from a string label, so adding a new consumer never shifts
//! the draws of existing ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::matrix::Matrix;

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for `label`.
    pub fn rng(&self, label: &str) -> StreamRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a(label.as_bytes()));
        rng
    }

    /// Generator for `label` further keyed by an integer (epoch, step, ...).
    pub fn rng_at(&self, label: &str, index: u64) -> StreamRng {
        self.child(label).rng(&index.to_string())
    }

    /// A derived stream; `child(a).child(b)` is stable under insertion of
    /// unrelated labels.
    pub fn child(&self, label: &str) -> SeedStream {
        let mut bytes = self.seed.to_le_bytes().to_vec();
        bytes.extend_from_slice(label.as_bytes());
        SeedStream {
            seed: fnv1a(&bytes),
        }
    }
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| std * normal(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized buffer")
}

pub fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized buffer")
}

/// Uniformly random orthogonal matrix (QR of a Gaussian via Gram-Schmidt).
pub fn random_orthogonal(rng: &mut impl Rng, n: usize) -> Matrix {
    let g = gaussian_matrix(rng, n, n, 1.0);
    let mut q = Matrix::zeros(n, n);
    for c in 0..n {
        let mut v = g.column(c);
        for _ in 0..2 {
            for p in 0..c {
                let qp = q.column(p);
                let d: f64 = qp.iter().zip(&v).map(|(a, b)| a * b).sum();
                for i in 0..n {
                    v[i] -= d * qp[i];
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let v: Vec<f64> = v.iter().map(|x| x / norm).collect();
        q.set_column(c, &v);
    }
    q
}
