//! Real symmetric variant of the HiPPO-LegS operator.

use nalgebra::DMatrix;

use super::ModelError;
use crate::tensor::Matrix;

/// The symmetric operator `S` with its orthogonal eigen-decomposition
/// `S = V diag(eigenvalues) Vᵀ`, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct HippoOperator {
    pub s: Matrix,
    pub eigenvalues: Vec<f64>,
    /// Column `k` is the eigenvector of `eigenvalues[k]`.
    pub eigenvectors: Matrix,
    /// Rank-one correction vector, `p[i] = sqrt(i + 1/2)`.
    pub p: Vec<f64>,
}

impl HippoOperator {
    /// `max |S - V Λ Vᵀ|`.
    pub fn reconstruction_error(&self) -> f64 {
        let n = self.s.rows;
        let v = &self.eigenvectors;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let r: f64 = (0..n)
                    .map(|k| v[(i, k)] * self.eigenvalues[k] * v[(j, k)])
                    .sum();
                worst = worst.max((self.s[(i, j)] - r).abs());
            }
        }
        worst
    }

    /// `max |VᵀV - I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let n = self.s.rows;
        let v = &self.eigenvectors;
        let mut worst: f64 = 0.0;
        for a in 0..n {
            for b in 0..n {
                let dot: f64 = (0..n).map(|i| v[(i, a)] * v[(i, b)]).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

/// Builds the symmetrized operator of dimension `h` and diagonalizes it.
pub fn hippo_init(h: usize) -> Result<HippoOperator, ModelError> {
    if h == 0 {
        return Err(ModelError::InvalidConfig("HiPPO dimension must be at least 1".into()));
    }
    let p: Vec<f64> = (0..h).map(|i| (i as f64 + 0.5).sqrt()).collect();
    let mut m = Matrix::zeros(h, h);
    for i in 0..h {
        for j in 0..=i {
            m[(i, j)] = (1.0 + 2.0 * i as f64).sqrt() * (1.0 + 2.0 * j as f64).sqrt();
        }
        m[(i, i)] -= i as f64;
    }
    for i in 0..h {
        for j in 0..h {
            m[(i, j)] += p[i] * p[j];
        }
    }
    // Addition commutes in IEEE arithmetic, so S is exactly symmetric.
    let mut s = Matrix::zeros(h, h);
    for i in 0..h {
        for j in 0..h {
            s[(i, j)] = (m[(i, j)] + m[(j, i)]) / 2.0;
        }
    }

    let eig = DMatrix::from_row_slice(h, h, &s.data).symmetric_eigen();
    let mut order: Vec<usize> = (0..h).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut eigenvectors = Matrix::zeros(h, h);
    for (col, &k) in order.iter().enumerate() {
        for i in 0..h {
            eigenvectors[(i, col)] = eig.eigenvectors[(i, k)];
        }
    }
    Ok(HippoOperator {
        s,
        eigenvalues,
        eigenvectors,
        p,
    })
}

/// Affinely maps sorted eigenvalues onto `[lo, hi]`; a degenerate spectrum
/// maps to the midpoint.
pub fn eigenvalues_to_rates(eigenvalues: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let (min, max) = eigenvalues
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &e| (a.min(e), b.max(e)));
    let span = max - min;
    eigenvalues
        .iter()
        .map(|&e| {
            if span > 0.0 {
                lo + (e - min) / span * (hi - lo)
            } else {
                0.5 * (lo + hi)
            }
        })
        .collect()
}
