//! Dense linear algebra kernels and rank statistics.

mod eigen;
mod matrix;

use alloc::vec;
use alloc::vec::Vec;

pub use eigen::{sym_eig, EigenDecomposition};
pub use matrix::{axpy, dot, kron_vec, norm2, Matrix};

use crate::error::{Error, Result};

/// Kronecker product: `out[i*b.rows + p][j*b.cols + q] = a[i][j] * b[p][q]`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = Matrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            for p in 0..br {
                for q in 0..bc {
                    out[(i * br + p, j * bc + q)] = aij * b[(p, q)];
                }
            }
        }
    }
    out
}

/// Solves `(A + λI) x = g` given the eigendecomposition of `A`:
/// `x = Q diag(1 / (λ_i + λ)) Qᵀ g`.
pub fn solve_damped(eig: &EigenDecomposition, lambda: f64, g: &[f64]) -> Result<Vec<f64>> {
    let n = eig.dim();
    if g.len() != n {
        return Err(Error::DimensionMismatch {
            context: "damped solve right-hand side",
            expected: n,
            found: g.len(),
        });
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(alloc::format!(
            "damping must be finite and non-negative, got {lambda}"
        )));
    }
    let q = &eig.eigenvectors;
    let coeffs = q.matvec_t(g)?;
    let mut x = vec![0.0; n];
    for (k, (&c, &lam)) in coeffs.iter().zip(&eig.eigenvalues).enumerate() {
        let denom = lam + lambda;
        if denom <= 0.0 {
            return Err(Error::Singular {
                index: k,
                eigenvalue: lam,
                damping: lambda,
            });
        }
        let w = c / denom;
        for i in 0..n {
            x[i] += w * q[(i, k)];
        }
    }
    Ok(x)
}

/// Average ranks (1-based), ties share the mean of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "correlation inputs",
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument(alloc::format!(
            "correlation needs at least 2 points, got {}",
            a.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ZeroVariance("correlation input"));
    }
    Ok((sab / libm::sqrt(saa * sbb)).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "spearman inputs",
            expected: a.len(),
            found: b.len(),
        });
    }
    pearson(&average_ranks(a), &average_ranks(b))
}
