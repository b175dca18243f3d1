use alloc::vec::Vec;

use super::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;
const REL_TOLERANCE: f64 = 1e-12;
const SYMMETRY_TOLERANCE: f64 = 1e-10;

/// Eigenpairs of a symmetric matrix, eigenvalues sorted in descending order.
///
/// Column `j` of `eigenvectors` pairs with `eigenvalues[j]`. Each eigenvector
/// is oriented so that its first non-negligible component is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl EigenDecomposition {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `Q diag(Λ) Qᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.dim();
        let q = &self.eigenvectors;
        let mut out = Matrix::zeros(n, n);
        for (k, &lam) in self.eigenvalues.iter().enumerate() {
            for i in 0..n {
                let a = lam * q[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[(i, j)] += a * q[(j, k)];
                }
            }
        }
        out
    }

    /// The leading `k` eigenvectors as rows of a `k x n` matrix.
    pub fn top_rows(&self, k: usize) -> Matrix {
        let n = self.dim();
        let mut out = Matrix::zeros(k, n);
        for r in 0..k {
            for i in 0..n {
                out[(r, i)] = self.eigenvectors[(i, r)];
            }
        }
        out
    }

    /// Number of eigenvalues above `rel_tol * max(λ)`.
    pub fn effective_rank(&self, rel_tol: f64) -> usize {
        let top = self.eigenvalues.first().copied().unwrap_or(0.0);
        if top <= 0.0 {
            return 0;
        }
        self.eigenvalues.iter().filter(|&&l| l > rel_tol * top).count()
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Stops when the off-diagonal Frobenius norm falls below `1e-12 * ‖A‖_F`,
/// after at most 100 sweeps.
pub fn sym_eig(a: &Matrix) -> Result<EigenDecomposition> {
    let n = a.rows();
    let asym = a.asymmetry()?;
    if asym > SYMMETRY_TOLERANCE * a.max_abs().max(1.0) {
        return Err(Error::NotSymmetric { max_asymmetry: asym });
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("eigensolver input"));
    }

    let mut m = a.clone();
    // symmetrize exactly so rotations see a consistent matrix
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    let mut v = Matrix::identity(n);
    let threshold = REL_TOLERANCE * m.frobenius_norm();

    let mut sweeps = 0;
    loop {
        let off = off_diagonal_norm(&m);
        if off <= threshold {
            break;
        }
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence {
                sweeps,
                residual: off,
            });
        }
        for p in 0..n {
            for q in (p + 1)..n {
                rotate(&mut m, &mut v, p, q);
            }
        }
        sweeps += 1;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m[(y, y)].total_cmp(&m[(x, x)]));

    let eigenvalues = order.iter().map(|&k| m[(k, k)]).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let sign = orientation(&v, src);
        for i in 0..n {
            eigenvectors[(i, dst)] = sign * v[(i, src)];
        }
    }
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

fn off_diagonal_norm(m: &Matrix) -> f64 {
    let n = m.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += m[(i, j)] * m[(i, j)];
            }
        }
    }
    libm::sqrt(s)
}

/// Annihilates `m[p][q]` with the rotation `m <- Jᵀ m J` and accumulates `v <- v J`.
fn rotate(m: &mut Matrix, v: &mut Matrix, p: usize, q: usize) {
    let apq = m[(p, q)];
    if apq == 0.0 {
        return;
    }
    let n = m.rows();
    let tau = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
    let t = if tau >= 0.0 {
        1.0 / (tau + libm::sqrt(1.0 + tau * tau))
    } else {
        -1.0 / (-tau + libm::sqrt(1.0 + tau * tau))
    };
    let c = 1.0 / libm::sqrt(1.0 + t * t);
    let s = t * c;

    for k in 0..n {
        let (akp, akq) = (m[(k, p)], m[(k, q)]);
        m[(k, p)] = c * akp - s * akq;
        m[(k, q)] = s * akp + c * akq;
    }
    for k in 0..n {
        let (apk, aqk) = (m[(p, k)], m[(q, k)]);
        m[(p, k)] = c * apk - s * aqk;
        m[(q, k)] = s * apk + c * aqk;
    }
    m[(p, q)] = 0.0;
    m[(q, p)] = 0.0;
    for k in 0..n {
        let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

fn orientation(v: &Matrix, col: usize) -> f64 {
    for i in 0..v.rows() {
        let x = v[(i, col)];
        if x.abs() > 1e-10 {
            return if x > 0.0 { 1.0 } else { -1.0 };
        }
    }
    1.0
}
