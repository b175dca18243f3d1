//! Influence scoring in the projected space.
//!
//! The iHVP is applied once per test gradient; train gradients are then only
//! dotted against it, which is what makes scanning a stored gradient file
//! cheap.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{dot, solve_damped, Matrix};
use crate::stats::{EkfacEigenvalues, KroneckerFactors, ProjectedHessian};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScoreMode {
    /// `g_teᵀ g_tr`, ignoring curvature.
    Dot,
    /// `g_teᵀ (H + λI)⁻¹ g_tr`.
    Influence,
    /// Influence divided by `√self-influence` of the train example.
    LRelatif,
    /// Influence divided by both self-influences.
    Cosine,
}

impl ScoreMode {
    pub fn name(self) -> &'static str {
        match self {
            ScoreMode::Dot => "dot",
            ScoreMode::Influence => "influence",
            ScoreMode::LRelatif => "l_relatif",
            ScoreMode::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "dot" => ScoreMode::Dot,
            "influence" => ScoreMode::Influence,
            "l_relatif" => ScoreMode::LRelatif,
            "cosine" => ScoreMode::Cosine,
            _ => return None,
        })
    }
}

/// `(H + λI)⁻¹ g`, solved block by block in each block's eigenbasis.
pub fn ihvp(h: &ProjectedHessian, g: &[f64]) -> Result<Vec<f64>> {
    if g.len() != h.dim() {
        return Err(Error::DimensionMismatch {
            context: "ihvp vector",
            expected: h.dim(),
            found: g.len(),
        });
    }
    let mut out = Vec::with_capacity(g.len());
    for b in &h.blocks {
        out.extend(solve_damped(&b.eig, b.damping, &g[b.offset..b.offset + b.dim()])?);
    }
    Ok(out)
}

/// `g` preconditioned by `h`, or `g` itself when there is no Hessian.
fn precondition(h: Option<&ProjectedHessian>, g: &[f64]) -> Result<Vec<f64>> {
    match h {
        Some(h) => ihvp(h, g),
        None => Ok(g.to_vec()),
    }
}

/// `gᵀ (H + λI)⁻¹ g`.
pub fn self_influence(g: &[f64], h: Option<&ProjectedHessian>) -> Result<f64> {
    Ok(dot(g, &precondition(h, g)?))
}

/// The soft spectral weight `λ_i / (λ_i + λ)` a damped inverse gives to eigen-direction `i`.
pub fn damping_shrinkage(eigenvalue: f64, damping: f64) -> f64 {
    eigenvalue / (eigenvalue + damping)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub test_ids: Vec<u64>,
    pub train_ids: Vec<u64>,
    /// `tests x trains`
    pub scores: Matrix,
    pub mode: ScoreMode,
}

/// Query-side state: preconditioned test gradients and their self-influences.
#[derive(Debug, Clone)]
pub struct QueryEngine<'h> {
    hessian: Option<&'h ProjectedHessian>,
    mode: ScoreMode,
    test_ids: Vec<u64>,
    test_ihvp: Vec<Vec<f64>>,
    test_norm: Vec<f64>,
}

impl<'h> QueryEngine<'h> {
    /// `hessian = None` scores with `H = I, λ = 0`; [`ScoreMode::Dot`] always does.
    pub fn new(
        hessian: Option<&'h ProjectedHessian>,
        mode: ScoreMode,
        test_ids: &[u64],
        test_grads: &Matrix,
    ) -> Result<Self> {
        if test_ids.len() != test_grads.rows() {
            return Err(Error::DimensionMismatch {
                context: "test ids vs gradients",
                expected: test_grads.rows(),
                found: test_ids.len(),
            });
        }
        let hessian = if mode == ScoreMode::Dot { None } else { hessian };
        if let Some(h) = hessian {
            if h.dim() != test_grads.cols() {
                return Err(Error::DimensionMismatch {
                    context: "test gradient dimension",
                    expected: h.dim(),
                    found: test_grads.cols(),
                });
            }
        }
        let mut test_ihvp = Vec::with_capacity(test_ids.len());
        let mut test_norm = Vec::with_capacity(test_ids.len());
        for (i, &id) in test_ids.iter().enumerate() {
            let g = test_grads.row(i);
            let pg = precondition(hessian, g)?;
            if mode == ScoreMode::Cosine {
                let s = dot(g, &pg);
                if !(s > 0.0) {
                    return Err(Error::ZeroSelfInfluence { id });
                }
                test_norm.push(libm::sqrt(s));
            } else {
                test_norm.push(1.0);
            }
            test_ihvp.push(pg);
        }
        Ok(Self {
            hessian,
            mode,
            test_ids: test_ids.to_vec(),
            test_ihvp,
            test_norm,
        })
    }

    pub fn mode(&self) -> ScoreMode {
        self.mode
    }

    pub fn test_ids(&self) -> &[u64] {
        &self.test_ids
    }

    pub fn dim(&self) -> Option<usize> {
        self.test_ihvp.first().map(Vec::len)
    }

    /// Scores of every test against a batch of train gradients (`tests x batch`).
    pub fn score_batch(&self, train_ids: &[u64], train_grads: &Matrix) -> Result<Matrix> {
        if train_ids.len() != train_grads.rows() {
            return Err(Error::DimensionMismatch {
                context: "train ids vs gradients",
                expected: train_grads.rows(),
                found: train_ids.len(),
            });
        }
        if let Some(d) = self.dim() {
            if train_grads.cols() != d {
                return Err(Error::DimensionMismatch {
                    context: "train gradient dimension",
                    expected: d,
                    found: train_grads.cols(),
                });
            }
        }
        let normalize_train = matches!(self.mode, ScoreMode::LRelatif | ScoreMode::Cosine);
        let mut train_norm = Vec::with_capacity(train_ids.len());
        for (j, &id) in train_ids.iter().enumerate() {
            if normalize_train {
                let g = train_grads.row(j);
                let s = dot(g, &precondition(self.hessian, g)?);
                if !(s > 0.0) {
                    return Err(Error::ZeroSelfInfluence { id });
                }
                train_norm.push(libm::sqrt(s));
            } else {
                train_norm.push(1.0);
            }
        }
        let mut out = Matrix::zeros(self.test_ihvp.len(), train_ids.len());
        for (a, (pg, tn)) in self.test_ihvp.iter().zip(&self.test_norm).enumerate() {
            let row = out.row_mut(a);
            for (b, (v, rn)) in row.iter_mut().zip(&train_norm).enumerate() {
                *v = dot(pg, train_grads.row(b)) / (tn * rn);
            }
        }
        Ok(out)
    }
}

impl ScoreMatrix {
    /// Joins column blocks produced by [`QueryEngine::score_batch`], in order.
    pub fn from_batches(
        test_ids: Vec<u64>,
        mode: ScoreMode,
        batches: Vec<(Vec<u64>, Matrix)>,
    ) -> Result<Self> {
        let total: usize = batches.iter().map(|b| b.0.len()).sum();
        let mut scores = Matrix::zeros(test_ids.len(), total);
        let mut train_ids = Vec::with_capacity(total);
        let mut col = 0;
        for (ids, block) in batches {
            if block.shape() != (test_ids.len(), ids.len()) {
                return Err(Error::DimensionMismatch {
                    context: "score batch shape",
                    expected: test_ids.len() * ids.len(),
                    found: block.as_slice().len(),
                });
            }
            for a in 0..test_ids.len() {
                scores.row_mut(a)[col..col + ids.len()].copy_from_slice(block.row(a));
            }
            col += ids.len();
            train_ids.extend(ids);
        }
        Ok(Self {
            test_ids,
            train_ids,
            scores,
            mode,
        })
    }
}

/// Scores every (test, train) pair in memory.
pub fn score(
    test_ids: &[u64],
    test_grads: &Matrix,
    train_ids: &[u64],
    train_grads: &Matrix,
    hessian: Option<&ProjectedHessian>,
    mode: ScoreMode,
) -> Result<ScoreMatrix> {
    let engine = QueryEngine::new(hessian, mode, test_ids, test_grads)?;
    let block = engine.score_batch(train_ids, train_grads)?;
    ScoreMatrix::from_batches(test_ids.to_vec(), mode, alloc::vec![(train_ids.to_vec(), block)])
}

/// Per test row, the `k` best `(train_id, score)` pairs: descending score,
/// ties broken by ascending id.
pub fn topk(scores: &ScoreMatrix, k: usize) -> Result<Vec<Vec<(u64, f64)>>> {
    let n = scores.train_ids.len();
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "top-{k} requested but only {n} train examples are scored"
        )));
    }
    Ok((0..scores.test_ids.len())
        .map(|a| {
            let row = scores.scores.row(a);
            let mut idx: Vec<usize> = (0..n).collect();
            let cmp = |&x: &usize, &y: &usize| {
                row[y]
                    .total_cmp(&row[x])
                    .then(scores.train_ids[x].cmp(&scores.train_ids[y]))
            };
            if k < n && k > 0 {
                idx.select_nth_unstable_by(k - 1, cmp);
                idx.truncate(k);
            }
            idx.sort_by(cmp);
            idx.truncate(k);
            idx.into_iter().map(|i| (scores.train_ids[i], row[i])).collect()
        })
        .collect())
}

/// Layerwise EKFAC inverse: `Q_B [(Q_Bᵀ G Q_F) ⊘ (corrected + λ)] Q_Fᵀ`,
/// with `λ = 0.1 × mean(corrected)`.
pub fn ekfac_ihvp(factors: &KroneckerFactors, eigen: &EkfacEigenvalues, grad: &Matrix) -> Result<Matrix> {
    if eigen.corrected.shape() != grad.shape() || grad.shape() != (factors.n_out(), factors.n_in()) {
        return Err(Error::DimensionMismatch {
            context: "EKFAC gradient shape",
            expected: factors.n_out() * factors.n_in(),
            found: grad.as_slice().len(),
        });
    }
    let qf = &factors.eig_fwd.eigenvectors;
    let qb = &factors.eig_bwd.eigenvectors;
    let lambda = eigen.damping();
    let mut rotated = qb.transpose().matmul(grad)?.matmul(qf)?;
    for (r, c) in rotated.as_mut_slice().iter_mut().zip(eigen.corrected.as_slice()) {
        *r /= c + lambda;
    }
    qb.matmul(&rotated)?.matmul(&qf.transpose())
}

#[cfg(test)]
mod tests;
