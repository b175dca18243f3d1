//! Curvature statistics: Kronecker factors, EKFAC eigenvalue correction and
//! the projected empirical Fisher with its damping.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{capture, LayerTrace, Model, Sample};
use crate::numerics::{sym_eig, EigenDecomposition, Matrix};

/// Smallest damping ever returned by [`damping_from`].
pub const DAMPING_FLOOR: f64 = 1e-12;

/// Running sums of `x xᵀ` and `𝒟x 𝒟xᵀ` over every token seen for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceAccumulator {
    layer_name: String,
    sum_fwd: Matrix,
    sum_bwd: Matrix,
    tokens: u64,
}

impl CovarianceAccumulator {
    pub fn new(layer_name: impl Into<String>, n_in: usize, n_out: usize) -> Self {
        Self {
            layer_name: layer_name.into(),
            sum_fwd: Matrix::zeros(n_in, n_in),
            sum_bwd: Matrix::zeros(n_out, n_out),
            tokens: 0,
        }
    }

    pub fn layer_name(&self) -> &str {
        &self.layer_name
    }

    pub fn token_count(&self) -> u64 {
        self.tokens
    }

    pub fn accumulate(&mut self, trace: &LayerTrace) -> Result<()> {
        if trace.layer_name != self.layer_name {
            return Err(Error::UnknownLayer(trace.layer_name.clone()));
        }
        if !trace.has_backward() {
            return Err(Error::MissingTraces("backward output-gradients"));
        }
        for (x, d) in trace.fwd_inputs.iter().zip(&trace.bwd_outgrads) {
            if x.cols() != self.sum_fwd.rows() || d.cols() != self.sum_bwd.rows() {
                return Err(Error::DimensionMismatch {
                    context: "covariance accumulation",
                    expected: self.sum_fwd.rows(),
                    found: x.cols(),
                });
            }
            for t in 0..x.rows() {
                self.sum_fwd.add_outer(x.row(t), x.row(t));
                self.sum_bwd.add_outer(d.row(t), d.row(t));
            }
            self.tokens += x.rows() as u64;
        }
        Ok(())
    }

    /// Folds in statistics gathered on a disjoint shard.
    pub fn merge(&mut self, other: &CovarianceAccumulator) -> Result<()> {
        if other.layer_name != self.layer_name {
            return Err(Error::UnknownLayer(other.layer_name.clone()));
        }
        if other.sum_fwd.shape() != self.sum_fwd.shape() || other.sum_bwd.shape() != self.sum_bwd.shape() {
            return Err(Error::DimensionMismatch {
                context: "covariance merge",
                expected: self.sum_fwd.rows(),
                found: other.sum_fwd.rows(),
            });
        }
        self.sum_fwd.add_scaled(1.0, &other.sum_fwd);
        self.sum_bwd.add_scaled(1.0, &other.sum_bwd);
        self.tokens += other.tokens;
        Ok(())
    }

    /// Normalized covariances with their eigendecompositions.
    pub fn factors(&self) -> Result<KroneckerFactors> {
        if self.tokens == 0 {
            return Err(Error::InvalidArgument(format!(
                "layer {}: no tokens accumulated",
                self.layer_name
            )));
        }
        let inv = 1.0 / self.tokens as f64;
        KroneckerFactors::new(
            self.layer_name.clone(),
            self.sum_fwd.scale(inv),
            self.sum_bwd.scale(inv),
            self.tokens,
        )
    }
}

/// `H_layer ≈ C_F ⊗ C_B` with both factors eigendecomposed.
#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerFactors {
    pub layer_name: String,
    /// Uncentered forward covariance, `n_in x n_in`.
    pub c_fwd: Matrix,
    /// Uncentered backward covariance, `n_out x n_out`.
    pub c_bwd: Matrix,
    pub eig_fwd: EigenDecomposition,
    pub eig_bwd: EigenDecomposition,
    pub token_count: u64,
}

impl KroneckerFactors {
    pub fn new(layer_name: String, c_fwd: Matrix, c_bwd: Matrix, token_count: u64) -> Result<Self> {
        let eig_fwd = sym_eig(&c_fwd)?;
        let eig_bwd = sym_eig(&c_bwd)?;
        Ok(Self {
            layer_name,
            c_fwd,
            c_bwd,
            eig_fwd,
            eig_bwd,
            token_count,
        })
    }

    pub fn n_in(&self) -> usize {
        self.c_fwd.rows()
    }

    pub fn n_out(&self) -> usize {
        self.c_bwd.rows()
    }
}

/// One pass of [`capture`] over `dataset` in chunks, accumulating every layer.
pub fn fit_kronecker_factors(model: &Model, dataset: &[Sample], batch_size: usize) -> Result<Vec<KroneckerFactors>> {
    let mut accs: Vec<CovarianceAccumulator> = model
        .layers()
        .iter()
        .map(|l| CovarianceAccumulator::new(l.name.clone(), l.n_in(), l.n_out()))
        .collect();
    for chunk in dataset.chunks(batch_size.max(1)) {
        let (pass, _) = capture(model, chunk)?;
        for (acc, trace) in accs.iter_mut().zip(&pass.traces) {
            acc.accumulate(trace)?;
        }
    }
    accs.iter().map(CovarianceAccumulator::factors).collect()
}

/// All products `λ_F · λ_B`, descending: the spectrum of `C_F ⊗ C_B`.
pub fn kfac_eigenvalues(factors: &KroneckerFactors) -> Vec<f64> {
    let mut out: Vec<f64> = factors
        .eig_fwd
        .eigenvalues
        .iter()
        .flat_map(|&f| factors.eig_bwd.eigenvalues.iter().map(move |&b| f * b))
        .collect();
    out.sort_by(|a, b| b.total_cmp(a));
    out
}

/// `0.1 × mean(eigenvalues)`, floored at [`DAMPING_FLOOR`].
pub fn damping_from(eig: &EigenDecomposition) -> f64 {
    damping_from_values(&eig.eigenvalues)
}

pub fn damping_from_values(eigenvalues: &[f64]) -> f64 {
    if eigenvalues.is_empty() {
        return DAMPING_FLOOR;
    }
    let mean = eigenvalues.iter().sum::<f64>() / eigenvalues.len() as f64;
    (0.1 * mean).max(DAMPING_FLOOR)
}

/// Per-layer second moments of gradients expressed in the KFAC eigenbasis.
#[derive(Debug, Clone, PartialEq)]
pub struct EkfacEigenvalues {
    pub layer_name: String,
    /// `n_out x n_in`; entry `[j][k]` pairs `Q_B[:, j]` with `Q_F[:, k]`.
    pub corrected: Matrix,
    pub sample_count: usize,
}

impl EkfacEigenvalues {
    pub fn damping(&self) -> f64 {
        damping_from_values(self.corrected.as_slice())
    }
}

/// `corrected[j][k] = mean_n ((Q_Bᵀ 𝒟W_n Q_F)[j][k])²`.
pub fn ekfac_correct(factors: &KroneckerFactors, grads: &[Matrix]) -> Result<EkfacEigenvalues> {
    let (n_out, n_in) = (factors.n_out(), factors.n_in());
    if factors.eig_fwd.dim() != n_in || factors.eig_bwd.dim() != n_out {
        return Err(Error::MissingEigen(factors.layer_name.clone()));
    }
    let qf = &factors.eig_fwd.eigenvectors;
    let qbt = factors.eig_bwd.eigenvectors.transpose();
    let mut corrected = Matrix::zeros(n_out, n_in);
    for g in grads {
        if g.shape() != (n_out, n_in) {
            return Err(Error::DimensionMismatch {
                context: "EKFAC gradient shape",
                expected: n_out * n_in,
                found: g.as_slice().len(),
            });
        }
        let rotated = qbt.matmul(g)?.matmul(qf)?;
        for (c, r) in corrected.as_mut_slice().iter_mut().zip(rotated.as_slice()) {
            *c += r * r;
        }
    }
    if !grads.is_empty() {
        corrected = corrected.scale(1.0 / grads.len() as f64);
    }
    Ok(EkfacEigenvalues {
        layer_name: factors.layer_name.clone(),
        corrected,
        sample_count: grads.len(),
    })
}

/// How the damping of each Hessian block is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Damping {
    /// `factor × mean(eigenvalues)` of each block.
    MeanEigenvalue(f64),
    Fixed(f64),
}

impl Default for Damping {
    fn default() -> Self {
        Damping::MeanEigenvalue(0.1)
    }
}

impl Damping {
    fn resolve(self, eig: &EigenDecomposition) -> Result<f64> {
        match self {
            Damping::MeanEigenvalue(f) if f >= 0.0 && f.is_finite() => {
                let n = eig.dim().max(1) as f64;
                Ok((f * (eig.eigenvalues.iter().sum::<f64>() / n)).max(DAMPING_FLOOR))
            }
            Damping::Fixed(l) if l >= 0.0 && l.is_finite() => Ok(l),
            other => Err(Error::InvalidArgument(format!("invalid damping policy {other:?}"))),
        }
    }
}

/// Partition of a projected gradient into named, contiguous per-layer blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    pub blocks: Vec<(String, usize)>,
}

impl BlockLayout {
    pub fn new(blocks: Vec<(String, usize)>) -> Self {
        Self { blocks }
    }

    pub fn total_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.1).sum()
    }

    /// A single block named `global` spanning everything.
    pub fn dense(&self) -> Self {
        Self {
            blocks: alloc::vec![("global".to_string(), self.total_dim())],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HessianBlock {
    pub layer_name: String,
    pub offset: usize,
    /// `(1/N) Σ (Pg)(Pg)ᵀ` restricted to this block.
    pub h: Matrix,
    pub eig: EigenDecomposition,
    pub damping: f64,
}

impl HessianBlock {
    pub fn dim(&self) -> usize {
        self.h.rows()
    }
}

/// Block-diagonal projected empirical Fisher.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedHessian {
    pub blocks: Vec<HessianBlock>,
    pub sample_count: u64,
}

impl ProjectedHessian {
    pub fn dim(&self) -> usize {
        self.blocks.iter().map(HessianBlock::dim).sum()
    }

    pub fn layout(&self) -> BlockLayout {
        BlockLayout::new(self.blocks.iter().map(|b| (b.layer_name.clone(), b.dim())).collect())
    }

    /// Dense `k x k` matrix with the blocks on the diagonal.
    pub fn to_dense(&self) -> Matrix {
        let k = self.dim();
        let mut out = Matrix::zeros(k, k);
        for b in &self.blocks {
            for i in 0..b.dim() {
                for j in 0..b.dim() {
                    out[(b.offset + i, b.offset + j)] = b.h[(i, j)];
                }
            }
        }
        out
    }

    pub fn set_damping(&mut self, damping: Damping) -> Result<()> {
        for b in &mut self.blocks {
            b.damping = damping.resolve(&b.eig)?;
        }
        Ok(())
    }

    /// Rebuilds from stored blocks (eigendecompositions are recomputed).
    pub fn from_blocks(blocks: Vec<(String, Matrix, f64)>, sample_count: u64) -> Result<Self> {
        let mut offset = 0;
        let mut out = Vec::with_capacity(blocks.len());
        for (name, h, damping) in blocks {
            let eig = sym_eig(&h)?;
            let dim = h.rows();
            out.push(HessianBlock {
                layer_name: name,
                offset,
                h,
                eig,
                damping,
            });
            offset += dim;
        }
        Ok(Self {
            blocks: out,
            sample_count,
        })
    }
}

/// Streaming `Σ (Pg)(Pg)ᵀ` per block.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianAccumulator {
    layout: BlockLayout,
    sums: Vec<Matrix>,
    count: u64,
}

impl HessianAccumulator {
    pub fn new(layout: BlockLayout) -> Self {
        let sums = layout.blocks.iter().map(|(_, d)| Matrix::zeros(*d, *d)).collect();
        Self {
            layout,
            sums,
            count: 0,
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn add(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.layout.total_dim() {
            return Err(Error::DimensionMismatch {
                context: "projected gradient length",
                expected: self.layout.total_dim(),
                found: g.len(),
            });
        }
        let mut offset = 0;
        for ((_, d), sum) in self.layout.blocks.iter().zip(&mut self.sums) {
            let block = &g[offset..offset + d];
            sum.add_outer(block, block);
            offset += d;
        }
        self.count += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &HessianAccumulator) -> Result<()> {
        if other.layout != self.layout {
            return Err(Error::InvalidArgument("hessian block layouts differ".to_string()));
        }
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            a.add_scaled(1.0, b);
        }
        self.count += other.count;
        Ok(())
    }

    pub fn finish(&self, damping: Damping) -> Result<ProjectedHessian> {
        if self.count == 0 {
            return Err(Error::InvalidArgument(
                "projected hessian needs at least one gradient".to_string(),
            ));
        }
        let inv = 1.0 / self.count as f64;
        let mut offset = 0;
        let mut blocks = Vec::with_capacity(self.sums.len());
        for ((name, d), sum) in self.layout.blocks.iter().zip(&self.sums) {
            let h = sum.scale(inv);
            let eig = sym_eig(&h)?;
            let lambda = damping.resolve(&eig)?;
            blocks.push(HessianBlock {
                layer_name: name.clone(),
                offset,
                h,
                eig,
                damping: lambda,
            });
            offset += d;
        }
        Ok(ProjectedHessian {
            blocks,
            sample_count: self.count,
        })
    }
}

/// `H = (1/N) Σ_n g_n g_nᵀ`, block-diagonal under `layout`.
pub fn fit_projected_hessian<'a, I>(grads: I, layout: &BlockLayout, damping: Damping) -> Result<ProjectedHessian>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut acc = HessianAccumulator::new(layout.clone());
    for g in grads {
        acc.add(g)?;
    }
    acc.finish(damping)
}

#[cfg(test)]
mod tests;
