//! Kronecker-factored gradient projection.
//!
//! A layer's per-sample gradient is `vec(𝒟W) = Σ_t x_t ⊗ 𝒟x_t` (column-major
//! `vec`). Projecting with `P = P_i ⊗ P_o` therefore never needs the raw
//! gradient: `P vec(𝒟W) = Σ_t (P_i x_t) ⊗ (P_o 𝒟x_t)`. Only the two small
//! factors are stored, `k_i·n_i + k_o·n_o` numbers instead of `k_i·k_o·n_i·n_o`.

mod bottleneck;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{capture, ForwardPass, LayerTrace, Model, Sample};
use crate::numerics::{dot, kron, Matrix};
use crate::stats::{BlockLayout, KroneckerFactors};

pub use bottleneck::{attach_bottleneck, Adapter, BottleneckModel};

/// Gram-matrix tolerance for "orthonormal rows".
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-10;
/// Eigenvalues below `EFFECTIVE_RANK_TOLERANCE * λ_max` do not count toward rank.
pub const EFFECTIVE_RANK_TOLERANCE: f64 = 1e-10;
const MAX_REDRAWS: usize = 3;
/// Default element cap for [`naive_project_oracle`].
pub const NAIVE_ELEMENT_CAP: usize = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Random,
    Pca,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPair {
    pub layer_name: String,
    /// `k_i x n_i`, applied to forward activations.
    pub p_in: Matrix,
    /// `k_o x n_o`, applied to backward activations.
    pub p_out: Matrix,
    pub init: InitKind,
}

impl ProjectionPair {
    /// Checks shapes and row orthonormality.
    pub fn new(layer_name: impl Into<String>, p_in: Matrix, p_out: Matrix, init: InitKind) -> Result<Self> {
        let layer_name = layer_name.into();
        for (m, what) in [(&p_in, "input projection"), (&p_out, "output projection")] {
            if m.rows() > m.cols() || m.rows() == 0 {
                return Err(Error::InvalidArgument(format!(
                    "layer {layer_name}: {what} is {}x{}, need 1 <= k <= n",
                    m.rows(),
                    m.cols()
                )));
            }
            let err = gram_error(m);
            if err > ORTHONORMAL_TOLERANCE {
                return Err(Error::InvalidArgument(format!(
                    "layer {layer_name}: {what} rows not orthonormal (Gram error {err:e})"
                )));
            }
        }
        Ok(Self {
            layer_name,
            p_in,
            p_out,
            init,
        })
    }

    pub fn k_in(&self) -> usize {
        self.p_in.rows()
    }

    pub fn k_out(&self) -> usize {
        self.p_out.rows()
    }

    pub fn n_in(&self) -> usize {
        self.p_in.cols()
    }

    pub fn n_out(&self) -> usize {
        self.p_out.cols()
    }

    /// Projected dimension `k = k_i · k_o`.
    pub fn dim(&self) -> usize {
        self.k_in() * self.k_out()
    }

    /// Numbers held by the factored projection: `k_i·n_i + k_o·n_o`.
    pub fn stored_elements(&self) -> usize {
        self.k_in() * self.n_in() + self.k_out() * self.n_out()
    }

    /// Numbers a dense `k x n` projection would need.
    pub fn dense_elements(&self) -> usize {
        self.dim() * self.n_in() * self.n_out()
    }

    /// `Σ_t (P_i x_t) ⊗ (P_o d_t)` for token rows of `inputs` (`T x n_i`) and
    /// `outgrads` (`T x n_o`).
    pub fn project(&self, inputs: &Matrix, outgrads: &Matrix) -> Result<Vec<f64>> {
        if inputs.cols() != self.n_in() {
            return Err(Error::DimensionMismatch {
                context: "projection input width",
                expected: self.n_in(),
                found: inputs.cols(),
            });
        }
        if outgrads.cols() != self.n_out() {
            return Err(Error::DimensionMismatch {
                context: "projection output width",
                expected: self.n_out(),
                found: outgrads.cols(),
            });
        }
        if inputs.rows() != outgrads.rows() {
            return Err(Error::DimensionMismatch {
                context: "token count",
                expected: inputs.rows(),
                found: outgrads.rows(),
            });
        }
        let (ki, ko) = (self.k_in(), self.k_out());
        let mut out = vec![0.0; ki * ko];
        for t in 0..inputs.rows() {
            let a = self.p_in.matvec(inputs.row(t))?;
            let b = self.p_out.matvec(outgrads.row(t))?;
            for (i, &ai) in a.iter().enumerate() {
                let dst = &mut out[i * ko..(i + 1) * ko];
                for (o, &bp) in dst.iter_mut().zip(&b) {
                    *o += ai * bp;
                }
            }
        }
        Ok(out)
    }
}

/// Projected gradient of sample `sample` from a captured layer trace.
pub fn project_per_sample(trace: &LayerTrace, sample: usize, pair: &ProjectionPair) -> Result<Vec<f64>> {
    if !trace.has_backward() {
        return Err(Error::MissingTraces("backward output-gradients"));
    }
    if sample >= trace.sample_count() {
        return Err(Error::InvalidArgument(format!(
            "sample {sample} out of range for trace of {} samples",
            trace.sample_count()
        )));
    }
    pair.project(&trace.fwd_inputs[sample], &trace.bwd_outgrads[sample])
}

/// Reference path: materializes `P_i ⊗ P_o` and multiplies it with the
/// column-major `vec` of a raw `n_o x n_i` gradient.
pub fn naive_project_oracle(grad: &Matrix, pair: &ProjectionPair, max_elements: usize) -> Result<Vec<f64>> {
    if grad.shape() != (pair.n_out(), pair.n_in()) {
        return Err(Error::DimensionMismatch {
            context: "raw gradient shape",
            expected: pair.n_out() * pair.n_in(),
            found: grad.as_slice().len(),
        });
    }
    if pair.dense_elements() > max_elements {
        return Err(Error::InvalidArgument(format!(
            "dense projection needs {} elements, cap is {max_elements}",
            pair.dense_elements()
        )));
    }
    let p = kron(&pair.p_in, &pair.p_out);
    p.matvec(&grad.vec_col_major())
}

/// Projection pairs for a set of watched layers, concatenated in order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    pairs: Vec<ProjectionPair>,
}

impl ProjectionSet {
    pub fn new(pairs: Vec<ProjectionPair>) -> Result<Self> {
        for (i, p) in pairs.iter().enumerate() {
            if pairs[..i].iter().any(|q| q.layer_name == p.layer_name) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate projection for layer {}",
                    p.layer_name
                )));
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[ProjectionPair] {
        &self.pairs
    }

    pub fn pair(&self, layer: &str) -> Option<&ProjectionPair> {
        self.pairs.iter().find(|p| p.layer_name == layer)
    }

    pub fn total_dim(&self) -> usize {
        self.pairs.iter().map(ProjectionPair::dim).sum()
    }

    pub fn layout(&self) -> BlockLayout {
        BlockLayout::new(self.pairs.iter().map(|p| (p.layer_name.clone(), p.dim())).collect())
    }

    /// Every pair names a layer of `model` with matching widths.
    pub fn check_model(&self, model: &Model) -> Result<()> {
        for p in &self.pairs {
            let layer = model
                .layer(&p.layer_name)
                .ok_or_else(|| Error::UnknownLayer(p.layer_name.clone()))?;
            if layer.n_in() != p.n_in() || layer.n_out() != p.n_out() {
                return Err(Error::DimensionMismatch {
                    context: "projection vs layer shape",
                    expected: layer.n_in() * layer.n_out(),
                    found: p.n_in() * p.n_out(),
                });
            }
        }
        Ok(())
    }

    /// Concatenated projected gradient of every sample in a captured pass.
    pub fn project_pass(&self, pass: &ForwardPass) -> Result<Vec<Vec<f64>>> {
        let n = pass.outputs.len();
        let mut out: Vec<Vec<f64>> = (0..n).map(|_| Vec::with_capacity(self.total_dim())).collect();
        for pair in &self.pairs {
            let trace = pass
                .traces
                .iter()
                .find(|t| t.layer_name == pair.layer_name)
                .ok_or_else(|| Error::UnknownLayer(pair.layer_name.clone()))?;
            for (s, dst) in out.iter_mut().enumerate() {
                dst.extend(project_per_sample(trace, s, pair)?);
            }
        }
        Ok(out)
    }
}

/// Projected per-sample gradients of a whole dataset, in dataset order.
pub fn project_dataset(
    model: &Model,
    data: &[Sample],
    set: &ProjectionSet,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    set.check_model(model)?;
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let (pass, _) = capture(model, chunk)?;
        out.extend(set.project_pass(&pass)?);
    }
    Ok(out)
}

fn gram_error(m: &Matrix) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.rows() {
        for j in i..m.rows() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot(m.row(i), m.row(j)) - target).abs());
        }
    }
    worst
}

/// Modified Gram–Schmidt on the rows, run twice. `None` if a row collapses.
fn orthonormalize_rows(m: &mut Matrix) -> Option<()> {
    for _ in 0..2 {
        for i in 0..m.rows() {
            let original = crate::numerics::norm2(m.row(i));
            for j in 0..i {
                let proj = dot(m.row(i), m.row(j));
                let rj = m.row(j).to_vec();
                crate::numerics::axpy(-proj, &rj, m.row_mut(i));
            }
            let norm = crate::numerics::norm2(m.row(i));
            if !(norm > 1e-10 * original) || norm == 0.0 {
                return None;
            }
            m.row_mut(i).iter_mut().for_each(|v| *v /= norm);
        }
    }
    Some(())
}

fn random_orthonormal(k: usize, n: usize, rng: &mut ChaCha8Rng, layer: &str) -> Result<Matrix> {
    for _ in 0..=MAX_REDRAWS {
        let data = (0..k * n).map(|_| rng.sample(StandardNormal)).collect();
        let mut m = Matrix::new(k, n, data)?;
        if orthonormalize_rows(&mut m).is_some() {
            return Ok(m);
        }
    }
    Err(Error::RankDeficient {
        layer: layer.into(),
        requested: k,
        effective_rank: 0,
    })
}

fn check_dims(layer: &str, k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "layer {layer}: projection dimension {k} must be in 1..={n}"
        )));
    }
    Ok(())
}

/// Gaussian factors with orthonormalized rows, the same `(k_i, k_o)` on every layer.
pub fn init_random(model: &Model, k_in: usize, k_out: usize, seed: u64) -> Result<ProjectionSet> {
    let dims = vec![(k_in, k_out); model.layers().len()];
    init_random_with(model, &dims, seed)
}

/// Per-layer `(k_i, k_o)`, one entry per model layer.
pub fn init_random_with(model: &Model, dims: &[(usize, usize)], seed: u64) -> Result<ProjectionSet> {
    if dims.len() != model.layers().len() {
        return Err(Error::DimensionMismatch {
            context: "projection dims per layer",
            expected: model.layers().len(),
            found: dims.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(dims.len());
    for (layer, &(ki, ko)) in model.layers().iter().zip(dims) {
        check_dims(&layer.name, ki, layer.n_in())?;
        check_dims(&layer.name, ko, layer.n_out())?;
        let p_in = random_orthonormal(ki, layer.n_in(), &mut rng, &layer.name)?;
        let p_out = random_orthonormal(ko, layer.n_out(), &mut rng, &layer.name)?;
        pairs.push(ProjectionPair {
            layer_name: layer.name.clone(),
            p_in,
            p_out,
            init: InitKind::Random,
        });
    }
    ProjectionSet::new(pairs)
}

/// Top eigenvectors of the forward and backward covariances as projection rows.
pub fn init_pca(factors: &[KroneckerFactors], k_in: usize, k_out: usize) -> Result<ProjectionSet> {
    let dims = vec![(k_in, k_out); factors.len()];
    init_pca_with(factors, &dims)
}

pub fn init_pca_with(factors: &[KroneckerFactors], dims: &[(usize, usize)]) -> Result<ProjectionSet> {
    if dims.len() != factors.len() {
        return Err(Error::DimensionMismatch {
            context: "projection dims per layer",
            expected: factors.len(),
            found: dims.len(),
        });
    }
    let mut pairs = Vec::with_capacity(factors.len());
    for (f, &(ki, ko)) in factors.iter().zip(dims) {
        check_dims(&f.layer_name, ki, f.n_in())?;
        check_dims(&f.layer_name, ko, f.n_out())?;
        for (eig, k) in [(&f.eig_fwd, ki), (&f.eig_bwd, ko)] {
            let rank = eig.effective_rank(EFFECTIVE_RANK_TOLERANCE);
            if k > rank {
                return Err(Error::RankDeficient {
                    layer: f.layer_name.clone(),
                    requested: k,
                    effective_rank: rank,
                });
            }
        }
        pairs.push(ProjectionPair {
            layer_name: f.layer_name.clone(),
            p_in: f.eig_fwd.top_rows(ki),
            p_out: f.eig_bwd.top_rows(ko),
            init: InitKind::Pca,
        });
    }
    ProjectionSet::new(pairs)
}
