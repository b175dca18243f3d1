//! Counterfactual evaluation: valuation baselines, the linear datamodeling
//! score and the brittleness test.

mod counterfactual;
mod retrain;

pub use counterfactual::{
    brittleness, lds, lds_ground_truth, lds_score, permutation_null, percentile, random_values, tracked_points,
    LdsConfig, LdsGroundTruth, LdsSummary,
};
pub use retrain::{dataset_digest, ModelSpec, Outcome, Retrainer};

use logra_core::influence::{ekfac_ihvp, QueryEngine, ScoreMode};
use logra_core::nn::{capture, Model, Sample};
use logra_core::projection::{
    init_pca_with, init_random_with, project_dataset, ProjectionSet, EFFECTIVE_RANK_TOLERANCE,
};
use logra_core::stats::{ekfac_correct, fit_kronecker_factors, fit_projected_hessian, Damping, KroneckerFactors};
use logra_core::numerics::dot;
use logra_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{combine, encode_checkpoint, hex};
use crate::scoring::{score_batch, stack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    LograRandom,
    LograPca,
    GradDot,
    RepSim,
    Ekfac,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::LograRandom,
        Method::LograPca,
        Method::GradDot,
        Method::RepSim,
        Method::Ekfac,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::LograRandom => "logra_random",
            Method::LograPca => "logra_pca",
            Method::GradDot => "grad_dot",
            Method::RepSim => "rep_sim",
            Method::Ekfac => "ekfac",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Projection and curvature settings shared by the LoGra methods.
#[derive(Debug, Clone, PartialEq)]
pub struct LograSettings {
    pub k_in: usize,
    pub k_out: usize,
    pub seed: u64,
    pub damping: Damping,
    /// One dense Hessian block instead of one per layer.
    pub dense: bool,
    pub batch_size: usize,
}

impl Default for LograSettings {
    fn default() -> Self {
        Self {
            k_in: 16,
            k_out: 16,
            seed: 0,
            damping: Damping::default(),
            dense: false,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValuationResult {
    pub method: Method,
    /// `tests x train`: value of train example `b` for test target `a`.
    pub values: Matrix,
    /// Hex digest of the method, model and settings.
    pub fingerprint: String,
}

/// `(k_i, k_o)` per layer, clamped to the layer's dimensions.
pub fn clamp_dims(model: &Model, k_in: usize, k_out: usize) -> Vec<(usize, usize)> {
    model
        .layers()
        .iter()
        .map(|l| (k_in.clamp(1, l.n_in()), k_out.clamp(1, l.n_out())))
        .collect()
}

/// Like [`clamp_dims`], additionally capped at each factor's effective rank.
pub fn clamp_dims_to_rank(factors: &[KroneckerFactors], k_in: usize, k_out: usize) -> Vec<(usize, usize)> {
    factors
        .iter()
        .map(|f| {
            let ri = f.eig_fwd.effective_rank(EFFECTIVE_RANK_TOLERANCE).max(1);
            let ro = f.eig_bwd.effective_rank(EFFECTIVE_RANK_TOLERANCE).max(1);
            (k_in.clamp(1, ri), k_out.clamp(1, ro))
        })
        .collect()
}

/// Random or PCA projections for `model`, with dimensions clamped as above.
pub fn build_projections(model: &Model, train: &[Sample], method: Method, s: &LograSettings) -> Result<ProjectionSet> {
    match method {
        Method::LograRandom => Ok(init_random_with(model, &clamp_dims(model, s.k_in, s.k_out), s.seed)?),
        Method::LograPca => {
            let factors = fit_kronecker_factors(model, train, s.batch_size)?;
            Ok(init_pca_with(&factors, &clamp_dims_to_rank(&factors, s.k_in, s.k_out))?)
        }
        other => Err(Error::Config(format!("{} does not use projections", other.name()))),
    }
}

/// Per sample, every layer's weight gradient flattened column-major and concatenated.
pub fn flat_weight_grads(model: &Model, data: &[Sample], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let (pass, _) = capture(model, chunk)?;
        for s in 0..chunk.len() {
            let mut g = Vec::new();
            for t in &pass.traces {
                g.extend(t.sample_weight_grad(s)?.vec_col_major());
            }
            out.push(g);
        }
    }
    Ok(out)
}

/// Token-summed input to the final linear layer, per sample.
pub fn penultimate_features(model: &Model, data: &[Sample], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let pass = logra_core::nn::forward(model, chunk)?;
        let last = pass.traces.last().expect("models have at least one layer");
        for x in &last.fwd_inputs {
            let mut f = vec![0.0; x.cols()];
            for t in 0..x.rows() {
                f.iter_mut().zip(x.row(t)).for_each(|(a, b)| *a += b);
            }
            out.push(f);
        }
    }
    Ok(out)
}

fn ids(n: usize) -> Vec<u64> {
    (0..n as u64).collect()
}

/// Projected influence (`mode = influence`) of every train example on every test example.
pub fn logra_values(
    model: &Model,
    train: &[Sample],
    test: &[Sample],
    set: &ProjectionSet,
    s: &LograSettings,
) -> Result<Matrix> {
    let tr = project_dataset(model, train, set, s.batch_size)?;
    let te = project_dataset(model, test, set, s.batch_size)?;
    let layout = if s.dense { set.layout().dense() } else { set.layout() };
    let h = fit_projected_hessian(tr.iter().map(Vec::as_slice), &layout, s.damping)?;
    let engine = QueryEngine::new(Some(&h), ScoreMode::Influence, &ids(te.len()), &stack(&te)?)?;
    score_batch(&engine, &ids(tr.len()), &stack(&tr)?)
}

fn dot_values(train: &[Vec<f64>], test: &[Vec<f64>]) -> Result<Matrix> {
    let engine = QueryEngine::new(None, ScoreMode::Dot, &ids(test.len()), &stack(test)?)?;
    score_batch(&engine, &ids(train.len()), &stack(train)?)
}

fn layer_grads(model: &Model, data: &[Sample], batch_size: usize) -> Result<Vec<Vec<Matrix>>> {
    let mut per_layer = vec![Vec::with_capacity(data.len()); model.layers().len()];
    for chunk in data.chunks(batch_size.max(1)) {
        let (pass, _) = capture(model, chunk)?;
        for (l, t) in pass.traces.iter().enumerate() {
            for s in 0..chunk.len() {
                per_layer[l].push(t.sample_weight_grad(s)?);
            }
        }
    }
    Ok(per_layer)
}

/// Layerwise EKFAC influence: `Σ_l ⟨H_l⁻¹ G_te,l, G_tr,l⟩`.
pub fn ekfac_values(model: &Model, train: &[Sample], test: &[Sample], batch_size: usize) -> Result<Matrix> {
    let factors = fit_kronecker_factors(model, train, batch_size)?;
    let tr = layer_grads(model, train, batch_size)?;
    let te = layer_grads(model, test, batch_size)?;
    let mut values = Matrix::zeros(test.len(), train.len());
    for ((f, g_tr), g_te) in factors.iter().zip(&tr).zip(&te) {
        let eigen = ekfac_correct(f, g_tr)?;
        for (a, gt) in g_te.iter().enumerate() {
            let pre = ekfac_ihvp(f, &eigen, gt)?;
            for (b, g) in g_tr.iter().enumerate() {
                values[(a, b)] += dot(pre.as_slice(), g.as_slice());
            }
        }
    }
    Ok(values)
}

/// Values of every train example for every test example, from the final
/// model alone. Never retrains.
pub fn value_all(
    method: Method,
    model: &Model,
    train: &[Sample],
    test: &[Sample],
    settings: &LograSettings,
) -> Result<ValuationResult> {
    let bs = settings.batch_size;
    let values = match method {
        Method::LograRandom | Method::LograPca => {
            let set = build_projections(model, train, method, settings)?;
            logra_values(model, train, test, &set, settings)?
        }
        Method::GradDot => dot_values(&flat_weight_grads(model, train, bs)?, &flat_weight_grads(model, test, bs)?)?,
        Method::RepSim => dot_values(
            &penultimate_features(model, train, bs)?,
            &penultimate_features(model, test, bs)?,
        )?,
        Method::Ekfac => ekfac_values(model, train, test, bs)?,
    };
    let fingerprint = hex(&combine(&[
        method.name().as_bytes(),
        &encode_checkpoint(model)?,
        format!("{settings:?}").as_bytes(),
    ]));
    Ok(ValuationResult {
        method,
        values,
        fingerprint,
    })
}
