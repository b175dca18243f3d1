use logra_core::numerics::spearman;
use logra_core::Matrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::retrain::Retrainer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdsConfig {
    /// Number of random subsets `M`.
    pub subset_count: usize,
    pub subset_fraction: f64,
    /// Retraining seeds per subset; measured utilities are averaged over them.
    pub seeds: Vec<u64>,
    /// Seed for drawing the subsets.
    pub subset_seed: u64,
}

impl Default for LdsConfig {
    fn default() -> Self {
        Self {
            subset_count: 100,
            subset_fraction: 0.5,
            seeds: vec![0, 1, 2],
            subset_seed: 0,
        }
    }
}

impl LdsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subset_count < 2 {
            return Err(Error::Config("LDS needs at least 2 subsets".into()));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction < 1.0) {
            return Err(Error::Config(format!(
                "subset_fraction {} must be in (0, 1)",
                self.subset_fraction
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("LDS needs at least one retraining seed".into()));
        }
        Ok(())
    }
}

/// Subsets and their measured utilities, shared by every method under comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct LdsGroundTruth {
    pub subsets: Vec<Vec<usize>>,
    /// `M x tests`: negative test loss of the model retrained on each subset,
    /// averaged over seeds.
    pub utilities: Matrix,
}

pub fn lds_ground_truth(r: &Retrainer<'_>, cfg: &LdsConfig) -> Result<LdsGroundTruth> {
    cfg.validate()?;
    let n = r.train_set().len();
    let size = ((cfg.subset_fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.subset_seed);
    let subsets: Vec<Vec<usize>> = (0..cfg.subset_count)
        .map(|_| {
            let mut s = rand::seq::index::sample(&mut rng, n, size).into_vec();
            s.sort_unstable();
            s
        })
        .collect();
    let jobs: Vec<(Vec<usize>, u64)> = subsets
        .iter()
        .flat_map(|s| cfg.seeds.iter().map(move |&seed| (s.clone(), seed)))
        .collect();
    let outcomes = r.run_many(&jobs)?;
    let n_test = r.test_set().len();
    let mut utilities = Matrix::zeros(subsets.len(), n_test);
    let per = cfg.seeds.len() as f64;
    for (j, o) in outcomes.iter().enumerate() {
        let row = utilities.row_mut(j / cfg.seeds.len());
        for (u, l) in row.iter_mut().zip(&o.losses) {
            *u -= l / per;
        }
    }
    Ok(LdsGroundTruth { subsets, utilities })
}

/// Mean over test examples of the Spearman correlation between additive
/// predictions `Σ_{x∈S} value(x)` and measured subset utilities.
///
/// Test examples whose measured utility is constant across subsets carry no
/// ranking information and are skipped.
pub fn lds_score(values: &Matrix, truth: &LdsGroundTruth) -> Result<f64> {
    if values.rows() != truth.utilities.cols() {
        return Err(logra_core::Error::DimensionMismatch {
            context: "valued tests vs measured tests",
            expected: truth.utilities.cols(),
            found: values.rows(),
        }
        .into());
    }
    let mut total = 0.0;
    let mut used = 0usize;
    for t in 0..values.rows() {
        let v = values.row(t);
        let predicted: Vec<f64> = truth.subsets.iter().map(|s| s.iter().map(|&i| v[i]).sum()).collect();
        if predicted.iter().all(|&p| p == predicted[0]) {
            return Err(logra_core::Error::ZeroVariance("predicted subset utilities").into());
        }
        let measured = truth.utilities.col(t);
        if measured.iter().all(|&m| m == measured[0]) {
            continue;
        }
        total += spearman(&predicted, &measured)?;
        used += 1;
    }
    if used == 0 {
        return Err(logra_core::Error::ZeroVariance("measured subset utilities").into());
    }
    Ok(total / used as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LdsSummary {
    pub mean: f64,
    /// Sample standard deviation across reference models; 0 for a single model.
    pub std: f64,
    pub per_model: Vec<f64>,
}

/// LDS of valuations from independently trained reference models.
pub fn lds(per_model_values: &[Matrix], truth: &LdsGroundTruth) -> Result<LdsSummary> {
    let per_model = per_model_values
        .iter()
        .map(|v| lds_score(v, truth))
        .collect::<Result<Vec<_>>>()?;
    if per_model.is_empty() {
        return Err(Error::Config("LDS needs at least one reference model".into()));
    }
    let n = per_model.len() as f64;
    let mean = per_model.iter().sum::<f64>() / n;
    let std = if per_model.len() > 1 {
        (per_model.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(LdsSummary { mean, std, per_model })
}

/// LDS of `values` with train examples randomly relabelled, once per permutation.
pub fn permutation_null(values: &Matrix, truth: &LdsGroundTruth, permutations: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.cols();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        perm.shuffle(&mut rng);
        let mut shuffled = Matrix::zeros(values.rows(), n);
        for t in 0..values.rows() {
            let (src, dst) = (values.row(t), shuffled.row_mut(t));
            for (d, &p) in dst.iter_mut().zip(&perm) {
                *d = src[p];
            }
        }
        out.push(lds_score(&shuffled, truth)?);
    }
    Ok(out)
}

/// Linear-interpolated `q`-quantile, `q` in `[0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Uniform random values, the "random selection" baseline.
pub fn random_values(tests: usize, train: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..tests * train).map(|_| rng.random::<f64>()).collect();
    Matrix::new(tests, train, data).expect("finite")
}

/// Test examples classified correctly by the full-data model under every
/// seed, lowest worst-case margin first, at most `max` of them.
pub fn tracked_points(r: &Retrainer<'_>, seeds: &[u64], max: usize) -> Result<Vec<usize>> {
    let full: Vec<usize> = (0..r.train_set().len()).collect();
    let jobs: Vec<(Vec<usize>, u64)> = seeds.iter().map(|&s| (full.clone(), s)).collect();
    let outcomes = r.run_many(&jobs)?;
    let mut candidates: Vec<(f64, usize)> = Vec::new();
    for (t, sample) in r.test_set().iter().enumerate() {
        let Some(class) = sample.class() else {
            return Err(Error::Config("brittleness needs classification targets".into()));
        };
        if outcomes.iter().all(|o| o.predictions[t] == class) {
            let worst = outcomes.iter().map(|o| o.margins[t]).fold(f64::INFINITY, f64::min);
            candidates.push((worst, t));
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(candidates.into_iter().take(max).map(|c| c.1).collect())
}

/// Train indices ordered by descending value, ties by ascending index.
fn ranked(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// For each removal size `k`: drop each tracked test example's top-`k`
/// train examples, retrain under every seed, and report the fraction of
/// (tracked example, seed) pairs that end up misclassified.
pub fn brittleness(
    r: &Retrainer<'_>,
    values: &Matrix,
    tracked: &[usize],
    sizes: &[usize],
    seeds: &[u64],
) -> Result<Vec<(usize, f64)>> {
    let n = r.train_set().len();
    if values.cols() != n {
        return Err(logra_core::Error::DimensionMismatch {
            context: "valued train examples",
            expected: n,
            found: values.cols(),
        }
        .into());
    }
    if let Some(&k) = sizes.iter().find(|&&k| k >= n) {
        return Err(Error::Config(format!("removal size {k} must be smaller than the {n} train examples")));
    }
    if tracked.is_empty() || seeds.is_empty() {
        return Err(Error::Config("brittleness needs tracked test examples and seeds".into()));
    }
    let mut jobs = Vec::new();
    for &k in sizes {
        for &t in tracked {
            let mut keep = ranked(values.row(t)).split_off(k);
            keep.sort_unstable();
            for &s in seeds {
                jobs.push((keep.clone(), s));
            }
        }
    }
    let outcomes = r.run_many(&jobs)?;
    let per_size = tracked.len() * seeds.len();
    Ok(sizes
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let mut flipped = 0usize;
            for (j, &t) in tracked.iter().enumerate() {
                let class = r.test_set()[t].class();
                for s in 0..seeds.len() {
                    let o = &outcomes[i * per_size + j * seeds.len() + s];
                    if Some(o.predictions[t]) != class {
                        flipped += 1;
                    }
                }
            }
            (k, flipped as f64 / per_size as f64)
        })
        .collect())
}
