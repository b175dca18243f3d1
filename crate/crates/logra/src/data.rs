//! Datasets: the synthetic two-class Gaussian task and CSV ingestion.

use std::path::Path;

use logra_core::nn::Sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_test: usize,
    /// Fraction of train labels flipped to the other class.
    pub label_noise: f64,
    /// Class means sit at `±separation · (1, 1)`; both classes have unit variance.
    pub separation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_test: 100,
            label_noise: 0.1,
            separation: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train < 2 || self.n_test == 0 {
            return Err(Error::Config("synthetic data needs n_train >= 2 and n_test >= 1".into()));
        }
        if !(0.0..=0.5).contains(&self.label_noise) {
            return Err(Error::Config(format!("label_noise {} outside [0, 0.5]", self.label_noise)));
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return Err(Error::Config("separation must be finite and >= 0".into()));
        }
        Ok(())
    }
}

fn gaussian_point(rng: &mut ChaCha8Rng, class: usize, separation: f64) -> [f64; 2] {
    let sign = if class == 1 { 1.0 } else { -1.0 };
    let mut p = [0.0; 2];
    for v in &mut p {
        let z: f64 = rng.sample(StandardNormal);
        *v = sign * separation + z;
    }
    p
}

/// Two isotropic Gaussian blobs, balanced classes drawn at random.
/// Label noise applies to the train split only; test labels are clean.
pub fn synthetic_gaussian(spec: &SyntheticSpec) -> Result<Split> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draw = |n: usize, noise: f64, rng: &mut ChaCha8Rng| -> Vec<Sample> {
        (0..n)
            .map(|_| {
                let class = rng.random_range(0..2usize);
                let x = gaussian_point(rng, class, spec.separation);
                let flip = noise > 0.0 && rng.random_bool(noise);
                Sample::classification(&x, if flip { 1 - class } else { class })
            })
            .collect()
    };
    let train = draw(spec.n_train, spec.label_noise, &mut rng);
    let test = draw(spec.n_test, 0.0, &mut rng);
    Ok(Split { train, test })
}

/// Reads a classification table: a header row, numeric feature columns and a
/// final integer class column.
pub fn read_csv(path: &Path) -> Result<Vec<Sample>> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    if !path.exists() {
        return Err(Error::Config(format!("data file {} does not exist", path.display())));
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err)?;
    let width = reader.headers().map_err(csv_err)?.len();
    if width < 2 {
        return Err(Error::Config(format!(
            "{}: need at least one feature column and a label column",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(csv_err)?;
        let bad = |what: &str| Error::Config(format!("{} row {}: {what}", path.display(), line + 2));
        let mut features = Vec::with_capacity(width - 1);
        for field in row.iter().take(width - 1) {
            let v: f64 = field.parse().map_err(|_| bad(&format!("non-numeric feature {field:?}")))?;
            if !v.is_finite() {
                return Err(bad("non-finite feature"));
            }
            features.push(v);
        }
        let label = row.get(width - 1).unwrap_or_default();
        let class: usize = label.parse().map_err(|_| bad(&format!("label {label:?} is not a class index")))?;
        out.push(Sample::classification(&features, class));
    }
    if out.is_empty() {
        return Err(Error::Config(format!("{} has no data rows", path.display())));
    }
    Ok(out)
}

/// Writes samples in the layout [`read_csv`] expects.
pub fn write_csv(path: &Path, samples: &[Sample]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let dim = samples.first().map_or(0, |s| s.inputs.cols());
    let mut header: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(csv_err)?;
    for s in samples {
        let class = s
            .class()
            .ok_or_else(|| Error::Config("only single-token classification samples can be written".into()))?;
        let mut row: Vec<String> = s.inputs.row(0).iter().map(|v| format!("{v:?}")).collect();
        row.push(class.to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
