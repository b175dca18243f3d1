//! The JSON run configuration.

use std::path::{Path, PathBuf};

use logra_core::influence::ScoreMode;
use logra_core::nn::TrainConfig;
use logra_core::stats::Damping;
use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::eval::{LdsConfig, LograSettings, Method, ModelSpec};
use crate::format::{sha256, Digest};
use crate::gradstore::Precision;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Csv { train: PathBuf, test: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-3,
            batch_size: 16,
            epochs: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitName {
    Random,
    Pca,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    /// Requested per-layer dimensions; clamped to what each layer supports.
    pub k_in: usize,
    pub k_out: usize,
    pub init: InitName,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            k_in: 16,
            k_out: 16,
            init: InitName::Random,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DampingConfig {
    /// Factor applied to each block's mean eigenvalue.
    MeanEigenvalue(f64),
    Fixed(f64),
}

impl Default for DampingConfig {
    fn default() -> Self {
        DampingConfig::MeanEigenvalue(0.1)
    }
}

impl From<DampingConfig> for Damping {
    fn from(d: DampingConfig) -> Self {
        match d {
            DampingConfig::MeanEigenvalue(f) => Damping::MeanEigenvalue(f),
            DampingConfig::Fixed(l) => Damping::Fixed(l),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HessianConfig {
    pub damping: DampingConfig,
    /// One dense block over all layers instead of a block per layer.
    pub dense: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreConfig {
    /// Defaults to `<output_dir>/grads.lggs`.
    pub path: Option<PathBuf>,
    pub precision: Precision,
    pub batch_size: usize,
    pub prefetch: bool,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            path: None,
            precision: Precision::F32,
            batch_size: 1024,
            prefetch: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueryConfig {
    /// `dot`, `influence`, `l_relatif` or `cosine`.
    pub mode: String,
    pub k: usize,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self {
            mode: "l_relatif".into(),
            k: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BrittlenessConfig {
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    /// How many test examples to track.
    pub tracked: usize,
}

impl Default for BrittlenessConfig {
    fn default() -> Self {
        Self {
            sizes: vec![0, 5, 10, 20],
            seeds: vec![0, 1, 2, 3, 4],
            tracked: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub methods: Vec<Method>,
    pub lds: LdsConfig,
    /// Independently seeded full-data models whose valuations are each scored.
    pub reference_models: usize,
    pub null_permutations: usize,
    pub brittleness: BrittlenessConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            lds: LdsConfig::default(),
            reference_models: 3,
            null_permutations: 100,
            brittleness: BrittlenessConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub project: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelSpec,
    pub data: DataSource,
    pub train: TrainSettings,
    pub projection: ProjectionConfig,
    pub hessian: HessianConfig,
    pub store: StoreConfig,
    pub query: QueryConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            project: "logra".into(),
            seed: 0,
            output_dir: PathBuf::from("logra-out"),
            model: ModelSpec::default(),
            data: DataSource::default(),
            train: TrainSettings::default(),
            projection: ProjectionConfig::default(),
            hessian: HessianConfig::default(),
            store: StoreConfig::default(),
            query: QueryConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// The parts of a configuration that determine extracted artifacts.
#[derive(Serialize)]
struct ExtractionKey<'a> {
    seed: u64,
    model: &'a ModelSpec,
    data: &'a DataSource,
    train: &'a TrainSettings,
    projection: &'a ProjectionConfig,
    hessian: &'a HessianConfig,
    precision: Precision,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.widths.len() < 2 || m.widths.contains(&0) {
            return Err(Error::Config(format!("model.widths {:?} needs >= 2 positive entries", m.widths)));
        }
        self.train_config(self.seed)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.projection.k_in == 0 || self.projection.k_out == 0 {
            return Err(Error::Config("projection.k_in and k_out must be >= 1".into()));
        }
        let ok = match self.hessian.damping {
            DampingConfig::MeanEigenvalue(f) | DampingConfig::Fixed(f) => f.is_finite() && f >= 0.0,
        };
        if !ok {
            return Err(Error::Config("damping must be finite and >= 0".into()));
        }
        if self.store.batch_size == 0 {
            return Err(Error::Config("store.batch_size must be >= 1".into()));
        }
        self.score_mode()?;
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        self.eval.lds.validate()?;
        if self.eval.methods.is_empty() || self.eval.reference_models == 0 {
            return Err(Error::Config("eval needs at least one method and one reference model".into()));
        }
        Ok(())
    }

    pub fn score_mode(&self) -> Result<ScoreMode> {
        ScoreMode::parse(&self.query.mode)
            .ok_or_else(|| Error::Config(format!("unknown query mode {:?}", self.query.mode)))
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed,
        }
    }

    pub fn projection_seed(&self) -> u64 {
        self.projection.seed.unwrap_or(self.seed)
    }

    pub fn logra_settings(&self) -> LograSettings {
        LograSettings {
            k_in: self.projection.k_in,
            k_out: self.projection.k_out,
            seed: self.projection_seed(),
            damping: self.hessian.damping.into(),
            dense: self.hessian.dense,
            batch_size: 64,
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("checkpoint.lgck")
    }

    pub fn projections_path(&self) -> PathBuf {
        self.output_dir.join("projections.lgpj")
    }

    pub fn statistics_path(&self) -> PathBuf {
        self.output_dir.join("stats.lgst")
    }

    pub fn store_path(&self) -> PathBuf {
        self.store.path.clone().unwrap_or_else(|| self.output_dir.join("grads.lggs"))
    }

    /// Digest of everything that shapes the extracted artifacts. Query and
    /// evaluation settings are excluded so changing them does not invalidate
    /// a store.
    pub fn extraction_digest(&self) -> Digest {
        let key = ExtractionKey {
            seed: self.seed,
            model: &self.model,
            data: &self.data,
            train: &self.train,
            projection: &self.projection,
            hessian: &self.hessian,
            precision: self.store.precision,
        };
        sha256(&serde_json::to_vec(&key).expect("configuration serializes"))
    }
}
