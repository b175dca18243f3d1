//! The train → extract → query → eval pipeline behind the command line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use logra_core::influence::{topk, QueryEngine, ScoreMode};
use logra_core::nn::{train, Model, Sample};
use logra_core::projection::{init_pca_with, init_random_with, project_dataset, ProjectionSet};
use logra_core::stats::{fit_kronecker_factors, fit_projected_hessian, KroneckerFactors};
use serde::Serialize;

use crate::config::{DataSource, InitName, RunConfig};
use crate::data::{read_csv, synthetic_gaussian, Split};
use crate::error::{Error, Result};
use crate::eval::{
    brittleness, clamp_dims, clamp_dims_to_rank, lds, lds_ground_truth, percentile, permutation_null, random_values,
    tracked_points, value_all, Method, Retrainer,
};
use crate::format::{
    combine, hex, load_checkpoint, load_projections, load_statistics, read_file, save_checkpoint, save_projections,
    save_statistics, write_file, Digest, ProjectionFile, Statistics, CHECKPOINT_MAGIC, PROJECTION_MAGIC,
    STATISTICS_MAGIC,
};
use crate::gradstore::{GradRecord, GradStore, ScanOptions, StoreSchema, StoreWriter, STORE_MAGIC};
use crate::scoring::{score_store, stack};

pub fn load_data(cfg: &RunConfig) -> Result<Split> {
    let split = match &cfg.data {
        DataSource::Synthetic(spec) => synthetic_gaussian(spec)?,
        DataSource::Csv { train, test } => Split {
            train: read_csv(train)?,
            test: read_csv(test)?,
        },
    };
    let (n_in, n_out) = (cfg.model.widths[0], *cfg.model.widths.last().unwrap());
    for s in split.train.iter().chain(&split.test) {
        if s.inputs.cols() != n_in {
            return Err(Error::Config(format!(
                "data has {} features but model.widths starts with {n_in}",
                s.inputs.cols()
            )));
        }
        if let Some(c) = s.class() {
            if c >= n_out {
                return Err(Error::Config(format!("class {c} does not fit {n_out} model outputs")));
            }
        }
    }
    Ok(split)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub digest: Digest,
    pub model: Model,
}

/// Trains the configured model on the train split and writes the checkpoint.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    let split = load_data(cfg)?;
    let init = cfg.model.build(cfg.seed)?;
    let model = train(&init, &split.train, &cfg.train_config(cfg.seed))?;
    let checkpoint = cfg.checkpoint_path();
    let digest = save_checkpoint(&checkpoint, &model)?;
    Ok(TrainReport {
        checkpoint,
        digest,
        model,
    })
}

/// Builds projections for one model, enforcing that PCA initialisation only
/// happens after the covariance pass.
pub struct Extractor<'a> {
    model: &'a Model,
    train: &'a [Sample],
    batch_size: usize,
    factors: Option<Vec<KroneckerFactors>>,
}

impl<'a> Extractor<'a> {
    pub fn new(model: &'a Model, train: &'a [Sample], batch_size: usize) -> Self {
        Self {
            model,
            train,
            batch_size,
            factors: None,
        }
    }

    pub fn fit_covariances(&mut self) -> Result<&[KroneckerFactors]> {
        let f = fit_kronecker_factors(self.model, self.train, self.batch_size)?;
        Ok(self.factors.insert(f))
    }

    pub fn factors(&self) -> Option<&[KroneckerFactors]> {
        self.factors.as_deref()
    }

    pub fn projections(&self, init: InitName, k_in: usize, k_out: usize, seed: u64) -> Result<ProjectionSet> {
        match init {
            InitName::Random => Ok(init_random_with(self.model, &clamp_dims(self.model, k_in, k_out), seed)?),
            InitName::Pca => {
                let factors = self.factors.as_deref().ok_or(logra_core::Error::MissingTraces(
                    "covariance statistics (run the covariance pass before PCA initialisation)",
                ))?;
                Ok(init_pca_with(factors, &clamp_dims_to_rank(factors, k_in, k_out))?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractReport {
    pub store: PathBuf,
    pub records: u64,
    pub fingerprint: Digest,
}

fn source_digest(cfg: &RunConfig, checkpoint: &Digest) -> Digest {
    combine(&[&cfg.extraction_digest(), checkpoint])
}

/// Writes projections, statistics and the gradient store for the train split.
pub fn cmd_extract(cfg: &RunConfig) -> Result<ExtractReport> {
    let split = load_data(cfg)?;
    let ck_path = cfg.checkpoint_path();
    if !ck_path.exists() {
        return Err(Error::Mismatch(format!(
            "checkpoint {} not found; run train first",
            ck_path.display()
        )));
    }
    let (model, ck_digest) = load_checkpoint(&ck_path)?;
    let bs = cfg.train.batch_size.max(64);

    let mut ex = Extractor::new(&model, &split.train, bs);
    ex.fit_covariances()?;
    let set = ex.projections(
        cfg.projection.init,
        cfg.projection.k_in,
        cfg.projection.k_out,
        cfg.projection_seed(),
    )?;
    let source = source_digest(cfg, &ck_digest);
    let proj_digest = save_projections(
        &cfg.projections_path(),
        &ProjectionFile {
            source,
            set: set.clone(),
        },
    )?;
    let fingerprint = combine(&[&source, &proj_digest]);

    let grads = project_dataset(&model, &split.train, &set, bs)?;
    let layout = if cfg.hessian.dense { set.layout().dense() } else { set.layout() };
    let hessian = fit_projected_hessian(grads.iter().map(Vec::as_slice), &layout, cfg.hessian.damping.into())?;
    save_statistics(
        &cfg.statistics_path(),
        &Statistics {
            fingerprint,
            factors: ex.factors().unwrap_or_default().to_vec(),
            hessian,
        },
    )?;

    let store_path = cfg.store_path();
    let schema = StoreSchema::from_projections(&set, cfg.store.precision);
    if let Ok(existing) = GradStore::open(&store_path) {
        if existing.schema() != &schema {
            return Err(Error::Mismatch(format!(
                "existing store {} has schema {:?}, extraction needs {:?}",
                store_path.display(),
                existing.schema(),
                schema
            )));
        }
    }
    let mut w = StoreWriter::create(&store_path, schema)?;
    w.set_fingerprint(hex(&fingerprint));
    for (i, (g, s)) in grads.into_iter().zip(&split.train).enumerate() {
        w.append(&GradRecord {
            data_id: i as u64,
            label: s.class().map(|c| c.to_string()),
            payload: g,
        })?;
    }
    let records = w.finalize()?;
    Ok(ExtractReport {
        store: store_path,
        records,
        fingerprint,
    })
}

/// Loaded and cross-checked extraction artifacts.
pub struct Artifacts {
    pub model: Model,
    pub projections: ProjectionSet,
    pub statistics: Statistics,
    pub store: GradStore,
}

pub fn load_artifacts(cfg: &RunConfig) -> Result<Artifacts> {
    for p in [cfg.checkpoint_path(), cfg.projections_path(), cfg.statistics_path(), cfg.store_path()] {
        if !p.exists() {
            return Err(Error::Mismatch(format!("{} not found; run extract first", p.display())));
        }
    }
    let (model, ck_digest) = load_checkpoint(&cfg.checkpoint_path())?;
    let (pf, proj_digest) = load_projections(&cfg.projections_path())?;
    let source = source_digest(cfg, &ck_digest);
    if pf.source != source {
        return Err(Error::Mismatch(format!(
            "{} was built for a different configuration or checkpoint",
            cfg.projections_path().display()
        )));
    }
    let fingerprint = combine(&[&source, &proj_digest]);
    let statistics = load_statistics(&cfg.statistics_path())?;
    if statistics.fingerprint != fingerprint {
        return Err(Error::Mismatch(format!(
            "{} does not belong to these projections",
            cfg.statistics_path().display()
        )));
    }
    let store = GradStore::open(cfg.store_path())?;
    if store.manifest().fingerprint.as_deref() != Some(hex(&fingerprint).as_str()) {
        return Err(Error::Mismatch(format!(
            "{} does not belong to these projections",
            cfg.store_path().display()
        )));
    }
    if !store.schema().matches(&pf.set) {
        return Err(Error::Mismatch("store schema does not match the projections".into()));
    }
    pf.set.check_model(&model)?;
    Ok(Artifacts {
        model,
        projections: pf.set,
        statistics,
        store,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySplit {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRequest {
    pub split: QuerySplit,
    /// Indices into the split; `None` queries all of it.
    pub ids: Option<Vec<u64>>,
    pub mode: ScoreMode,
    pub k: usize,
    /// Worker threads for scoring; `None` uses the global pool.
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub test_id: u64,
    pub rank: usize,
    pub train_id: u64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryReport {
    pub mode: ScoreMode,
    pub rows: Vec<ReportRow>,
}

impl QueryReport {
    /// `test_id,rank,train_id,score,mode`, scores in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("test_id,rank,train_id,score,mode\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{:?},{}", r.test_id, r.rank, r.train_id, r.score, self.mode.name());
        }
        s
    }
}

pub fn cmd_query(cfg: &RunConfig, req: &QueryRequest) -> Result<QueryReport> {
    let split = load_data(cfg)?;
    let art = load_artifacts(cfg)?;
    if req.k > art.store.len() {
        return Err(Error::Config(format!(
            "k = {} exceeds the {} stored train examples",
            req.k,
            art.store.len()
        )));
    }
    let pool: &[Sample] = match req.split {
        QuerySplit::Train => &split.train,
        QuerySplit::Test => &split.test,
    };
    let ids: Vec<u64> = match &req.ids {
        Some(ids) => ids.clone(),
        None => (0..pool.len() as u64).collect(),
    };
    let mut samples = Vec::with_capacity(ids.len());
    for &id in &ids {
        samples.push(pool.get(id as usize).cloned().ok_or(Error::UnknownId(id))?);
    }
    let grads = project_dataset(&art.model, &samples, &art.projections, 64)?;
    let engine = QueryEngine::new(Some(&art.statistics.hessian), req.mode, &ids, &stack(&grads)?)?;
    let opts = ScanOptions {
        batch_size: cfg.store.batch_size,
        prefetch: cfg.store.prefetch,
        read_latency: None,
    };
    let scores = match req.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(|| score_store(&engine, &art.store, opts))?,
        None => score_store(&engine, &art.store, opts)?,
    };
    let ranked = topk(&scores, req.k)?;
    let rows = ids
        .iter()
        .zip(ranked)
        .flat_map(|(&test_id, list)| {
            list.into_iter().enumerate().map(move |(r, (train_id, score))| ReportRow {
                test_id,
                rank: r + 1,
                train_id,
                score,
            })
        })
        .collect();
    Ok(QueryReport { mode: req.mode, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub removed: usize,
    pub flipped: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub lds_mean: f64,
    pub lds_std: f64,
    pub lds_per_model: Vec<f64>,
    /// 95th percentile of the LDS with train examples randomly permuted.
    pub lds_null_p95: f64,
    pub brittleness: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub project: String,
    pub subsets: usize,
    pub retrain_seeds: Vec<u64>,
    pub reference_models: usize,
    pub tracked_test_ids: Vec<usize>,
    pub methods: BTreeMap<String, MethodSummary>,
    pub random_removal: Vec<CurvePoint>,
    /// Models trained during this run; zero when every retrain hit the cache.
    pub retrain_count: u64,
    /// Retrains that happened while computing method values. Always zero:
    /// valuation reads gradients of the reference models only.
    pub valuation_retrains: u64,
}

fn curve(points: Vec<(usize, f64)>) -> Vec<CurvePoint> {
    points
        .into_iter()
        .map(|(removed, flipped)| CurvePoint { removed, flipped })
        .collect()
}

/// LDS and brittleness for each method. Valuation only ever looks at the
/// reference models; retraining is confined to measuring ground truth.
pub fn cmd_eval(cfg: &RunConfig, methods: &[Method], cache_dir: Option<PathBuf>) -> Result<EvalSummary> {
    let split = load_data(cfg)?;
    let ev = &cfg.eval;
    let r = Retrainer::new(
        cfg.model.clone(),
        cfg.train_config(cfg.seed),
        &split.train,
        &split.test,
        cache_dir,
    );
    let all: Vec<usize> = (0..split.train.len()).collect();
    let references = (0..ev.reference_models as u64)
        .map(|i| r.fit(&all, cfg.seed + i))
        .collect::<Result<Vec<_>>>()?;

    let settings = cfg.logra_settings();
    let truth = lds_ground_truth(&r, &ev.lds)?;
    let tracked = tracked_points(&r, &ev.brittleness.seeds, ev.brittleness.tracked)?;

    let mut summaries = BTreeMap::new();
    let mut valuation_retrains = 0;
    for &m in methods {
        let before = r.retrain_count();
        let per_model = references
            .iter()
            .map(|model| value_all(m, model, &split.train, &split.test, &settings).map(|v| v.values))
            .collect::<Result<Vec<_>>>()?;
        valuation_retrains += r.retrain_count() - before;
        let s = lds(&per_model, &truth)?;
        let null = permutation_null(&per_model[0], &truth, ev.null_permutations.max(1), cfg.seed)?;
        let b = if tracked.is_empty() {
            Vec::new()
        } else {
            brittleness(&r, &per_model[0], &tracked, &ev.brittleness.sizes, &ev.brittleness.seeds)?
        };
        summaries.insert(
            m.name().to_string(),
            MethodSummary {
                lds_mean: s.mean,
                lds_std: s.std,
                lds_per_model: s.per_model,
                lds_null_p95: percentile(&null, 0.95),
                brittleness: curve(b),
            },
        );
    }
    let random_removal = if tracked.is_empty() {
        Vec::new()
    } else {
        let rv = random_values(split.test.len(), split.train.len(), cfg.seed ^ 0x5eed);
        curve(brittleness(&r, &rv, &tracked, &ev.brittleness.sizes, &ev.brittleness.seeds)?)
    };
    let summary = EvalSummary {
        project: cfg.project.clone(),
        subsets: truth.subsets.len(),
        retrain_seeds: ev.lds.seeds.clone(),
        reference_models: references.len(),
        tracked_test_ids: tracked,
        methods: summaries,
        random_removal,
        retrain_count: r.retrain_count(),
        valuation_retrains,
    };
    write_eval_outputs(&cfg.output_dir, &summary)?;
    Ok(summary)
}

fn write_eval_outputs(dir: &Path, s: &EvalSummary) -> Result<()> {
    write_file(&dir.join("eval_summary.json"), &serde_json::to_vec_pretty(s)?)?;
    let mut lds_table = String::from("method,lds_mean,lds_std,lds_null_p95\n");
    let mut curve_table = String::from("method,removed,flipped\n");
    for (name, m) in &s.methods {
        let _ = writeln!(lds_table, "{name},{:?},{:?},{:?}", m.lds_mean, m.lds_std, m.lds_null_p95);
        for p in &m.brittleness {
            let _ = writeln!(curve_table, "{name},{},{:?}", p.removed, p.flipped);
        }
    }
    for p in &s.random_removal {
        let _ = writeln!(curve_table, "random,{},{:?}", p.removed, p.flipped);
    }
    write_file(&dir.join("lds.csv"), lds_table.as_bytes())?;
    write_file(&dir.join("brittleness.csv"), curve_table.as_bytes())
}

/// Human-readable header dump of any artifact, chosen by its magic.
pub fn cmd_inspect(path: &Path) -> Result<String> {
    let mut out = String::new();
    let head = {
        let bytes = read_file(path)?;
        bytes.get(..4).map(<[u8]>::to_vec).unwrap_or_default()
    };
    match head.as_slice() {
        m if m == STORE_MAGIC => {
            let s = GradStore::open(path)?;
            let _ = writeln!(out, "gradient store {}", path.display());
            let _ = writeln!(out, "precision: {:?}", s.schema().precision);
            let _ = writeln!(out, "records: {}", s.len());
            let _ = writeln!(out, "payload: {} values", s.dim());
            for l in &s.schema().layers {
                let _ = writeln!(out, "  layer {}: k_in={} k_out={}", l.name, l.k_in, l.k_out);
            }
            if let Some(fp) = &s.manifest().fingerprint {
                let _ = writeln!(out, "fingerprint: {fp}");
            }
        }
        m if m == STATISTICS_MAGIC => {
            let st = load_statistics(path)?;
            let _ = writeln!(out, "statistics {}", path.display());
            let _ = writeln!(out, "fingerprint: {}", hex(&st.fingerprint));
            for f in &st.factors {
                let _ = writeln!(
                    out,
                    "  factors {}: n_in={} n_out={} tokens={}",
                    f.layer_name,
                    f.n_in(),
                    f.n_out(),
                    f.token_count
                );
            }
            let _ = writeln!(out, "hessian: {} samples", st.hessian.sample_count);
            for b in &st.hessian.blocks {
                let _ = writeln!(out, "  block {}: dim={} damping={:?}", b.layer_name, b.dim(), b.damping);
            }
        }
        m if m == CHECKPOINT_MAGIC => {
            let (model, digest) = load_checkpoint(path)?;
            let _ = writeln!(out, "checkpoint {} ({})", path.display(), hex(&digest));
            for (l, a) in model.layers().iter().zip(model.activations()) {
                let _ = writeln!(out, "  {}: {}x{} bias={} {:?}", l.name, l.n_out(), l.n_in(), l.has_bias(), a);
            }
            let _ = writeln!(out, "loss: {:?}", model.loss_kind());
        }
        m if m == PROJECTION_MAGIC => {
            let (pf, digest) = load_projections(path)?;
            let _ = writeln!(out, "projections {} ({})", path.display(), hex(&digest));
            for p in pf.set.pairs() {
                let _ = writeln!(
                    out,
                    "  {}: {:?} p_in {}x{} p_out {}x{}",
                    p.layer_name,
                    p.init,
                    p.k_in(),
                    p.n_in(),
                    p.k_out(),
                    p.n_out()
                );
            }
        }
        _ => return Err(Error::corrupt(path, "unrecognised magic")),
    }
    Ok(out)
}
