mod common;

use std::path::Path;
use std::process::Command;

use logra::config::{DampingConfig, DataSource, RunConfig};
use logra::data::write_csv;
use logra::eval::Method;
use logra::format::{load_checkpoint, load_projections};
use logra::gradstore::GradStore;
use logra::pipeline::*;
use logra::Error;
use logra_core::influence::ScoreMode;
use logra_core::nn::Sample;

fn small_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.output_dir = dir.join("out");
    if let DataSource::Synthetic(s) = &mut cfg.data {
        s.n_train = 60;
        s.n_test = 20;
    }
    cfg.train.epochs = 10;
    cfg.projection.k_in = 4;
    cfg.projection.k_out = 4;
    cfg
}

fn query(split: QuerySplit, mode: ScoreMode, k: usize) -> QueryRequest {
    QueryRequest {
        split,
        ids: None,
        mode,
        k,
        workers: None,
    }
}

#[test]
fn training_is_deterministic_and_zero_epochs_keeps_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    let a = cmd_train(&cfg).unwrap();
    let bytes_a = std::fs::read(&a.checkpoint).unwrap();
    let b = cmd_train(&cfg).unwrap();
    assert_eq!(bytes_a, std::fs::read(&b.checkpoint).unwrap());
    assert_eq!(a.digest, b.digest);

    cfg.train.epochs = 0;
    let z = cmd_train(&cfg).unwrap();
    assert_eq!(z.model, cfg.model.build(cfg.seed).unwrap());
    assert_ne!(z.digest, a.digest);
}

#[test]
fn missing_csv_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.data = DataSource::Csv {
        train: dir.path().join("nope.csv"),
        test: dir.path().join("nope2.csv"),
    };
    let e = cmd_train(&cfg).unwrap_err();
    assert!(matches!(e, Error::Config(_)));
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn unknown_configuration_keys_are_rejected() {
    assert!(RunConfig::from_json(r#"{"seed": 3}"#).is_ok());
    for bad in [
        r#"{"sed": 3}"#,
        r#"{"train": {"epoch": 3}}"#,
        r#"{"query": {"mode": "nearest"}}"#,
        r#"{"train": {"batch_size": 0}}"#,
    ] {
        let e = RunConfig::from_json(bad).unwrap_err();
        assert!(matches!(e, Error::Config(_)), "{bad}");
    }
}

#[test]
fn extraction_writes_one_record_per_example_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    cmd_train(&cfg).unwrap();
    let a = cmd_extract(&cfg).unwrap();
    assert_eq!(a.records, 60);
    let store = GradStore::open(&a.store).unwrap();
    assert_eq!(store.len(), 60);
    assert_eq!(store.ids(), (0..60).collect::<Vec<u64>>());
    let first = std::fs::read(&a.store).unwrap();
    drop(store);

    std::fs::remove_file(&a.store).unwrap();
    let b = cmd_extract(&cfg).unwrap();
    assert_eq!(a.fingerprint, b.fingerprint);
    assert_eq!(first, std::fs::read(&b.store).unwrap());
}

#[test]
fn extraction_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let e = cmd_extract(&cfg).unwrap_err();
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn pca_projections_need_fitted_covariances() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let t = cmd_train(&cfg).unwrap();
    let split = load_data(&cfg).unwrap();
    let ex = Extractor::new(&t.model, &split.train, 16);
    let e = ex.projections(logra::config::InitName::Pca, 2, 2, 0).unwrap_err();
    assert_eq!(e.exit_code(), 4);
    let mut ex = ex;
    ex.fit_covariances().unwrap();
    let set = ex.projections(logra::config::InitName::Pca, 2, 2, 0).unwrap();
    assert_eq!(set.pairs().len(), t.model.layers().len());
}

#[test]
fn separable_toy_retrieves_itself() {
    let dir = tempfile::tempdir().unwrap();
    // Two well separated clusters in 16 dimensions; with 2-d inputs the
    // per-example gradients of a small net span too few directions.
    let mut r = common::rng(5);
    let cluster = |n: usize, r: &mut _| -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let c = if i % 2 == 1 { 2.0 } else { -2.0 };
                let x: Vec<f64> = common::normal_vec(16, r).into_iter().map(|v| c + 0.5 * v).collect();
                Sample::classification(&x, i % 2)
            })
            .collect()
    };
    let train = cluster(12, &mut r);
    let test = cluster(4, &mut r);
    write_csv(&dir.path().join("train.csv"), &train).unwrap();
    write_csv(&dir.path().join("test.csv"), &test).unwrap();
    let mut cfg = small_config(dir.path());
    cfg.data = DataSource::Csv {
        train: dir.path().join("train.csv"),
        test: dir.path().join("test.csv"),
    };
    cfg.model.widths = vec![16, 32, 2];
    cfg.projection.k_in = 16;
    cfg.projection.k_out = 16;
    cfg.train.epochs = 1;
    // Enough projected dimensions to span all 12 gradients: with a dense, barely damped
    // curvature, influence approaches the hat matrix and each example is its
    // own best match.
    cfg.hessian.dense = true;
    cfg.hessian.damping = DampingConfig::Fixed(1e-6);
    cmd_train(&cfg).unwrap();
    cmd_extract(&cfg).unwrap();
    let self_hits = |cfg: &RunConfig, mode| {
        let r = cmd_query(cfg, &query(QuerySplit::Train, mode, 1)).unwrap();
        r.rows.iter().filter(|row| row.test_id == row.train_id).count()
    };
    assert_eq!(self_hits(&cfg, ScoreMode::Influence), 12);

    cfg.hessian = Default::default();
    cfg.train.epochs = 30;
    cfg.output_dir = dir.path().join("trained");
    cmd_train(&cfg).unwrap();
    cmd_extract(&cfg).unwrap();
    assert_eq!(self_hits(&cfg, ScoreMode::LRelatif), 12);
}

#[test]
fn query_report_shape_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    cmd_train(&cfg).unwrap();
    cmd_extract(&cfg).unwrap();

    let r = cmd_query(&cfg, &query(QuerySplit::Test, ScoreMode::LRelatif, 5)).unwrap();
    assert_eq!(r.rows.len(), 20 * 5);
    for w in r.rows.chunks(5) {
        assert!(w.windows(2).all(|p| p[0].score >= p[1].score));
        assert_eq!(w.iter().map(|x| x.rank).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
    }
    let csv = r.to_csv();
    assert!(csv.starts_with("test_id,rank,train_id,score,mode\n"));
    assert_eq!(csv.lines().count(), 101);

    let e = cmd_query(&cfg, &query(QuerySplit::Test, ScoreMode::Dot, 61)).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    let mut bad = query(QuerySplit::Test, ScoreMode::Dot, 1);
    bad.ids = Some(vec![20]);
    assert!(cmd_query(&cfg, &bad).is_err());
}

#[test]
fn curvature_changes_the_ranking() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.hessian.damping = DampingConfig::MeanEigenvalue(1e-3);
    cmd_train(&cfg).unwrap();
    cmd_extract(&cfg).unwrap();
    let all = |mode| cmd_query(&cfg, &query(QuerySplit::Test, mode, 60)).unwrap();
    let dot = all(ScoreMode::Dot);
    let inf = all(ScoreMode::Influence);
    let order = |r: &QueryReport| r.rows.iter().map(|x| x.train_id).collect::<Vec<_>>();
    assert_ne!(order(&dot), order(&inf));
}

#[test]
fn worker_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.store.batch_size = 7;
    cmd_train(&cfg).unwrap();
    cmd_extract(&cfg).unwrap();
    let mut q = query(QuerySplit::Test, ScoreMode::Cosine, 10);
    let one = {
        q.workers = Some(1);
        cmd_query(&cfg, &q).unwrap()
    };
    for w in [2, 4] {
        q.workers = Some(w);
        let r = cmd_query(&cfg, &q).unwrap();
        assert_eq!(r.to_csv(), one.to_csv());
    }
}

#[test]
fn stale_artifacts_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cmd_train(&cfg).unwrap();
    cmd_extract(&cfg).unwrap();

    // Retraining changes the checkpoint under the existing statistics and store.
    cfg.train.epochs = 11;
    cmd_train(&cfg).unwrap();
    let e = cmd_query(&cfg, &query(QuerySplit::Test, ScoreMode::Dot, 1)).unwrap_err();
    assert!(matches!(e, Error::Mismatch(_)), "{e}");
    assert_eq!(e.exit_code(), 3);

    // A store extracted with different projections cannot be appended to.
    cfg.projection.k_out = 2;
    let e = cmd_extract(&cfg).unwrap_err();
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn artifacts_are_inspectable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    cmd_train(&cfg).unwrap();
    cmd_extract(&cfg).unwrap();
    let s = cmd_inspect(&cfg.store_path()).unwrap();
    assert!(s.contains("records: 60"), "{s}");
    assert!(cmd_inspect(&cfg.statistics_path()).unwrap().contains("fingerprint"));
    assert!(cmd_inspect(&cfg.checkpoint_path()).unwrap().contains("checkpoint"));
    let p = load_projections(&cfg.projections_path()).unwrap();
    assert_eq!(p.0.set.pairs().len(), 2);
    assert_eq!(load_checkpoint(&cfg.checkpoint_path()).unwrap().0.layers().len(), 2);
}

#[test]
fn evaluation_summary_lists_every_method() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.eval.lds.subset_count = 10;
    cfg.eval.lds.seeds = vec![0];
    cfg.eval.reference_models = 2;
    cfg.eval.null_permutations = 20;
    cfg.eval.brittleness.sizes = vec![0, 3];
    cfg.eval.brittleness.seeds = vec![0, 1];
    cfg.eval.brittleness.tracked = 3;
    let methods = [Method::LograRandom, Method::GradDot, Method::RepSim];
    let cache = dir.path().join("cache");
    let s = cmd_eval(&cfg, &methods, Some(cache.clone())).unwrap();
    assert_eq!(s.valuation_retrains, 0);
    assert!(s.retrain_count >= 10);

    let text = std::fs::read_to_string(cfg.output_dir.join("eval_summary.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    for m in ["logra_random", "grad_dot", "rep_sim"] {
        let v = json["methods"][m]["lds_mean"].as_f64().unwrap();
        assert!((-1.0..=1.0).contains(&v), "{m}: {v}");
    }
    assert!(cfg.output_dir.join("lds.csv").exists());
    assert!(cfg.output_dir.join("brittleness.csv").exists());

    let again = cmd_eval(&cfg, &methods, Some(cache)).unwrap();
    assert_eq!(again.retrain_count, 0, "every retrain is cached");
    assert_eq!(again.methods, s.methods);
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_logra"))
}

#[test]
fn binary_exit_codes_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(
        &cfg_path,
        r#"{"data": {"synthetic": {"n_train": 30, "n_test": 10}}, "train": {"epochs": 3},
            "projection": {"k_in": 2, "k_out": 2}}"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    let run = |args: &[&str]| {
        bin()
            .args(args)
            .args(["--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .output()
            .unwrap()
    };
    assert_eq!(run(&["query"]).status.code(), Some(3), "nothing extracted yet");
    assert!(run(&["train", "--seed", "4"]).status.success());
    assert!(run(&["extract", "--seed", "4"]).status.success());
    let q = run(&["query", "--seed", "4", "-k", "3", "--mode", "cosine"]);
    assert!(q.status.success(), "{}", String::from_utf8_lossy(&q.stderr));
    let text = String::from_utf8(q.stdout).unwrap();
    assert_eq!(text.lines().count(), 1 + 10 * 3);
    assert!(text.lines().nth(1).unwrap().ends_with(",cosine"));

    // Same output directory, different seed: the checkpoint no longer matches.
    assert_eq!(run(&["query", "--seed", "5"]).status.code(), Some(3));
    assert_eq!(run(&["query", "--seed", "4", "--mode", "bogus"]).status.code(), Some(2));
    assert_eq!(run(&["query", "--seed", "4", "-k", "31"]).status.code(), Some(2));

    std::fs::write(&cfg_path, r#"{"unknown": 1}"#).unwrap();
    assert_eq!(run(&["train"]).status.code(), Some(2));

    let inspect = bin().args(["inspect", out.join("grads.lggs").to_str().unwrap()]).output().unwrap();
    assert!(String::from_utf8(inspect.stdout).unwrap().contains("records: 30"));
}
