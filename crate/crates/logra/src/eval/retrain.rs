use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use logra_core::nn::{forward, loss_and_grads, train, Activation, LossKind, Model, Sample, TrainConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{combine, hex, sha256, Digest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenActivation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    CrossEntropy,
    MeanSquaredError,
}

/// Architecture of a fully connected network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub widths: Vec<usize>,
    pub hidden: HiddenActivation,
    pub bias: bool,
    pub loss: LossName,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            widths: vec![2, 32, 2],
            hidden: HiddenActivation::Relu,
            bias: true,
            loss: LossName::CrossEntropy,
        }
    }
}

impl ModelSpec {
    pub fn build(&self, seed: u64) -> Result<Model> {
        let hidden = match self.hidden {
            HiddenActivation::Relu => Activation::Relu,
            HiddenActivation::Identity => Activation::Identity,
        };
        let loss = match self.loss {
            LossName::CrossEntropy => LossKind::CrossEntropy,
            LossName::MeanSquaredError => LossKind::MeanSquaredError,
        };
        Model::mlp(&self.widths, hidden, self.bias, loss, seed).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Digest of sample inputs and targets.
pub fn dataset_digest(samples: &[Sample]) -> Digest {
    let mut bytes = Vec::new();
    for s in samples {
        bytes.extend((s.inputs.rows() as u64).to_le_bytes());
        bytes.extend((s.inputs.cols() as u64).to_le_bytes());
        for v in s.inputs.as_slice() {
            bytes.extend(v.to_le_bytes());
        }
        bytes.extend(format!("{:?}", s.targets).as_bytes());
    }
    sha256(&bytes)
}

/// How a retrained model does on each test example.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub losses: Vec<f64>,
    pub predictions: Vec<usize>,
    /// Output of the true class minus the best other output; negative when misclassified.
    pub margins: Vec<f64>,
}

impl Outcome {
    fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(8 + self.losses.len() * 24);
        b.extend((self.losses.len() as u64).to_le_bytes());
        for i in 0..self.losses.len() {
            b.extend(self.losses[i].to_le_bytes());
            b.extend((self.predictions[i] as u64).to_le_bytes());
            b.extend(self.margins[i].to_le_bytes());
        }
        b
    }

    fn decode(b: &[u8]) -> Option<Self> {
        let word = |i: usize| b.get(i * 8..i * 8 + 8).map(|s| s.try_into().unwrap());
        let n = u64::from_le_bytes(word(0)?) as usize;
        if b.len() != 8 + n * 24 {
            return None;
        }
        let mut o = Outcome {
            losses: Vec::with_capacity(n),
            predictions: Vec::with_capacity(n),
            margins: Vec::with_capacity(n),
        };
        for i in 0..n {
            o.losses.push(f64::from_le_bytes(word(1 + 3 * i)?));
            o.predictions.push(u64::from_le_bytes(word(2 + 3 * i)?) as usize);
            o.margins.push(f64::from_le_bytes(word(3 + 3 * i)?));
        }
        Some(o)
    }
}

fn evaluate(model: &Model, test: &[Sample]) -> Result<Outcome> {
    let pass = forward(model, test)?;
    let (losses, _) = loss_and_grads(model.loss_kind(), &pass.outputs, test)?;
    let mut predictions = Vec::with_capacity(test.len());
    let mut margins = Vec::with_capacity(test.len());
    for (out, s) in pass.outputs.iter().zip(test) {
        let row = out.row(0);
        let best = row
            .iter()
            .enumerate()
            .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
        predictions.push(best);
        let margin = match s.class() {
            Some(c) if c < row.len() => {
                let other = row
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != c)
                    .map(|(_, &v)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                row[c] - other
            }
            _ => 0.0,
        };
        margins.push(margin);
    }
    Ok(Outcome {
        losses,
        predictions,
        margins,
    })
}

/// Retrains models on subsets of the train set, with a content-addressed
/// cache of outcomes on the test set.
///
/// Cache keys cover the subset, the seed, the training configuration, the
/// architecture and both datasets.
pub struct Retrainer<'a> {
    spec: ModelSpec,
    cfg: TrainConfig,
    train: &'a [Sample],
    test: &'a [Sample],
    cache_dir: Option<PathBuf>,
    base_key: Digest,
    trained: AtomicU64,
    memo: Mutex<HashMap<Digest, Outcome>>,
}

impl<'a> Retrainer<'a> {
    pub fn new(
        spec: ModelSpec,
        cfg: TrainConfig,
        train: &'a [Sample],
        test: &'a [Sample],
        cache_dir: Option<PathBuf>,
    ) -> Self {
        let base_key = combine(&[
            format!("{spec:?}").as_bytes(),
            format!("{:?}", TrainConfig { seed: 0, ..cfg.clone() }).as_bytes(),
            &dataset_digest(train),
            &dataset_digest(test),
        ]);
        Self {
            spec,
            cfg,
            train,
            test,
            cache_dir,
            base_key,
            trained: AtomicU64::new(0),
            memo: Mutex::new(HashMap::new()),
        }
    }

    pub fn train_set(&self) -> &'a [Sample] {
        self.train
    }

    pub fn test_set(&self) -> &'a [Sample] {
        self.test
    }

    /// Models actually trained so far; cache hits do not count.
    pub fn retrain_count(&self) -> u64 {
        self.trained.load(Ordering::SeqCst)
    }

    fn key(&self, subset: &[usize], seed: u64) -> Digest {
        let mut sorted = subset.to_vec();
        sorted.sort_unstable();
        let bytes: Vec<u8> = sorted.iter().flat_map(|&i| (i as u64).to_le_bytes()).collect();
        combine(&[&self.base_key, &seed.to_le_bytes(), &sha256(&bytes)])
    }

    fn cache_file(&self, key: &Digest) -> Option<PathBuf> {
        self.cache_dir.as_ref().map(|d| d.join(format!("{}.bin", hex(key))))
    }

    /// The model trained on `subset` (indices into the train set) from seed `seed`.
    pub fn fit(&self, subset: &[usize], seed: u64) -> Result<Model> {
        let data: Vec<Sample> = subset.iter().map(|&i| self.train[i].clone()).collect();
        let init = self.spec.build(seed)?;
        let cfg = TrainConfig { seed, ..self.cfg.clone() };
        Ok(train(&init, &data, &cfg)?)
    }

    pub fn run(&self, subset: &[usize], seed: u64) -> Result<Outcome> {
        if let Some(&bad) = subset.iter().find(|&&i| i >= self.train.len()) {
            return Err(Error::Config(format!("subset index {bad} out of range")));
        }
        let key = self.key(subset, seed);
        if let Some(o) = self.memo.lock().unwrap().get(&key) {
            return Ok(o.clone());
        }
        let file = self.cache_file(&key);
        if let Some(o) = file.as_deref().and_then(|f| fs::read(f).ok()).and_then(|b| Outcome::decode(&b)) {
            if o.losses.len() == self.test.len() {
                self.memo.lock().unwrap().insert(key, o.clone());
                return Ok(o);
            }
        }
        let model = self.fit(subset, seed)?;
        self.trained.fetch_add(1, Ordering::SeqCst);
        let outcome = evaluate(&model, self.test)?;
        if let Some(f) = file {
            write_atomic(&f, &outcome.encode())?;
        }
        self.memo.lock().unwrap().insert(key, outcome.clone());
        Ok(outcome)
    }

    /// Runs every job in parallel; results come back in job order.
    pub fn run_many(&self, jobs: &[(Vec<usize>, u64)]) -> Result<Vec<Outcome>> {
        // Identical jobs are trained once.
        let mut first: HashMap<Digest, usize> = HashMap::new();
        let keys: Vec<Digest> = jobs.iter().map(|(s, seed)| self.key(s, *seed)).collect();
        let unique: Vec<usize> = (0..jobs.len()).filter(|&i| first.insert(keys[i], i).is_none()).collect();
        unique
            .par_iter()
            .map(|&i| self.run(&jobs[i].0, jobs[i].1).map(|_| ()))
            .collect::<Result<Vec<()>>>()?;
        let memo = self.memo.lock().unwrap();
        Ok(keys.iter().map(|k| memo[k].clone()).collect())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
