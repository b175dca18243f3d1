//! Scoring test gradients against stored or in-memory train gradients.
//!
//! Work is split by fixed row ranges and joined back in range order, so the
//! result does not depend on how many threads ran it.

use logra_core::influence::{QueryEngine, ScoreMatrix, ScoreMode};
use logra_core::stats::ProjectedHessian;
use logra_core::Matrix;
use rayon::prelude::*;

use crate::error::Result;
use crate::gradstore::{GradStore, ScanOptions};

/// Train rows scored per parallel task.
pub const ROWS_PER_TASK: usize = 256;

fn row_slice(m: &Matrix, start: usize, end: usize) -> Matrix {
    let c = m.cols();
    Matrix::new(end - start, c, m.as_slice()[start * c..end * c].to_vec()).expect("rows of a finite matrix")
}

/// `tests x batch` scores for one batch of train gradients.
pub fn score_batch(engine: &QueryEngine<'_>, ids: &[u64], grads: &Matrix) -> Result<Matrix> {
    let n = ids.len();
    if n <= ROWS_PER_TASK {
        return Ok(engine.score_batch(ids, grads)?);
    }
    let ranges: Vec<(usize, usize)> = (0..n)
        .step_by(ROWS_PER_TASK)
        .map(|s| (s, (s + ROWS_PER_TASK).min(n)))
        .collect();
    let parts = ranges
        .par_iter()
        .map(|&(s, e)| engine.score_batch(&ids[s..e], &row_slice(grads, s, e)))
        .collect::<Result<Vec<_>, _>>()?;
    let tests = engine.test_ids().len();
    let mut out = Matrix::zeros(tests, n);
    for ((s, e), part) in ranges.iter().zip(parts) {
        for a in 0..tests {
            out.row_mut(a)[*s..*e].copy_from_slice(part.row(a));
        }
    }
    Ok(out)
}

/// Streams the store and scores every record against the prepared queries.
pub fn score_store(engine: &QueryEngine<'_>, store: &GradStore, opts: ScanOptions) -> Result<ScoreMatrix> {
    let mut batches = Vec::new();
    for b in store.scan_with(opts) {
        let (ids, grads) = b?;
        let block = score_batch(engine, &ids, &grads)?;
        batches.push((ids, block));
    }
    Ok(ScoreMatrix::from_batches(engine.test_ids().to_vec(), engine.mode(), batches)?)
}

/// Convenience wrapper: prepare the queries and scan the store.
pub fn query_store(
    store: &GradStore,
    hessian: Option<&ProjectedHessian>,
    mode: ScoreMode,
    test_ids: &[u64],
    test_grads: &Matrix,
    opts: ScanOptions,
) -> Result<ScoreMatrix> {
    let engine = QueryEngine::new(hessian, mode, test_ids, test_grads)?;
    score_store(&engine, store, opts)
}

/// Same scores from gradients held in memory, one row per train example.
pub fn query_memory(
    train_ids: &[u64],
    train_grads: &Matrix,
    hessian: Option<&ProjectedHessian>,
    mode: ScoreMode,
    test_ids: &[u64],
    test_grads: &Matrix,
) -> Result<ScoreMatrix> {
    let engine = QueryEngine::new(hessian, mode, test_ids, test_grads)?;
    let block = score_batch(&engine, train_ids, train_grads)?;
    Ok(ScoreMatrix::from_batches(test_ids.to_vec(), mode, vec![(train_ids.to_vec(), block)])?)
}

/// Stack equally long rows into a matrix.
pub fn stack(rows: &[Vec<f64>]) -> Result<Matrix> {
    let cols = rows.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        if r.len() != cols {
            return Err(logra_core::Error::DimensionMismatch {
                context: "stacked row length",
                expected: cols,
                found: r.len(),
            }
            .into());
        }
        data.extend_from_slice(r);
    }
    Ok(Matrix::new(rows.len(), cols, data)?)
}
