use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;

use super::*;
use crate::numerics::{kron, sym_eig};
use crate::stats::{ekfac_correct, fit_projected_hessian, BlockLayout, Damping};
use crate::testutil::{dense_solve, max_rel_diff, random_matrix, random_spd, random_vec, rng};

fn hessian(blocks: Vec<(Matrix, f64)>) -> ProjectedHessian {
    ProjectedHessian::from_blocks(
        blocks
            .into_iter()
            .enumerate()
            .map(|(i, (h, l))| (alloc::format!("b{i}"), h, l))
            .collect(),
        1,
    )
    .unwrap()
}

fn rows(v: &[Vec<f64>]) -> Matrix {
    Matrix::from_rows(v)
}

#[test]
fn ihvp_examples() {
    let id = hessian(vec![(Matrix::identity(3), 0.0)]);
    assert_eq!(ihvp(&id, &[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);

    let d = hessian(vec![(Matrix::from_diag(&[1.0, 3.0]), 0.2)]);
    let x = ihvp(&d, &[1.0, 1.0]).unwrap();
    assert!((x[0] - 0.833_333_333_333_333_4).abs() < 1e-15);
    assert!((x[1] - 0.3125).abs() < 1e-15);

    let singular = hessian(vec![(Matrix::from_diag(&[1.0, 0.0]), 0.0)]);
    assert!(matches!(ihvp(&singular, &[1.0, 1.0]), Err(Error::Singular { .. })));
    assert!(ihvp(&d, &[1.0]).is_err());
}

#[test]
fn ihvp_matches_dense_block_solve() {
    let (a, b) = (random_spd(4, 1), random_spd(6, 2));
    let h = hessian(vec![(a.clone(), 0.3), (b.clone(), 0.05)]);
    let mut r = rng(3);
    let g = random_vec(10, &mut r);
    let mut dense = h.to_dense();
    for i in 0..10 {
        dense[(i, i)] += if i < 4 { 0.3 } else { 0.05 };
    }
    let want = dense_solve(&dense, &g);
    assert!(max_rel_diff(&ihvp(&h, &g).unwrap(), &want) < 1e-8);
}

#[test]
fn score_examples() {
    let id = hessian(vec![(Matrix::identity(2), 0.0)]);
    let s = score(&[7], &rows(&[vec![1.0, 0.0]]), &[9], &rows(&[vec![1.0, 0.0]]), Some(&id), ScoreMode::Influence)
        .unwrap();
    assert_eq!(s.scores[(0, 0)], 1.0);
    assert_eq!((s.test_ids.clone(), s.train_ids.clone()), (vec![7], vec![9]));

    let s = score(&[0], &rows(&[vec![1.0, 0.0]]), &[1], &rows(&[vec![4.0, 0.0]]), Some(&id), ScoreMode::LRelatif)
        .unwrap();
    assert_eq!(s.scores[(0, 0)], 1.0);
}

#[test]
fn normalized_modes_reject_zero_self_influence() {
    let id = hessian(vec![(Matrix::identity(2), 0.0)]);
    let err = score(
        &[0],
        &rows(&[vec![1.0, 0.0]]),
        &[1, 42],
        &rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]),
        Some(&id),
        ScoreMode::LRelatif,
    );
    assert_eq!(err, Err(Error::ZeroSelfInfluence { id: 42 }));
    let err = score(&[5], &rows(&[vec![0.0, 0.0]]), &[1], &rows(&[vec![1.0, 1.0]]), Some(&id), ScoreMode::Cosine);
    assert_eq!(err, Err(Error::ZeroSelfInfluence { id: 5 }));
}

#[test]
fn self_influence_examples() {
    let id = hessian(vec![(Matrix::identity(2), 0.0)]);
    assert_eq!(self_influence(&[3.0, 4.0], Some(&id)).unwrap(), 25.0);
    assert_eq!(self_influence(&[0.0, 0.0], Some(&id)).unwrap(), 0.0);
    assert_eq!(self_influence(&[3.0, 4.0], None).unwrap(), 25.0);

    let mut r = rng(4);
    let grads: Vec<Vec<f64>> = (0..12).map(|_| random_vec(5, &mut r)).collect();
    let h = fit_projected_hessian(grads.iter().map(|g| g.as_slice()), &BlockLayout::new(vec![("a".into(), 2), ("b".into(), 3)]), Damping::default()).unwrap();
    let ids: Vec<u64> = (0..12).collect();
    let m = rows(&grads);
    let s = score(&ids, &m, &ids, &m, Some(&h), ScoreMode::Influence).unwrap();
    for (i, g) in grads.iter().enumerate() {
        assert!((s.scores[(i, i)] - self_influence(g, Some(&h)).unwrap()).abs() < 1e-12);
        assert!(self_influence(g, Some(&h)).unwrap() >= 0.0);
    }
}

/// `Σ_i λ_i/(λ_i+λ) c_tr,i c_te,i` over the positive spectrum, with
/// `c_i = e_iᵀ g / √λ_i`.
fn spectral_influence(h: &Matrix, lambda: f64, g_te: &[f64], g_tr: &[f64]) -> f64 {
    let e = sym_eig(h).unwrap();
    let cutoff = 1e-10 * e.eigenvalues[0];
    let mut total = 0.0;
    for (i, &li) in e.eigenvalues.iter().enumerate() {
        if li <= cutoff {
            continue;
        }
        let ei = e.eigenvectors.col(i);
        let c_te = dot(&ei, g_te) / libm::sqrt(li);
        let c_tr = dot(&ei, g_tr) / libm::sqrt(li);
        total += li / (li + lambda) * c_te * c_tr;
    }
    total
}

#[test]
fn influence_matches_spectral_sum() {
    for (n, k) in [(50usize, 6usize), (8, 6), (200, 10)] {
        let mut r = rng(n as u64);
        let train: Vec<Vec<f64>> = (0..n).map(|_| random_vec(k, &mut r)).collect();
        let test: Vec<Vec<f64>> = (0..4).map(|_| random_vec(k, &mut r)).collect();
        let layout = BlockLayout::new(vec![("global".into(), k)]);
        let h = fit_projected_hessian(train.iter().map(|g| g.as_slice()), &layout, Damping::default()).unwrap();
        let lambda = h.blocks[0].damping;
        let ids_tr: Vec<u64> = (0..n as u64).collect();
        let s = score(&[0, 1, 2, 3], &rows(&test), &ids_tr, &rows(&train), Some(&h), ScoreMode::Influence).unwrap();
        for (a, gte) in test.iter().enumerate() {
            for (b, gtr) in train.iter().enumerate() {
                let want = spectral_influence(&h.blocks[0].h, lambda, gte, gtr);
                let got = s.scores[(a, b)];
                assert!((got - want).abs() <= 1e-8 * want.abs().max(1e-3), "{got} vs {want}");
            }
        }
    }
}

#[test]
fn coefficients_have_unit_second_moment() {
    let mut r = rng(21);
    let train: Vec<Vec<f64>> = (0..80).map(|_| random_vec(7, &mut r)).collect();
    let layout = BlockLayout::new(vec![("global".into(), 7)]);
    let h = fit_projected_hessian(train.iter().map(|g| g.as_slice()), &layout, Damping::default()).unwrap();
    let e = &h.blocks[0].eig;
    for (i, &li) in e.eigenvalues.iter().enumerate() {
        let ei = e.eigenvectors.col(i);
        let mean_c2: f64 = train
            .iter()
            .map(|g| {
                let c = dot(&ei, g) / libm::sqrt(li);
                c * c
            })
            .sum::<f64>()
            / train.len() as f64;
        assert!((mean_c2 - 1.0).abs() < 1e-6);
    }
}

#[test]
fn shrinkage_is_monotone() {
    let grid = [1e-6, 1e-3, 0.1, 1.0, 10.0, 1e3];
    for &li in &grid {
        for w in grid.windows(2) {
            assert!(damping_shrinkage(li, w[0]) > damping_shrinkage(li, w[1]));
            assert!(damping_shrinkage(w[0], li) < damping_shrinkage(w[1], li));
        }
    }
}

#[test]
fn influence_on_identical_sets_is_symmetric() {
    let mut r = rng(5);
    let grads: Vec<Vec<f64>> = (0..15).map(|_| random_vec(6, &mut r)).collect();
    let layout = BlockLayout::new(vec![("a".into(), 4), ("b".into(), 2)]);
    let h = fit_projected_hessian(grads.iter().map(|g| g.as_slice()), &layout, Damping::default()).unwrap();
    let ids: Vec<u64> = (0..15).collect();
    let s = score(&ids, &rows(&grads), &ids, &rows(&grads), Some(&h), ScoreMode::Influence).unwrap();
    assert!(s.scores.max_abs_diff(&s.scores.transpose()) < 1e-10);
}

#[test]
fn relatif_ignores_train_gradient_scale() {
    let mut r = rng(6);
    let train: Vec<Vec<f64>> = (0..10).map(|_| random_vec(5, &mut r)).collect();
    let test: Vec<Vec<f64>> = (0..3).map(|_| random_vec(5, &mut r)).collect();
    let layout = BlockLayout::new(vec![("g".into(), 5)]);
    let h = fit_projected_hessian(train.iter().map(|g| g.as_slice()), &layout, Damping::default()).unwrap();
    let ids: Vec<u64> = (0..10).collect();
    let base_rel = score(&[0, 1, 2], &rows(&test), &ids, &rows(&train), Some(&h), ScoreMode::LRelatif).unwrap();
    let base_raw = score(&[0, 1, 2], &rows(&test), &ids, &rows(&train), Some(&h), ScoreMode::Influence).unwrap();
    for alpha in [0.1, 10.0] {
        let mut scaled = train.clone();
        scaled[4].iter_mut().for_each(|v| *v *= alpha);
        let rel = score(&[0, 1, 2], &rows(&test), &ids, &rows(&scaled), Some(&h), ScoreMode::LRelatif).unwrap();
        let raw = score(&[0, 1, 2], &rows(&test), &ids, &rows(&scaled), Some(&h), ScoreMode::Influence).unwrap();
        for a in 0..3 {
            assert!((rel.scores[(a, 4)] - base_rel.scores[(a, 4)]).abs() < 1e-10);
            assert!((raw.scores[(a, 4)] - alpha * base_raw.scores[(a, 4)]).abs() < 1e-10);
        }
    }
}

#[test]
fn heavy_damping_reduces_to_scaled_dot() {
    let mut r = rng(7);
    let train: Vec<Vec<f64>> = (0..10).map(|_| random_vec(4, &mut r)).collect();
    let layout = BlockLayout::new(vec![("g".into(), 4)]);
    let h = fit_projected_hessian(train.iter().map(|g| g.as_slice()), &layout, Damping::Fixed(1e9)).unwrap();
    let ids: Vec<u64> = (0..10).collect();
    let infl = score(&ids, &rows(&train), &ids, &rows(&train), Some(&h), ScoreMode::Influence).unwrap();
    let dotm = score(&ids, &rows(&train), &ids, &rows(&train), Some(&h), ScoreMode::Dot).unwrap();
    for (x, y) in infl.scores.as_slice().iter().zip(dotm.scores.as_slice()) {
        let want = y / 1e9;
        assert!((x - want).abs() <= 1e-6 * want.abs());
    }
}

#[test]
fn cosine_of_parallel_gradients_is_one() {
    let id = hessian(vec![(Matrix::identity(2), 0.0)]);
    let s = score(&[0], &rows(&[vec![1.0, 2.0]]), &[1], &rows(&[vec![3.0, 6.0]]), Some(&id), ScoreMode::Cosine)
        .unwrap();
    assert!((s.scores[(0, 0)] - 1.0).abs() < 1e-15);
}

#[test]
fn topk_examples() {
    let sm = ScoreMatrix {
        test_ids: vec![0],
        train_ids: vec![10, 11, 12],
        scores: rows(&[vec![3.0, 1.0, 2.0]]),
        mode: ScoreMode::Dot,
    };
    assert_eq!(topk(&sm, 2).unwrap(), vec![vec![(10, 3.0), (12, 2.0)]]);
    assert!(topk(&sm, 4).is_err());
    let flat = ScoreMatrix {
        test_ids: vec![0],
        train_ids: vec![5, 2, 9, 1],
        scores: rows(&[vec![1.0; 4]]),
        mode: ScoreMode::Dot,
    };
    let ids: Vec<u64> = topk(&flat, 4).unwrap()[0].iter().map(|p| p.0).collect();
    assert_eq!(ids, vec![1, 2, 5, 9]);
}

proptest! {
    #[test]
    fn topk_is_prefix_of_full_sort(
        values in proptest::collection::vec(-5i32..5, 1..40),
        k_frac in 0.0f64..1.0,
    ) {
        let n = values.len();
        let k = ((n as f64) * k_frac) as usize;
        let ids: Vec<u64> = (0..n as u64).map(|i| (i * 7919) % 1009).collect();
        let sm = ScoreMatrix {
            test_ids: vec![0],
            train_ids: ids.clone(),
            scores: Matrix::new(1, n, values.iter().map(|&v| v as f64).collect()).unwrap(),
            mode: ScoreMode::Dot,
        };
        let mut full: Vec<(u64, f64)> = ids.iter().zip(&values).map(|(&i, &v)| (i, v as f64)).collect();
        full.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        full.truncate(k);
        prop_assert_eq!(topk(&sm, k).unwrap().remove(0), full);
    }
}

#[test]
fn batched_scoring_equals_single_pass() {
    let mut r = rng(8);
    let train: Vec<Vec<f64>> = (0..23).map(|_| random_vec(5, &mut r)).collect();
    let test: Vec<Vec<f64>> = (0..4).map(|_| random_vec(5, &mut r)).collect();
    let layout = BlockLayout::new(vec![("a".into(), 2), ("b".into(), 3)]);
    let h = fit_projected_hessian(train.iter().map(|g| g.as_slice()), &layout, Damping::default()).unwrap();
    let ids: Vec<u64> = (100..123).collect();
    let whole = score(&[0, 1, 2, 3], &rows(&test), &ids, &rows(&train), Some(&h), ScoreMode::LRelatif).unwrap();
    let engine = QueryEngine::new(Some(&h), ScoreMode::LRelatif, &[0, 1, 2, 3], &rows(&test)).unwrap();
    let batches = train
        .chunks(5)
        .zip(ids.chunks(5))
        .map(|(g, i)| (i.to_vec(), engine.score_batch(i, &rows(g)).unwrap()))
        .collect();
    let joined = ScoreMatrix::from_batches(vec![0, 1, 2, 3], ScoreMode::LRelatif, batches).unwrap();
    assert_eq!(joined, whole);
}

#[test]
fn ekfac_ihvp_matches_dense_eigenbasis_solve() {
    let f = KroneckerFactors::new("l".into(), random_spd(3, 1), random_spd(2, 2), 10).unwrap();
    let grads: Vec<Matrix> = (0..6).map(|s| random_matrix(2, 3, 40 + s)).collect();
    let e = ekfac_correct(&f, &grads).unwrap();
    let lambda = e.damping();
    // column-major vec(G) lives in Q_F ⊗ Q_B coordinates
    let q = kron(&f.eig_fwd.eigenvectors, &f.eig_bwd.eigenvectors);
    let diag = Matrix::from_diag(&e.corrected.vec_col_major());
    let mut h = q.matmul(&diag).unwrap().matmul(&q.transpose()).unwrap();
    for i in 0..6 {
        h[(i, i)] += lambda;
    }
    let g = random_matrix(2, 3, 99);
    let want = dense_solve(&h, &g.vec_col_major());
    let got = ekfac_ihvp(&f, &e, &g).unwrap().vec_col_major();
    assert!(max_rel_diff(&got, &want) < 1e-8);
}
