use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::nn::{forward, Activation, LossKind};
use crate::numerics::kron;
use crate::testutil::{random_spd, random_vec, rng};

fn trace_of(xs: &[&[f64]], ds: &[&[f64]]) -> LayerTrace {
    LayerTrace {
        layer_name: "l".into(),
        fwd_inputs: xs.iter().map(|x| Matrix::from_rows(&[*x])).collect(),
        bwd_outgrads: ds.iter().map(|d| Matrix::from_rows(&[*d])).collect(),
    }
}

#[test]
fn single_token_covariance() {
    let mut acc = CovarianceAccumulator::new("l", 2, 1);
    acc.accumulate(&trace_of(&[&[1.0, 2.0]], &[&[3.0]])).unwrap();
    let f = acc.factors().unwrap();
    assert_eq!(f.c_fwd, Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0]]));
    assert_eq!(f.c_bwd, Matrix::from_rows(&[[9.0]]));
    assert_eq!(f.token_count, 1);
}

#[test]
fn equal_batches_average_to_the_same() {
    let t = trace_of(&[&[1.0, 2.0], &[0.5, -1.0]], &[&[3.0], &[1.0]]);
    let mut once = CovarianceAccumulator::new("l", 2, 1);
    once.accumulate(&t).unwrap();
    let mut twice = once.clone();
    twice.accumulate(&t).unwrap();
    let (a, b) = (once.factors().unwrap(), twice.factors().unwrap());
    assert!(a.c_fwd.max_abs_diff(&b.c_fwd) < 1e-15);
    assert!(a.c_bwd.max_abs_diff(&b.c_bwd) < 1e-15);
}

#[test]
fn streaming_and_merging_match_one_batch() {
    let model = Model::mlp(&[3, 5, 2], Activation::Relu, true, LossKind::CrossEntropy, 2).unwrap();
    let mut r = rng(8);
    let data: Vec<Sample> = (0..12)
        .map(|i| Sample::classification(&random_vec(3, &mut r), i % 2))
        .collect();
    let whole = fit_kronecker_factors(&model, &data, 12).unwrap();
    let streamed = fit_kronecker_factors(&model, &data, 4).unwrap();
    for (a, b) in whole.iter().zip(&streamed) {
        assert!(a.c_fwd.max_abs_diff(&b.c_fwd) < 1e-12);
        assert!(a.c_bwd.max_abs_diff(&b.c_bwd) < 1e-12);
        assert_eq!(a.token_count, 12);
    }

    // shards merged in either grouping equal sequential accumulation
    let shard = |range: core::ops::Range<usize>| {
        let (pass, _) = capture(&model, &data[range]).unwrap();
        let mut acc = CovarianceAccumulator::new("fc0", 3, 5);
        acc.accumulate(&pass.traces[0]).unwrap();
        acc
    };
    let (a, b, c) = (shard(0..4), shard(4..8), shard(8..12));
    let mut left = a.clone();
    left.merge(&b).unwrap();
    left.merge(&c).unwrap();
    let mut bc = b.clone();
    bc.merge(&c).unwrap();
    let mut right = a.clone();
    right.merge(&bc).unwrap();
    let (l, r) = (left.factors().unwrap(), right.factors().unwrap());
    assert!(l.c_fwd.max_abs_diff(&whole[0].c_fwd) < 1e-12);
    assert!(l.c_fwd.max_abs_diff(&r.c_fwd) < 1e-12);
    assert!(l.c_bwd.max_abs_diff(&r.c_bwd) < 1e-12);
}

#[test]
fn accumulate_errors() {
    let mut acc = CovarianceAccumulator::new("l", 2, 1);
    let mut t = trace_of(&[&[1.0, 2.0]], &[&[3.0]]);
    t.bwd_outgrads.clear();
    assert!(matches!(acc.accumulate(&t), Err(Error::MissingTraces(_))));
    let drift = trace_of(&[&[1.0, 2.0, 3.0]], &[&[3.0]]);
    assert!(matches!(acc.accumulate(&drift), Err(Error::DimensionMismatch { .. })));
    assert!(acc.factors().is_err());

    let model = Model::mlp(&[2, 2], Activation::Relu, true, LossKind::CrossEntropy, 0).unwrap();
    let pass = forward(&model, &[Sample::classification(&[1.0, 1.0], 0)]).unwrap();
    let mut acc = CovarianceAccumulator::new("fc0", 2, 2);
    assert!(acc.accumulate(&pass.traces[0]).is_err());
}

fn layout(dims: &[usize]) -> BlockLayout {
    BlockLayout::new(dims.iter().enumerate().map(|(i, d)| (alloc::format!("b{i}"), *d)).collect())
}

#[test]
fn projected_hessian_examples() {
    let h = fit_projected_hessian([&[1.0, 1.0][..]], &layout(&[2]), Damping::default()).unwrap();
    assert_eq!(h.blocks[0].h, Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]));
    assert_eq!(h.sample_count, 1);

    let n = 3.0f64;
    let s = libm::sqrt(n);
    let basis = [vec![s, 0.0, 0.0], vec![0.0, s, 0.0], vec![0.0, 0.0, s]];
    let h = fit_projected_hessian(basis.iter().map(|g| g.as_slice()), &layout(&[3]), Damping::default())
        .unwrap();
    assert!(h.blocks[0].h.max_abs_diff(&Matrix::identity(3)) < 1e-15);

    assert!(fit_projected_hessian(core::iter::empty(), &layout(&[2]), Damping::default()).is_err());
}

#[test]
fn projected_hessian_matches_outer_product_sum() {
    let mut r = rng(3);
    let grads: Vec<Vec<f64>> = (0..20).map(|_| random_vec(7, &mut r)).collect();
    let lay = layout(&[3, 4]);
    let h = fit_projected_hessian(grads.iter().map(|g| g.as_slice()), &lay, Damping::default()).unwrap();
    let mut dense = Matrix::zeros(7, 7);
    for g in &grads {
        for i in 0..7 {
            for j in 0..7 {
                dense[(i, j)] += g[i] * g[j] / 20.0;
            }
        }
    }
    let bd = h.to_dense();
    for i in 0..7 {
        for j in 0..7 {
            let same_block = (i < 3) == (j < 3);
            let want = if same_block { dense[(i, j)] } else { 0.0 };
            assert!((bd[(i, j)] - want).abs() < 1e-12);
        }
    }
    let full = fit_projected_hessian(grads.iter().map(|g| g.as_slice()), &lay.dense(), Damping::default())
        .unwrap();
    assert_eq!(full.blocks.len(), 1);
    assert!(full.blocks[0].h.max_abs_diff(&dense) < 1e-12);
    for b in h.blocks.iter().chain(&full.blocks) {
        assert!(*b.eig.eigenvalues.last().unwrap() >= -1e-10);
    }
}

#[test]
fn hessian_accumulator_merge() {
    let mut r = rng(4);
    let grads: Vec<Vec<f64>> = (0..9).map(|_| random_vec(5, &mut r)).collect();
    let lay = layout(&[2, 3]);
    let mut a = HessianAccumulator::new(lay.clone());
    let mut b = HessianAccumulator::new(lay.clone());
    for (i, g) in grads.iter().enumerate() {
        if i < 4 { a.add(g).unwrap() } else { b.add(g).unwrap() }
    }
    a.merge(&b).unwrap();
    let merged = a.finish(Damping::default()).unwrap();
    let seq = fit_projected_hessian(grads.iter().map(|g| g.as_slice()), &lay, Damping::default()).unwrap();
    assert!(merged.to_dense().max_abs_diff(&seq.to_dense()) < 1e-12);
    assert!(a.add(&[1.0]).is_err());
}

#[test]
fn damping_examples() {
    assert!((damping_from_values(&[1.0, 3.0]) - 0.2).abs() < 1e-15);
    assert_eq!(damping_from_values(&[0.0, 0.0, 0.0]), 1e-12);
    assert_eq!(damping_from_values(&[10.0]), 1.0);
    let eig = sym_eig(&Matrix::from_diag(&[1.0, 3.0])).unwrap();
    assert_eq!(damping_from(&eig), damping_from_values(&[3.0, 1.0]));
}

#[test]
fn hessian_damping_readback() {
    let mut r = rng(5);
    let grads: Vec<Vec<f64>> = (0..30).map(|_| random_vec(6, &mut r)).collect();
    let mut h = fit_projected_hessian(grads.iter().map(|g| g.as_slice()), &layout(&[2, 4]), Damping::default())
        .unwrap();
    for b in &h.blocks {
        let mean = b.eig.eigenvalues.iter().sum::<f64>() / b.dim() as f64;
        assert!((b.damping - 0.1 * mean).abs() <= 1e-15 * mean);
        assert!((b.damping - 0.1 * b.h.trace() / b.dim() as f64).abs() < 1e-12);
    }
    h.set_damping(Damping::Fixed(0.5)).unwrap();
    assert!(h.blocks.iter().all(|b| b.damping == 0.5));
    assert!(h.set_damping(Damping::Fixed(-1.0)).is_err());
}

#[test]
fn kfac_eigenvalue_examples() {
    let f = KroneckerFactors::new("l".into(), Matrix::from_diag(&[1.0, 4.0]), Matrix::from_diag(&[2.0, 3.0]), 1)
        .unwrap();
    assert_eq!(kfac_eigenvalues(&f), vec![12.0, 8.0, 3.0, 2.0]);

    let u = [1.0, 2.0, -1.0];
    let mut rank1 = Matrix::zeros(3, 3);
    rank1.add_outer(&u, &u);
    let f = KroneckerFactors::new("l".into(), rank1.clone(), rank1, 1).unwrap();
    let ev = kfac_eigenvalues(&f);
    assert!((ev[0] - 36.0).abs() < 1e-10);
    assert!(ev[1..].iter().all(|v| v.abs() < 1e-10));
}

#[test]
fn kfac_eigenvalues_match_dense_kron() {
    for seed in 0..5 {
        let (cf, cb) = (random_spd(3, seed), random_spd(3, seed + 50));
        let f = KroneckerFactors::new("l".into(), cf.clone(), cb.clone(), 1).unwrap();
        let dense = sym_eig(&kron(&cf, &cb)).unwrap().eigenvalues;
        let products = kfac_eigenvalues(&f);
        let scale = dense[0];
        for (a, b) in dense.iter().zip(&products) {
            assert!((a - b).abs() <= 1e-8 * scale);
        }
    }
}

#[test]
fn ekfac_identity_basis_squares_gradient() {
    let f = KroneckerFactors::new("l".into(), Matrix::identity(2), Matrix::identity(3), 1).unwrap();
    let g = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0], [0.0, -1.0]]);
    let e = ekfac_correct(&f, core::slice::from_ref(&g)).unwrap();
    assert_eq!(e.corrected, Matrix::from_rows(&[[1.0, 4.0], [0.25, 9.0], [0.0, 1.0]]));

    let zero = ekfac_correct(&f, &[Matrix::zeros(3, 2), Matrix::zeros(3, 2)]).unwrap();
    assert!(zero.corrected.as_slice().iter().all(|&v| v == 0.0));
    assert!(ekfac_correct(&f, &[Matrix::zeros(2, 2)]).is_err());
}

#[test]
fn ekfac_recovers_eigenbasis_variances() {
    // G = Q_B (S ⊙ Z) Q_Fᵀ has second moments S² in the eigenbasis.
    let f = KroneckerFactors::new("l".into(), random_spd(3, 1), random_spd(2, 2), 1).unwrap();
    let target = Matrix::from_rows(&[[4.0, 1.0, 0.25], [2.0, 0.5, 9.0]]);
    let qb = &f.eig_bwd.eigenvectors;
    let qft = f.eig_fwd.eigenvectors.transpose();
    let mut r = rng(99);
    let grads: Vec<Matrix> = (0..10_000)
        .map(|_| {
            let mut inner = Matrix::zeros(2, 3);
            for (v, t) in inner.as_mut_slice().iter_mut().zip(target.as_slice()) {
                let z: f64 = r.sample(StandardNormal);
                *v = libm::sqrt(*t) * z;
            }
            qb.matmul(&inner).unwrap().matmul(&qft).unwrap()
        })
        .collect();
    let e = ekfac_correct(&f, &grads).unwrap();
    for (c, t) in e.corrected.as_slice().iter().zip(target.as_slice()) {
        assert!((c - t).abs() <= 0.1 * t, "{c} vs {t}");
    }
}
