use std::sync::Arc;

use graphal_core::active::{
    acquire_mc, acquire_mcvopt, acquire_uncertainty, acquire_vopt, covariance_update, init_covariance,
};
use graphal_core::graph::{build_graph, laplacian, GraphConfig, Kernel, LaplacianKind, Metric, SimilarityGraph};
use graphal_core::spectral::{graph_spectrum, SpectralData, SpectralOptions};
use graphal_core::ssl::{classify, gr_solve, harmonic_residual, laplace_learn, LabelState};
use graphal_core::{FeatureMatrix, Error};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_graph(n: usize, k: usize, seed: u64) -> Option<SimilarityGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..3).map(|_| rng.random::<f64>()).collect())
        .collect();
    let x = FeatureMatrix::from_rows(&rows).unwrap();
    let cfg = GraphConfig {
        k,
        metric: Metric::Euclidean,
        kernel: Kernel::SelfTuning,
    };
    match build_graph(&x, &cfg) {
        Ok(g) => Some(g),
        Err(Error::Disconnected { .. }) => None,
        Err(e) => panic!("{e}"),
    }
}

fn random_labels(n: usize, classes: usize, count: usize, seed: u64) -> LabelState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut state = LabelState::new(n, classes).unwrap();
    // make sure every class appears at least once
    let mut c = 0;
    while state.len() < count {
        let i = rng.random_range(0..n);
        if !state.is_labeled(i) {
            state.insert(i, c % classes).unwrap();
            c += 1;
        }
    }
    state
}

/// Exact eigendecomposition of the dense Laplacian, ascending.
fn dense_spectrum(g: &SimilarityGraph) -> SpectralData {
    let l = laplacian(g, LaplacianKind::Unnormalized).unwrap().to_dense();
    let eig = l.symmetric_eigen();
    let mut order: Vec<usize> = (0..g.n()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let vectors = DMatrix::from_fn(g.n(), g.n(), |r, c| eig.eigenvectors[(r, order[c])]);
    SpectralData::new(LaplacianKind::Unnormalized, values, vectors).unwrap()
}

/// `(L + P^T P / gamma^2)^{-1}` by dense inversion.
fn dense_gr_covariance(g: &SimilarityGraph, labeled: &[usize], gamma: f64) -> DMatrix<f64> {
    let mut a = laplacian(g, LaplacianKind::Unnormalized).unwrap().to_dense();
    for &j in labeled {
        a[(j, j)] += 1.0 / (gamma * gamma);
    }
    a.try_inverse().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn harmonic_extension_properties(n in 30usize..120, seed in any::<u64>(), labels in 2usize..8) {
        let g = random_graph(n, 8, seed);
        prop_assume!(g.is_some());
        let g = g.unwrap();
        let state = random_labels(n, 3, labels.max(3), seed);
        let u = laplace_learn(&g, &state, 1e-12).unwrap();
        prop_assert!(harmonic_residual(&g, &state, &u) <= 1e-8);
        for &j in state.labeled() {
            let row = u.row(j);
            for (c, &v) in row.iter().enumerate() {
                prop_assert_eq!(v, if Some(c) == state.label(j) { 1.0 } else { 0.0 });
            }
        }
        // constants are harmonic, so every row sums to one and stays in [0, 1]
        for i in 0..n {
            let row = u.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-8);
            prop_assert!(row.iter().all(|&v| (-1e-10..=1.0 + 1e-10).contains(&v)));
        }
    }

    #[test]
    fn vopt_equals_trace_reduction(n in 12usize..40, seed in any::<u64>()) {
        let g = random_graph(n, 6, seed);
        prop_assume!(g.is_some());
        let g = g.unwrap();
        let gamma = 0.5;
        let state = random_labels(n, 2, 2, seed);
        let spectral = graph_spectrum(&g, LaplacianKind::Unnormalized, &SpectralOptions { seed, ..SpectralOptions::with_m(n) }).unwrap();
        let cov = init_covariance(Arc::new(spectral), &state, gamma).unwrap();
        let pool: Vec<usize> = state.unlabeled().collect();
        let values = acquire_vopt(&cov, &pool);
        let base = dense_gr_covariance(&g, state.labeled(), gamma).trace();
        for (&i, &v) in pool.iter().zip(&values) {
            let mut with_i = state.labeled().to_vec();
            with_i.push(i);
            let reduced = base - dense_gr_covariance(&g, &with_i, gamma).trace();
            prop_assert!((v - reduced).abs() <= 1e-6 * reduced.abs().max(1e-12), "node {}: {} vs {}", i, v, reduced);
        }
    }

    #[test]
    fn acquisitions_are_non_negative(n in 30usize..80, seed in any::<u64>()) {
        let g = random_graph(n, 8, seed);
        prop_assume!(g.is_some());
        let g = g.unwrap();
        let state = random_labels(n, 3, 4, seed);
        let spectral = Arc::new(dense_spectrum(&g).truncated(n / 2).unwrap());
        let cov = init_covariance(spectral, &state, 0.5).unwrap();
        let u = laplace_learn(&g, &state, 1e-10).unwrap();
        let pool: Vec<usize> = (0..n).collect();
        let unc = acquire_uncertainty(&u, &pool).unwrap();
        prop_assert!(unc.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
        for values in [acquire_vopt(&cov, &pool), acquire_mc(&u, &cov, &pool), acquire_mcvopt(&u, &cov, &pool)] {
            prop_assert!(values.iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn woodbury_matches_recomputation() {
    let n = 400;
    let g = random_graph(n, 12, 3).expect("connected");
    let spectral = Arc::new(dense_spectrum(&g).truncated(100).unwrap());
    let mut state = random_labels(n, 4, 4, 3);
    let mut cov = init_covariance(spectral.clone(), &state, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut applied = 0;
    while applied < 50 {
        let i = rng.random_range(0..n);
        if state.is_labeled(i) {
            continue;
        }
        let before = cov.trace();
        cov = covariance_update(cov, i).unwrap();
        state.insert(i, 0).unwrap();
        assert!(cov.trace() < before, "trace must drop after labeling {i}");
        applied += 1;
    }
    let fresh = init_covariance(spectral, &state, 0.5).unwrap();
    let diff = (cov.sigma() - fresh.sigma()).norm();
    assert!(diff <= 1e-8, "Frobenius gap {diff:e}");
    let sym = (cov.sigma() - cov.sigma().transpose()).amax();
    assert!(sym <= 1e-10);
    assert!(cov.sigma().diagonal().iter().all(|&d| d > 0.0));
}

#[test]
fn mc_factorwise_on_ten_nodes() {
    let g = random_graph(10, 4, 21).expect("connected");
    let spectral = dense_spectrum(&g).truncated(6).unwrap();
    let v = spectral.vectors().clone();
    let state = LabelState::from_pairs(10, 2, &[(0, 0), (5, 1)]).unwrap();
    let gamma = 0.5;
    let cov = init_covariance(Arc::new(spectral.clone()), &state, gamma).unwrap();
    let u = laplace_learn(&g, &state, 1e-12).unwrap();
    let pred = classify(&u);
    let pool: Vec<usize> = state.unlabeled().collect();
    let mc = acquire_mc(&u, &cov, &pool);
    let mcv = acquire_mcvopt(&u, &cov, &pool);

    // Sigma recomputed directly, independent of the stored state
    let mut precision = DMatrix::from_diagonal(&DVector::from_column_slice(spectral.eigenvalues()));
    for &j in state.labeled() {
        let vj = v.row(j).transpose();
        precision += &vj * vj.transpose() / (gamma * gamma);
    }
    let sigma = precision.try_inverse().unwrap();
    for (p, &i) in pool.iter().enumerate() {
        let vi = v.row(i).transpose();
        let s = &sigma * &vi;
        let denom = gamma * gamma + vi.dot(&s);
        let mut target = DVector::zeros(2);
        target[pred.classes[i]] = 1.0;
        let change = (DVector::from_column_slice(u.row(i)) - target).norm();
        let expect = change * s.norm() / denom;
        assert!((mc[p] - expect).abs() <= 1e-10 * expect.max(1.0), "node {i}");
        let expect_v = change * s.norm_squared() / denom;
        assert!((mcv[p] - expect_v).abs() <= 1e-10 * expect_v.max(1.0));
        assert!((mcv[p] - mc[p] * s.norm()).abs() <= 1e-10 * mcv[p].max(1.0));
    }
}

#[test]
fn laplace_and_gr_match_dense_solves() {
    let n = 80;
    let g = random_graph(n, 8, 5).expect("connected");
    let state = random_labels(n, 3, 6, 5);
    let l = laplacian(&g, LaplacianKind::Unnormalized).unwrap().to_dense();
    let labeled = state.labeled().to_vec();
    let unlabeled: Vec<usize> = state.unlabeled().collect();
    let y = DMatrix::from_row_slice(labeled.len(), 3, &state.one_hot());

    let luu = DMatrix::from_fn(unlabeled.len(), unlabeled.len(), |a, b| l[(unlabeled[a], unlabeled[b])]);
    let lul = DMatrix::from_fn(unlabeled.len(), labeled.len(), |a, b| l[(unlabeled[a], labeled[b])]);
    let uu = luu.lu().solve(&(-(lul * &y))).unwrap();
    let u = laplace_learn(&g, &state, 1e-12).unwrap();
    for (a, &i) in unlabeled.iter().enumerate() {
        for c in 0..3 {
            assert!((u.row(i)[c] - uu[(a, c)]).abs() <= 1e-8);
        }
    }

    let gamma = 0.5;
    let mut a = l * (gamma * gamma);
    let mut rhs = DMatrix::zeros(n, 3);
    for (r, &j) in labeled.iter().enumerate() {
        a[(j, j)] += 1.0;
        rhs.set_row(j, &y.row(r));
    }
    let dense = a.lu().solve(&rhs).unwrap();
    let gr = gr_solve(&g, &state, gamma, 1e-12).unwrap();
    for i in 0..n {
        for c in 0..3 {
            assert!((gr.row(i)[c] - dense[(i, c)]).abs() <= 1e-8 * dense[(i, c)].abs().max(1.0));
        }
    }
}
