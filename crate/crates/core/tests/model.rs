mod common;

use std::sync::Arc;

use common::{components, gaussian_instance, pinv_sym, random_graph, scaled_icar_with_singletons};
use dmap_core::graph::ArealGraph;
use dmap_core::model::{
    pc_precision_rate, AssemblyInput, BlockKind, Effect, HyperKind, LikelihoodKind, ModelAssembly, ModelSpec,
};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn spatial_assembly(n: usize, edges: &[(usize, usize)]) -> ModelAssembly {
    let ids = (0..n).map(|k| format!("n{k:02}")).collect();
    let graph = Arc::new(ArealGraph::new(ids, edges).unwrap());
    let spec = ModelSpec::new(
        LikelihoodKind::Gaussian { precision: 1.0 },
        &[Effect::Intercept, Effect::Bym2Spatial],
    );
    ModelAssembly::build(
        &spec,
        AssemblyInput {
            graph,
            weeks: vec![1],
            covariate: None,
            response: vec![0.0; n],
            expected: vec![1.0; n],
        },
    )
    .unwrap()
}

/// Orthonormal basis of the subspace satisfying the assembly's constraints.
fn constraint_null_basis(a: &ModelAssembly) -> DMatrix<f64> {
    let d = a.dim();
    let mut ctc = DMatrix::<f64>::zeros(d, d);
    for c in a.constraints() {
        let mut v = DVector::zeros(d);
        for &i in &c.indices {
            v[i] = 1.0;
        }
        ctc += &v * v.transpose();
    }
    let eig = SymmetricEigen::new(ctc);
    let keep: Vec<usize> = (0..d).filter(|&k| eig.eigenvalues[k].abs() < 1e-9).collect();
    DMatrix::from_fn(d, keep.len(), |r, c| eig.eigenvectors[(r, keep[c])])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn precision_is_pd_on_constraint_subspace(seed in 0u64..10_000, th in proptest::collection::vec(-3.0f64..3.0, 5)) {
        let inst = gaussian_instance(seed);
        let a = &inst.assembly;
        prop_assert!(a.dim() <= 60);
        let q = a.joint_latent_precision(&th).unwrap().to_dense();
        prop_assert_eq!(&q, &q.transpose());
        let b = constraint_null_basis(a);
        let reduced = b.transpose() * &q * &b;
        let eig = SymmetricEigen::new(reduced);
        prop_assert!(eig.eigenvalues.min() > 0.0, "min eigenvalue {}", eig.eigenvalues.min());
    }

    #[test]
    fn hyper_prior_matches_substitution(seed in 0u64..10_000, th in proptest::collection::vec(-4.0f64..4.0, 5)) {
        let inst = gaussian_instance(seed);
        let a = &inst.assembly;
        let lam = pc_precision_rate(1.0, 0.01).unwrap();
        let mut expected = 0.0;
        for (k, &t) in th.iter().enumerate() {
            if k == 1 {
                // uniform on (0,1): density of logit-scale value is p(1-p)
                let p = 1.0 / (1.0 + (-t).exp());
                expected += (p * (1.0 - p)).ln();
            } else {
                // exponential on σ = τ^{-1/2}, |dσ/dlogτ| = σ/2
                let sigma = (-t / 2.0).exp();
                expected += lam.ln() - lam * sigma + (sigma / 2.0).ln();
            }
        }
        let got = a.log_hyper_prior(&th);
        prop_assert!((got - expected).abs() < 1e-10 * expected.abs().max(1.0), "{got} vs {expected}");
    }
}

#[test]
fn assembly_is_deterministic() {
    for seed in 0..5 {
        let a = gaussian_instance(seed).assembly;
        let b = gaussian_instance(seed).assembly;
        assert_eq!(a.blocks(), b.blocks());
        assert_eq!(a.observations(), b.observations());
        assert_eq!(a.constraints(), b.constraints());
        for k in 0..a.observations().len() {
            assert_eq!(a.design_row(k), b.design_row(k));
        }
    }
}

fn bym_block_dense(a: &ModelAssembly, theta: &[f64]) -> (DMatrix<f64>, usize) {
    let q = a.joint_latent_precision(theta).unwrap().to_dense();
    let u = a.block(BlockKind::SpatialStructured).unwrap();
    let v = a.block(BlockKind::SpatialUnstructured).unwrap();
    assert_eq!(v.start, u.start + u.len);
    let n = u.len;
    (q.view((u.start, u.start), (2 * n, 2 * n)).into_owned(), n)
}

/// Covariance of u + v under the constrained prior (u sums to zero per
/// component).
fn bym_covariance(a: &ModelAssembly, theta: &[f64], edges: &[(usize, usize)]) -> DMatrix<f64> {
    let (q, n) = bym_block_dense(a, theta);
    let mut ctc = DMatrix::<f64>::zeros(2 * n, 2 * n);
    for comp in components(n, edges).into_iter().filter(|c| c.len() > 1) {
        for &i in &comp {
            for &j in &comp {
                ctc[(i, j)] += 1.0;
            }
        }
    }
    let eig = SymmetricEigen::new(ctc);
    let keep: Vec<usize> = (0..2 * n).filter(|&k| eig.eigenvalues[k].abs() < 1e-9).collect();
    let basis = DMatrix::from_fn(2 * n, keep.len(), |r, c| eig.eigenvectors[(r, keep[c])]);
    let inner = (basis.transpose() * &q * &basis).try_inverse().unwrap();
    let cov = &basis * inner * basis.transpose();
    // b = [I I] (u, v)
    DMatrix::from_fn(n, n, |i, j| cov[(i, j)] + cov[(i, n + j)] + cov[(n + i, j)] + cov[(n + i, n + j)])
}

#[test]
fn bym2_variance_decomposition_by_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 10;
    let mut edges = random_graph(&mut rng, n, 0.3);
    for k in 1..n {
        if !edges.contains(&(k - 1, k)) {
            edges.push((k - 1, k));
        }
    }
    edges.sort();
    let a = spatial_assembly(n, &edges);
    let (tau, phi) = (2.5f64, 0.7f64);
    let theta = [tau.ln(), (phi / (1.0 - phi)).ln()];
    let cov = bym_covariance(&a, &theta, &edges);
    let s = pinv_sym(&scaled_icar_with_singletons(n, &edges));
    let geo = ((0..n).map(|i| s[(i, i)].ln()).sum::<f64>() / n as f64).exp();
    assert!((geo - 1.0).abs() < 1e-10);

    // sample b through a factor of its covariance
    let eig = SymmetricEigen::new(cov.clone());
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    let draws = 100_000;
    let mut sum_sq = vec![0.0; n];
    for _ in 0..draws {
        let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let b = &root * z;
        for i in 0..n {
            sum_sq[i] += b[i] * b[i];
        }
    }
    for i in 0..n {
        let target = ((1.0 - phi) + phi * s[(i, i)]) / tau;
        assert!((cov[(i, i)] - target).abs() < 1e-8 * target, "exact {i}");
        let emp = sum_sq[i] / draws as f64;
        assert!((emp - target).abs() < 0.02 * target, "area {i}: {emp} vs {target}");
    }
}

#[test]
fn bym2_mixing_limits() {
    let edges = [(0, 1), (1, 2), (2, 3), (0, 3), (3, 4)];
    let a = spatial_assembly(5, &edges);
    let s = pinv_sym(&scaled_icar_with_singletons(5, &edges));
    // φ → 0: iid only, unit variance at τ = 1
    let cov = bym_covariance(&a, &[0.0, -30.0], &edges);
    for i in 0..5 {
        assert!((cov[(i, i)] - 1.0).abs() < 1e-6);
        for j in 0..5 {
            if i != j {
                assert!(cov[(i, j)].abs() < 1e-6);
            }
        }
    }
    // φ → 1: variance is the scaled ICAR's
    let cov = bym_covariance(&a, &[0.0, 30.0], &edges);
    for i in 0..5 {
        for j in 0..5 {
            assert!((cov[(i, j)] - s[(i, j)]).abs() < 1e-6);
        }
    }
}

#[test]
fn spec_families_have_expected_hyper_layouts() {
    let st = ModelSpec::spatiotemporal(LikelihoodKind::ZeroInflatedPoisson, true);
    assert_eq!(st.effects.len(), 6);
    let inst = gaussian_instance(3);
    assert_eq!(inst.assembly.hypers(), &common::hyper_names()[..]);
    assert_eq!(inst.assembly.hyper_index(HyperKind::LogitZeroProb), None);
    let weekly = ModelSpec::spatial_weekly(LikelihoodKind::Poisson);
    assert!(weekly.has(Effect::Covariate) && weekly.has(Effect::Bym2Spatial) && !weekly.has(Effect::Rw1Temporal));
}
