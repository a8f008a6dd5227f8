//! Dense reference computations shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use dmap_core::graph::ArealGraph;
use dmap_core::model::{AssemblyInput, Effect, HyperKind, LikelihoodKind, ModelAssembly, ModelSpec};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn laplacian(n: usize, edges: &[(usize, usize)]) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(n, n);
    for &(i, j) in edges {
        q[(i, j)] -= 1.0;
        q[(j, i)] -= 1.0;
        q[(i, i)] += 1.0;
        q[(j, j)] += 1.0;
    }
    q
}

/// Moore–Penrose inverse of a symmetric matrix by eigendecomposition.
pub fn pinv_sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let inv = eig
        .eigenvalues
        .map(|l| if l.abs() > 1e-10 * top.max(1.0) { 1.0 / l } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

pub fn rank(m: &DMatrix<f64>) -> usize {
    let eig = SymmetricEigen::new(m.clone());
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    eig.eigenvalues
        .iter()
        .filter(|l| l.abs() > 1e-9 * top.max(1.0))
        .count()
}

/// Components by union-find over the edge list.
pub fn components(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for &(a, b) in edges {
        let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let r = root(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Laplacian with each non-singleton component scaled so the geometric
/// mean of its pseudo-inverse diagonal is one; singletons get diagonal 1.
pub fn scaled_icar_with_singletons(n: usize, edges: &[(usize, usize)]) -> DMatrix<f64> {
    let q = laplacian(n, edges);
    let mut out = DMatrix::zeros(n, n);
    for comp in components(n, edges) {
        if comp.len() == 1 {
            out[(comp[0], comp[0])] = 1.0;
            continue;
        }
        let k = comp.len();
        let block = DMatrix::from_fn(k, k, |a, b| q[(comp[a], comp[b])]);
        let p = pinv_sym(&block);
        let geo = ((0..k).map(|a| p[(a, a)].ln()).sum::<f64>() / k as f64).exp();
        for a in 0..k {
            for b in 0..k {
                out[(comp[a], comp[b])] = block[(a, b)] * geo;
            }
        }
    }
    out
}

pub struct Instance {
    pub assembly: ModelAssembly,
    pub theta: Vec<f64>,
    pub n: usize,
    pub t: usize,
    pub edges: Vec<(usize, usize)>,
    pub covariate: Vec<f64>,
    pub response: Vec<f64>,
    pub offset: Vec<f64>,
    pub precision: f64,
}

pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for j in 1..n {
        for i in 0..j {
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    edges
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|k| format!("s{k:02}")).collect()
}

/// Random Gaussian-likelihood instance with every effect active.
pub fn gaussian_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..=6);
    let t = rng.random_range(2..=4);
    let mut edges = random_graph(&mut rng, n, 0.5);
    if edges.is_empty() {
        edges.push((0, 1));
    }
    let covariate: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let response: Vec<f64> = (0..n * t).map(|_| rng.random_range(-2.0..2.0)).collect();
    let offset: Vec<f64> = (0..n * t).map(|_| rng.random_range(-0.5..0.5)).collect();
    let precision = rng.random_range(0.5..4.0);
    let theta: Vec<f64> = vec![
        rng.random_range(-1.0..2.0),
        rng.random_range(-1.5..1.5),
        rng.random_range(-1.0..2.0),
        rng.random_range(-1.0..2.0),
        rng.random_range(-1.0..2.0),
    ];
    let spec = ModelSpec::spatiotemporal(LikelihoodKind::Gaussian { precision }, true);
    let graph = Arc::new(ArealGraph::new(ids(n), &edges).unwrap());
    let assembly = ModelAssembly::build(
        &spec,
        AssemblyInput {
            graph,
            weeks: (1..=t as u32).collect(),
            covariate: Some(covariate.clone()),
            response: response.clone(),
            expected: offset.iter().map(|o| o.exp()).collect(),
        },
    )
    .unwrap();
    Instance {
        assembly,
        theta,
        n,
        t,
        edges,
        covariate,
        response,
        offset,
        precision,
    }
}

pub struct GaussianOracle {
    pub mode: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub log_evidence: f64,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Exact posterior and evidence of a Gaussian instance, computed densely
/// on an orthonormal basis of the constraint subspace.
pub fn gaussian_oracle(inst: &Instance) -> GaussianOracle {
    let (n, t) = (inst.n, inst.t);
    let d = 2 + 2 * n + 2 * t + n * t;
    let (b0, b1, u, v, g, f, dl) = (0, 1, 2, 2 + n, 2 + 2 * n, 2 + 2 * n + t, 2 + 2 * n + 2 * t);
    let th = &inst.theta;
    let tau_b = th[0].exp();
    let phi = logistic(th[1]);
    let (tau_g, tau_f, tau_d) = (th[2].exp(), th[3].exp(), th[4].exp());

    let mut q = DMatrix::zeros(d, d);
    q[(b0, b0)] = 1e-6;
    q[(b1, b1)] = 1e-6;
    let s = scaled_icar_with_singletons(n, &inst.edges);
    for a in 0..n {
        for b in 0..n {
            q[(u + a, u + b)] = tau_b / phi * s[(a, b)];
        }
        q[(v + a, v + a)] = tau_b / (1.0 - phi);
    }
    let rw = laplacian(t, &(1..t).map(|k| (k - 1, k)).collect::<Vec<_>>());
    for a in 0..t {
        for b in 0..t {
            q[(g + a, g + b)] = tau_g * rw[(a, b)];
        }
        q[(f + a, f + a)] = tau_f;
    }
    for k in 0..n * t {
        q[(dl + k, dl + k)] = tau_d;
    }

    let mut cons: Vec<DVector<f64>> = Vec::new();
    for comp in components(n, &inst.edges) {
        if comp.len() > 1 {
            let mut c = DVector::zeros(d);
            for i in comp {
                c[u + i] = 1.0;
            }
            cons.push(c);
        }
    }
    let mut c = DVector::zeros(d);
    for k in 0..t {
        c[g + k] = 1.0;
    }
    cons.push(c);
    let mut ctc = DMatrix::zeros(d, d);
    for c in &cons {
        ctc += c * c.transpose();
    }
    let eig = SymmetricEigen::new(ctc);
    let null: Vec<usize> = (0..d).filter(|&k| eig.eigenvalues[k].abs() < 1e-9).collect();
    let basis = DMatrix::from_fn(d, null.len(), |r, c| eig.eigenvectors[(r, null[c])]);

    let m = n * t;
    let mut a = DMatrix::zeros(m, d);
    for i in 0..n {
        for w in 0..t {
            let r = i * t + w;
            a[(r, b0)] = 1.0;
            a[(r, b1)] = inst.covariate[i];
            a[(r, u + i)] = 1.0;
            a[(r, v + i)] = 1.0;
            a[(r, g + w)] = 1.0;
            a[(r, f + w)] = 1.0;
            a[(r, dl + r)] = 1.0;
        }
    }
    let tau = inst.precision;
    let resid = DVector::from_iterator(m, inst.response.iter().zip(&inst.offset).map(|(y, o)| y - o));
    let qw = basis.transpose() * &q * &basis;
    let ab = &a * &basis;
    let p = &qw + ab.transpose() * &ab * tau;
    let pchol = p.clone().cholesky().unwrap();
    let rhs = ab.transpose() * &resid * tau;
    let w_mode = pchol.solve(&rhs);
    let mode = &basis * &w_mode;
    let covariance = &basis * pchol.inverse() * basis.transpose();
    let logdet = |mat: &DMatrix<f64>| {
        2.0 * mat.clone().cholesky().unwrap().l().diagonal().iter().map(|x| x.ln()).sum::<f64>()
    };
    let log_evidence = -0.5 * m as f64 * (2.0 * std::f64::consts::PI).ln() + 0.5 * m as f64 * tau.ln()
        - 0.5 * tau * resid.dot(&resid)
        + 0.5 * rhs.dot(&w_mode)
        + 0.5 * logdet(&qw)
        - 0.5 * logdet(&p);
    GaussianOracle {
        mode,
        covariance,
        log_evidence,
    }
}

pub fn hyper_names() -> Vec<HyperKind> {
    vec![
        HyperKind::LogPrecisionBym,
        HyperKind::LogitMixing,
        HyperKind::LogPrecisionRw1,
        HyperKind::LogPrecisionIidTime,
        HyperKind::LogPrecisionInteraction,
    ]
}

pub fn all_effects() -> Vec<Effect> {
    Effect::ALL.to_vec()
}

/// Random Poisson instance on `n` areas (a path plus random chords) and
/// `t` weeks, counts drawn around a modest covariate effect.
pub fn poisson_instance(seed: u64, n: usize, t: usize, likelihood: LikelihoodKind) -> ModelAssembly {
    poisson_instance_scaled(seed, n, t, likelihood, 1.0)
}

/// As [`poisson_instance`] with every expected count multiplied by `exposure`.
pub fn poisson_instance_scaled(seed: u64, n: usize, t: usize, likelihood: LikelihoodKind, exposure: f64) -> ModelAssembly {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges: Vec<(usize, usize)> = (1..n).map(|k| (k - 1, k)).collect();
    for (i, j) in random_graph(&mut rng, n, 0.15) {
        if j != i + 1 {
            edges.push((i, j));
        }
    }
    edges.sort();
    let covariate: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let spatial: Vec<f64> = (0..n).map(|_| rng.random_range(-0.3..0.3)).collect();
    let mut expected = Vec::with_capacity(n * t);
    let mut response = Vec::with_capacity(n * t);
    for i in 0..n {
        for w in 0..t {
            let e: f64 = exposure * rng.random_range(5.0..30.0);
            let mean = e * (-0.3 * covariate[i] + spatial[i] + 0.1 * w as f64 - 0.15).exp();
            let y = rand_distr::Distribution::sample(&rand_distr::Poisson::new(mean).unwrap(), &mut rng);
            expected.push(e);
            response.push(y);
        }
    }
    let spec = ModelSpec::spatiotemporal(likelihood, true);
    let graph = Arc::new(ArealGraph::new(ids(n), &edges).unwrap());
    ModelAssembly::build(
        &spec,
        AssemblyInput {
            graph,
            weeks: (1..=t as u32).collect(),
            covariate: Some(covariate),
            response,
            expected,
        },
    )
    .unwrap()
}
