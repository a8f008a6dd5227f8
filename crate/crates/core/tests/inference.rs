mod common;

use std::sync::Arc;

use common::{gaussian_instance, gaussian_oracle, poisson_instance, poisson_instance_scaled};
use dmap_core::graph::ArealGraph;
use dmap_core::inference::explore::integration_weights;
use dmap_core::inference::likelihood::observation_loglik;
use dmap_core::inference::posterior::{summarize_quantity, GaussianMixture};
use dmap_core::inference::{
    compute_dic, find_mode, fit, log_marginal, mcmc_oracle, poisson_loglik, zip_loglik,
    FitOptions, Integration, McmcOptions, ModeOptions, Quantity, ThetaMode,
};
use dmap_core::inference::explore::{ccd_design, ccd_f0, ccd_weight};
use dmap_core::model::{AssemblyInput, BlockKind, Effect, HyperKind, LikelihoodKind, ModelAssembly, ModelSpec};
use dmap_core::simulate::{matching_spec, simulate_panel, GraphSpec, SimScenario};
use dmap_core::model::assemble_panel;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-3)
}

/// Central differences of a scalar function and its first derivative.
fn check_derivatives(f: impl Fn(f64) -> (f64, f64, f64), eta: f64) -> (f64, f64) {
    let h = 1e-5;
    let (_, g, hs) = f(eta);
    let (vp, gp, _) = f(eta + h);
    let (vm, gm, _) = f(eta - h);
    (rel_err((vp - vm) / (2.0 * h), g), rel_err((gp - gm) / (2.0 * h), hs))
}

#[test]
fn likelihood_derivatives_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let y = rng.random_range(0..40) as f64;
        let eta = rng.random_range(-2.0..2.0);
        let log_e = rng.random_range(-1.0..3.0);
        let pi = rng.random_range(0.0..0.9);
        let (g, h) = check_derivatives(
            |e| {
                let l = poisson_loglik(y, e, log_e);
                (l.value, l.grad, l.hess)
            },
            eta,
        );
        assert!(g < 1e-6 && h < 1e-6, "poisson y={y} eta={eta}: {g} {h}");
        let (g, h) = check_derivatives(
            |e| {
                let l = zip_loglik(y, e, log_e, pi).unwrap();
                (l.value, l.grad, l.hess)
            },
            eta,
        );
        assert!(g < 1e-6 && h < 1e-6, "zip y={y} eta={eta} pi={pi}: {g} {h}");
    }
}

#[test]
fn log_posterior_gradient_matches_central_differences() {
    for seed in 0..20 {
        let a = poisson_instance(seed, 5, 3, LikelihoodKind::Poisson);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta: Vec<f64> = a.default_theta().iter().map(|t| t + rng.random_range(-0.5..0.5)).collect();
        let q = a.joint_latent_precision(&theta).unwrap();
        let x: Vec<f64> = (0..a.dim()).map(|_| rng.random_range(-0.3..0.3)).collect();
        let logpost = |x: &[f64]| {
            let eta = a.linear_predictor(x);
            let ll: f64 = a
                .observations()
                .iter()
                .zip(&eta)
                .map(|(o, &e)| observation_loglik(a.likelihood(), o.y, e, o.offset, 0.0).unwrap().value)
                .sum();
            ll - 0.5 * q.quad_form(x)
        };
        let eta = a.linear_predictor(&x);
        let g_obs: Vec<f64> = a
            .observations()
            .iter()
            .zip(&eta)
            .map(|(o, &e)| observation_loglik(a.likelihood(), o.y, e, o.offset, 0.0).unwrap().grad)
            .collect();
        let atg = a.design_transpose_mul(&g_obs);
        let qx = q.mul_vec(&x);
        let h = 1e-6;
        for k in 0..a.dim() {
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            let fd = (logpost(&xp) - logpost(&xm)) / (2.0 * h);
            let analytic = atg[k] - qx[k];
            assert!((fd - analytic).abs() < 1e-6 * analytic.abs().max(1.0), "seed {seed} k {k}: {fd} vs {analytic}");
        }
    }
}

fn single_cell(y: f64, e: f64, effects: &[Effect]) -> ModelAssembly {
    let graph = Arc::new(ArealGraph::new(vec!["only".into()], &[]).unwrap());
    ModelAssembly::build(
        &ModelSpec::new(LikelihoodKind::Poisson, effects),
        AssemblyInput {
            graph,
            weeks: vec![1],
            covariate: None,
            response: vec![y],
            expected: vec![e],
        },
    )
    .unwrap()
}

#[test]
fn single_observation_mode_solves_stationarity() {
    let a = single_cell(1.0, 1.0, &[Effect::Intercept]);
    let ga = find_mode(&a, &[], None, &ModeOptions::default()).unwrap();
    // 1 − e^η − 1e-6 η = 0
    assert!(ga.mode()[0].abs() < 1e-5);
    assert!(ga.gradient_norm() < 1e-8);
}

#[test]
fn saturated_single_observation_has_one_effective_parameter() {
    let a = single_cell(7.0, 2.0, &[Effect::Intercept]);
    let f = fit(
        &a,
        &FitOptions {
            dic_samples: 4000,
            ..FitOptions::default()
        },
    )
    .unwrap();
    let p_d = f.dic.unwrap().p_d;
    assert!((p_d - 1.0).abs() < 0.15, "p_D = {p_d}");
}

fn fixed_gaussian(seed: u64) -> (common::Instance, ModelAssembly) {
    let inst = gaussian_instance(seed);
    let mut spec = inst.assembly.spec().clone();
    for (k, kind) in inst.assembly.hypers().iter().enumerate() {
        spec.priors.fixed.insert(*kind, kind.to_natural(inst.theta[k]));
    }
    let a = ModelAssembly::build(
        &spec,
        AssemblyInput {
            graph: inst.assembly.graph().clone(),
            weeks: inst.assembly.weeks().to_vec(),
            covariate: Some(inst.covariate.clone()),
            response: inst.response.clone(),
            expected: inst.offset.iter().map(|o| o.exp()).collect(),
        },
    )
    .unwrap();
    (inst, a)
}

#[test]
fn gaussian_dic_matches_closed_form() {
    for seed in 0..5 {
        let (inst, a) = fixed_gaussian(seed);
        let samples = 2000;
        let f = fit(
            &a,
            &FitOptions {
                dic_samples: samples,
                seed: 9,
                ..FitOptions::default()
            },
        )
        .unwrap();
        assert_eq!(f.points.len(), 1);
        let oracle = gaussian_oracle(&inst);
        let (n, t) = (inst.n, inst.t);
        let m = n * t;
        let d = a.dim();
        // design matrix rows from the assembly; checked against the oracle mode
        let mut amat = DMatrix::zeros(m, d);
        for k in 0..m {
            let (idx, coef) = a.design_row(k);
            for (&i, &c) in idx.iter().zip(coef) {
                amat[(k, i)] = c;
            }
        }
        let tau = inst.precision;
        let s = &amat * &oracle.covariance * amat.transpose();
        let resid: Vec<f64> = (0..m)
            .map(|k| inst.response[k] - inst.offset[k] - (amat.row(k) * &oracle.mode)[0])
            .collect();
        let e = nalgebra::DVector::from_vec(resid);
        let constant = m as f64 * (2.0 * std::f64::consts::PI / tau).ln();
        let d_at_mean = constant + tau * e.dot(&e);
        let p_d = tau * s.trace();
        let var = tau * tau * (2.0 * (&s * &s).trace() + 4.0 * (e.transpose() * &s * &e)[0]);
        let mc_sd = (var / samples as f64).sqrt();
        let dic = f.dic.unwrap();
        assert!((dic.deviance_at_mean - d_at_mean).abs() < 1e-6, "seed {seed}");
        assert!((dic.mean_deviance - (d_at_mean + p_d)).abs() < 3.0 * mc_sd, "seed {seed}");
        assert!((dic.p_d - p_d).abs() < 3.0 * mc_sd, "seed {seed}");
        // same seed, same bits
        let again = compute_dic(&a, &f, samples, 9).unwrap();
        assert_eq!(again, dic);
    }
}

#[test]
fn mixture_summaries_examples() {
    let std = GaussianMixture {
        weights: vec![1.0],
        means: vec![0.0],
        sds: vec![1.0],
    };
    let s = std.summary();
    assert!(s.mean.abs() < 1e-12 && (s.sd - 1.0).abs() < 1e-12);
    assert!((s.lower + 1.959964).abs() < 1e-6 && (s.upper - 1.959964).abs() < 1e-6);
    let half = GaussianMixture {
        weights: vec![1.0],
        means: vec![0.0],
        sds: vec![0.5],
    };
    assert!((half.exp_summary().mean - 0.125f64.exp()).abs() < 1e-9);
    assert!((half.exp_summary().mean - 1.133148).abs() < 1e-6);
}

#[test]
fn mixture_quantiles_match_brute_force_sampling() {
    let mix = GaussianMixture {
        weights: vec![0.5, 0.5],
        means: vec![-1.0, 1.5],
        sds: vec![0.6, 1.1],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let comps = [Normal::new(-1.0, 0.6).unwrap(), Normal::new(1.5, 1.1).unwrap()];
    let mut draws: Vec<f64> = (0..1_000_000)
        .map(|_| comps[usize::from(rng.random::<bool>())].sample(&mut rng))
        .collect();
    draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for p in [0.025, 0.25, 0.5, 0.75, 0.975] {
        let emp = draws[(p * draws.len() as f64) as usize];
        assert!((mix.quantile(p) - emp).abs() < 0.005, "p={p}: {} vs {emp}", mix.quantile(p));
    }
    let s = mix.summary();
    assert!(s.lower <= s.mean && s.mean <= s.upper);
}

#[test]
fn symmetric_surface_puts_most_weight_at_center() {
    for m in 1..=6 {
        let f0 = ccd_f0(m);
        let design = ccd_design(m, f0).unwrap();
        let w_other = ccd_weight(m, design.len(), f0);
        let dw: Vec<f64> = (0..design.len()).map(|k| if k == 0 { 1.0 } else { w_other }).collect();
        // quadratic stub log-marginal
        let lm: Vec<f64> = design.iter().map(|z| -0.5 * z.iter().map(|v| v * v).sum::<f64>() + 3.0).collect();
        let w = integration_weights(&dw, &lm);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for k in 1..w.len() {
            assert!(w[0] > w[k], "m={m}");
        }
    }
}

#[test]
fn fit_weights_sum_to_one_and_log_marginal_is_deterministic() {
    let a = poisson_instance(3, 6, 3, LikelihoodKind::Poisson);
    let f = fit(
        &a,
        &FitOptions {
            dic_samples: 0,
            ..FitOptions::default()
        },
    )
    .unwrap();
    assert!((f.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let theta = a.default_theta();
    let (l1, _) = log_marginal(&a, &theta, None, &ModeOptions::default()).unwrap();
    let (l2, _) = log_marginal(&a, &theta, None, &ModeOptions::default()).unwrap();
    assert_eq!(l1.to_bits(), l2.to_bits());
    let s = summarize_quantity(&a, &f, Quantity::Beta1).unwrap();
    assert!(s.lower <= s.mean && s.mean <= s.upper);
}

#[test]
fn mode_is_invariant_to_area_relabelling() {
    let a = poisson_instance(8, 6, 3, LikelihoodKind::Poisson);
    let n = a.n_areas();
    let t = a.n_weeks();
    // reverse the lexicographic order of the ids
    let ids: Vec<String> = (0..n).map(|k| format!("z{:02}", n - 1 - k)).collect();
    let edges: Vec<(usize, usize)> = a.graph().edges().to_vec();
    let g = Arc::new(ArealGraph::new(ids, &edges).unwrap());
    let perm: Vec<usize> = (0..n).map(|i| g.index_of(&format!("z{:02}", n - 1 - i)).unwrap()).collect();
    let mut response = vec![0.0; n * t];
    let mut expected = vec![0.0; n * t];
    let mut covariate = vec![0.0; n];
    for (k, o) in a.observations().iter().enumerate() {
        let (i, w) = (o.area, o.week);
        response[perm[i] * t + w] = o.y;
        expected[perm[i] * t + w] = o.offset.exp();
        let _ = k;
    }
    for i in 0..n {
        covariate[perm[i]] = a.covariate().unwrap()[i];
    }
    let b = ModelAssembly::build(
        a.spec(),
        AssemblyInput {
            graph: g,
            weeks: a.weeks().to_vec(),
            covariate: Some(covariate),
            response,
            expected,
        },
    )
    .unwrap();
    let theta = a.default_theta();
    let ma = find_mode(&a, &theta, None, &ModeOptions::default()).unwrap();
    let mb = find_mode(&b, &theta, None, &ModeOptions::default()).unwrap();
    let (xa, xb) = (ma.mode(), mb.mode());
    for kind in [BlockKind::Beta0, BlockKind::Beta1] {
        let s = a.block(kind).unwrap().start;
        assert!((xa[s] - xb[s]).abs() < 1e-7);
    }
    for kind in [BlockKind::SpatialStructured, BlockKind::SpatialUnstructured] {
        let s = a.block(kind).unwrap().start;
        for i in 0..n {
            assert!((xa[s + i] - xb[s + perm[i]]).abs() < 1e-7);
        }
    }
    let d = a.block(BlockKind::Interaction).unwrap().start;
    for i in 0..n {
        for w in 0..t {
            assert!((xa[d + i * t + w] - xb[d + perm[i] * t + w]).abs() < 1e-7);
        }
    }
}

#[test]
fn scaling_expected_counts_shifts_the_intercept() {
    let a = poisson_instance(21, 8, 4, LikelihoodKind::Poisson);
    let opts = FitOptions {
        dic_samples: 0,
        ..FitOptions::default()
    };
    let base = fit(&a, &opts).unwrap();
    let b0 = summarize_quantity(&a, &base, Quantity::Beta0).unwrap().mean;
    let b1 = summarize_quantity(&a, &base, Quantity::Beta1).unwrap().mean;
    for c in [0.5, 3.0] {
        let scaled = ModelAssembly::build(
            a.spec(),
            AssemblyInput {
                graph: a.graph().clone(),
                weeks: a.weeks().to_vec(),
                covariate: a.covariate().map(|z| z.to_vec()),
                response: a.observations().iter().map(|o| o.y).collect(),
                expected: a.observations().iter().map(|o| c * o.offset.exp()).collect(),
            },
        )
        .unwrap();
        let f = fit(&scaled, &opts).unwrap();
        let s0 = summarize_quantity(&scaled, &f, Quantity::Beta0).unwrap().mean;
        let s1 = summarize_quantity(&scaled, &f, Quantity::Beta1).unwrap().mean;
        assert!((s0 - (b0 - f64::ln(c))).abs() < 0.02, "c={c}: {s0} vs {}", b0 - c.ln());
        assert!((s1 - b1).abs() < 0.02, "c={c}: {s1} vs {b1}");
    }
}

#[test]
fn generating_theta_beats_a_distant_one() {
    let base = SimScenario {
        graph: GraphSpec::Lattice { rows: 4, cols: 4 },
        weeks: 6,
        ..SimScenario::default()
    };
    let mut wins = 0;
    for r in 0..50u64 {
        let sc = SimScenario {
            seed: 500 + r,
            ..base.clone()
        };
        let (panel, _) = simulate_panel(&sc).unwrap();
        let a = assemble_panel(&matching_spec(&sc), &panel).unwrap();
        let truth = vec![
            HyperKind::LogPrecisionBym.to_internal(sc.tau_bym),
            HyperKind::LogitMixing.to_internal(sc.phi_mix),
            HyperKind::LogPrecisionRw1.to_internal(sc.tau_rw1),
            HyperKind::LogPrecisionIidTime.to_internal(sc.tau_iid_time),
            HyperKind::LogPrecisionInteraction.to_internal(sc.tau_interaction),
        ];
        let far: Vec<f64> = truth.iter().map(|t| t - 5.0).collect();
        let (lt, _) = log_marginal(&a, &truth, None, &ModeOptions::default()).unwrap();
        let (lf, _) = log_marginal(&a, &far, None, &ModeOptions::default()).unwrap();
        wins += usize::from(lt > lf);
    }
    assert!(wins >= 45, "{wins} of 50");
}

#[test]
fn oracle_agrees_with_gaussian_approximation_at_fixed_theta() {
    // 3 areas × 2 weeks with large counts, so the sampled mean of each
    // linear predictor sits on the posterior mode
    let a = poisson_instance_scaled(4, 3, 2, LikelihoodKind::Poisson, 20.0);
    let theta = a.default_theta();
    let ga = find_mode(&a, &theta, None, &ModeOptions::default()).unwrap();
    let samples = mcmc_oracle(&a, &McmcOptions::new(ThetaMode::Fixed(theta.clone()), 40_000, 3)).unwrap();
    for i in 0..3 {
        for w in 0..2 {
            let (idx, coef) = Quantity::Eta(i, w).functional(&a).unwrap();
            let m = samples.mean_of(&idx, &coef);
            let mode = ga.mean_of(&idx, &coef);
            assert!((m - mode).abs() < 0.02, "({i},{w}): {m} vs {mode}");
        }
    }
}

#[test]
fn oracle_matches_laplace_mixture_on_a_toy() {
    let a = poisson_instance(2, 12, 4, LikelihoodKind::Poisson);
    let f = fit(
        &a,
        &FitOptions {
            dic_samples: 0,
            ..FitOptions::default()
        },
    )
    .unwrap();
    let samples = mcmc_oracle(
        &a,
        &McmcOptions::new(ThetaMode::Sampled(f.theta_mode.clone()), 40_000, 8),
    )
    .unwrap();
    for (kind, q) in [(BlockKind::Beta0, Quantity::Beta0), (BlockKind::Beta1, Quantity::Beta1)] {
        let k = a.block(kind).unwrap().start;
        let laplace = summarize_quantity(&a, &f, q).unwrap().mean;
        let mcmc = samples.mean_of(&[k], &[1.0]);
        assert!((laplace - mcmc).abs() < 0.05, "{kind:?}: {laplace} vs {mcmc}");
    }
}

#[test]
fn mode_only_integration_uses_one_point() {
    let a = poisson_instance(2, 4, 2, LikelihoodKind::ZeroInflatedPoisson);
    let f = fit(
        &a,
        &FitOptions {
            integration: Integration::Mode,
            dic_samples: 200,
            ..FitOptions::default()
        },
    )
    .unwrap();
    assert_eq!(f.points.len(), 1);
    assert_eq!(f.weights(), vec![1.0]);
    assert!(f.dic.unwrap().dic.is_finite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn zip_without_inflation_is_poisson(y in 0u32..50, eta in -3.0f64..3.0, log_e in -2.0f64..4.0) {
        let p = poisson_loglik(y as f64, eta, log_e);
        let z = zip_loglik(y as f64, eta, log_e, 0.0).unwrap();
        prop_assert!((p.value - z.value).abs() < 1e-12 * p.value.abs().max(1.0));
        prop_assert!((p.grad - z.grad).abs() < 1e-12 * p.grad.abs().max(1.0));
    }
}
