//! Deviance information criterion from posterior draws of the fitted
//! mixture of Gaussian approximations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::explore::FitResult;
use super::likelihood::total_loglik;
use crate::error::{Error, Result};
use crate::model::ModelAssembly;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Dic {
    /// Posterior mean deviance `D̄`.
    pub mean_deviance: f64,
    /// Deviance at the posterior mean of the parameters.
    pub deviance_at_mean: f64,
    /// Effective number of parameters `D̄ − D(θ̄)`.
    pub p_d: f64,
    pub dic: f64,
}

fn pick(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    weights.len() - 1
}

/// DIC from `samples` draws. Draw `s` uses its own ChaCha8 stream of
/// `seed`, so the result does not depend on the thread count.
pub fn compute_dic(assembly: &ModelAssembly, fit: &FitResult, samples: usize, seed: u64) -> Result<Dic> {
    if samples == 0 {
        return Err(Error::invalid("DIC needs at least one sample"));
    }
    let weights = fit.weights();
    let deviances: Vec<Result<f64>> = (0..samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s as u64);
            let k = pick(&weights, rng.random::<f64>());
            let point = &fit.points[k];
            let x = point.approx.sample(&mut rng);
            let pi = assembly.zero_prob(&point.theta);
            Ok(-2.0 * total_loglik(assembly, &x, pi)?)
        })
        .collect();
    let mut total = 0.0;
    for d in deviances {
        total += d?;
    }
    let mean_deviance = total / samples as f64;

    let x_bar = fit.latent_mean();
    let pi_bar: f64 = fit
        .points
        .iter()
        .map(|p| p.weight * assembly.zero_prob(&p.theta))
        .sum();
    let deviance_at_mean = -2.0 * total_loglik(assembly, &x_bar, pi_bar)?;
    let p_d = mean_deviance - deviance_at_mean;
    Ok(Dic {
        mean_deviance,
        deviance_at_mean,
        p_d,
        dic: mean_deviance + p_d,
    })
}

/// Index of the smallest DIC; ties go to the earlier model.
pub fn select_by_dic(values: &[f64]) -> Result<usize> {
    if values.is_empty() {
        return Err(Error::invalid("no models to compare"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite DIC value"));
    }
    let mut best = 0;
    for (k, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = k;
        }
    }
    Ok(best)
}
