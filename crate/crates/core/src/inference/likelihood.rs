//! Per-observation log likelihoods with first and second derivatives in the
//! linear predictor `η`.

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::model::{LikelihoodKind, ModelAssembly};

/// Value, gradient and curvature of one observation's log likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLik {
    pub value: f64,
    pub grad: f64,
    pub hess: f64,
}

/// ln(y!) for non-negative integer `y`.
pub fn ln_factorial(y: f64) -> f64 {
    if y < 2.0 {
        return 0.0;
    }
    if y <= 30.0 {
        let mut acc = 0.0;
        let mut k = 2.0;
        while k <= y {
            acc += f64::ln(k);
            k += 1.0;
        }
        return acc;
    }
    ln_gamma(y + 1.0)
}

/// `y ~ Poisson(E·e^η)` with `log_e = ln E`.
pub fn poisson_loglik(y: f64, eta: f64, log_e: f64) -> LogLik {
    let mu = (log_e + eta).exp();
    LogLik {
        value: y * (log_e + eta) - mu - ln_factorial(y),
        grad: y - mu,
        hess: -mu,
    }
}

/// Zero-inflated Poisson with structural-zero probability `pi`.
///
/// The second derivative of a zero observation turns positive when the
/// structural-zero share dominates.
pub fn zip_loglik(y: f64, eta: f64, log_e: f64, pi: f64) -> Result<LogLik> {
    if !(0.0..=1.0).contains(&pi) {
        return Err(Error::invalid(format!("zero-inflation probability {pi} outside [0, 1]")));
    }
    if y > 0.0 {
        if pi >= 1.0 {
            return Err(Error::ImpossibleObservation { y });
        }
        let p = poisson_loglik(y, eta, log_e);
        return Ok(LogLik {
            value: (-pi).ln_1p() + p.value,
            ..p
        });
    }
    let mu = (log_e + eta).exp();
    if pi <= 0.0 {
        return Ok(LogLik {
            value: -mu,
            grad: -mu,
            hess: -mu,
        });
    }
    if pi >= 1.0 {
        return Ok(LogLik {
            value: 0.0,
            grad: 0.0,
            hess: 0.0,
        });
    }
    // a = ln π, b = ln(1−π) − μ; value = ln(eᵃ + eᵇ)
    let a = pi.ln();
    let b = (-pi).ln_1p() - mu;
    let value = a.max(b) + (-(a - b).abs()).exp().ln_1p();
    // share of the Poisson branch in P(y = 0)
    let r = 1.0 / (1.0 + (a - b).exp());
    if r == 0.0 {
        return Ok(LogLik {
            value,
            grad: 0.0,
            hess: 0.0,
        });
    }
    let grad = -mu * r;
    // −μ r [(1−μ) + μ r]
    let hess = -mu * r * ((1.0 - mu) + mu * r);
    Ok(LogLik { value, grad, hess })
}

/// `y ~ N(offset + η, 1/precision)`.
pub fn gaussian_loglik(y: f64, eta: f64, offset: f64, precision: f64) -> LogLik {
    let r = y - offset - eta;
    LogLik {
        value: 0.5 * (precision.ln() - std::f64::consts::TAU.ln()) - 0.5 * precision * r * r,
        grad: precision * r,
        hess: -precision,
    }
}

/// Dispatches on the assembly's likelihood; `pi` is ignored unless the
/// likelihood is zero-inflated.
pub fn observation_loglik(kind: LikelihoodKind, y: f64, eta: f64, offset: f64, pi: f64) -> Result<LogLik> {
    match kind {
        LikelihoodKind::Poisson => Ok(poisson_loglik(y, eta, offset)),
        LikelihoodKind::ZeroInflatedPoisson => zip_loglik(y, eta, offset, pi),
        LikelihoodKind::Gaussian { precision } => Ok(gaussian_loglik(y, eta, offset, precision)),
    }
}

/// Sum of observation log likelihoods at latent `x`.
pub fn total_loglik(assembly: &ModelAssembly, x: &[f64], pi: f64) -> Result<f64> {
    let eta = assembly.linear_predictor(x);
    let kind = assembly.likelihood();
    let mut total = 0.0;
    for (obs, &e) in assembly.observations().iter().zip(&eta) {
        total += observation_loglik(kind, obs.y, e, obs.offset, pi)?.value;
    }
    Ok(total)
}
