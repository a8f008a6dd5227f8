//! Posterior summaries of latent linear functionals and hyperparameters.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use super::explore::FitResult;
use crate::error::{Error, Result};
use crate::model::{BlockKind, HyperKind, ModelAssembly};

/// Named posterior quantity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    Beta0,
    Beta1,
    /// Structured spatial effect of an area.
    U(usize),
    /// Unstructured spatial effect of an area.
    V(usize),
    /// Combined BYM2 spatial effect `u + v`.
    Bym(usize),
    Gamma(usize),
    Phi(usize),
    Delta(usize, usize),
    /// Linear predictor of an area-week, without offset.
    Eta(usize, usize),
    /// Combined temporal effect `γ + φ` of a week.
    Temporal(usize),
    Hyper(HyperKind),
}

impl Quantity {
    /// Parses ids such as `beta1`, `bym[r0c3]`, `delta[A,12]` or
    /// `tau_bym`. Areas are unit ids (or zero-based indices when no unit
    /// has that id); weeks are week labels.
    pub fn parse(id: &str, assembly: &ModelAssembly) -> Result<Self> {
        let unknown = || Error::UnknownQuantity(id.to_string());
        let id_trim = id.trim();
        let (name, args) = match id_trim.split_once('[') {
            Some((name, rest)) => {
                let inner = rest.strip_suffix(']').ok_or_else(unknown)?;
                (name, inner.split(',').map(str::trim).collect::<Vec<_>>())
            }
            None => (id_trim, Vec::new()),
        };
        let area = |s: &str| -> Result<usize> {
            if let Some(i) = assembly.graph().index_of(s) {
                return Ok(i);
            }
            s.parse::<usize>()
                .ok()
                .filter(|&i| i < assembly.n_areas())
                .ok_or_else(|| Error::UnknownUnit(s.to_string()))
        };
        let week = |s: &str| -> Result<usize> {
            let label: u32 = s.parse().map_err(|_| unknown())?;
            assembly
                .weeks()
                .iter()
                .position(|&w| w == label)
                .ok_or_else(|| Error::invalid(format!("week {label} is not in the panel")))
        };
        let q = match (name, args.len()) {
            ("beta0", 0) => Quantity::Beta0,
            ("beta1", 0) => Quantity::Beta1,
            ("u", 1) => Quantity::U(area(args[0])?),
            ("v", 1) => Quantity::V(area(args[0])?),
            ("bym", 1) => Quantity::Bym(area(args[0])?),
            ("gamma", 1) => Quantity::Gamma(week(args[0])?),
            ("phi", 1) => Quantity::Phi(week(args[0])?),
            ("temporal", 1) => Quantity::Temporal(week(args[0])?),
            ("delta", 2) => Quantity::Delta(area(args[0])?, week(args[1])?),
            ("eta", 2) => Quantity::Eta(area(args[0])?, week(args[1])?),
            (h, 0) => Quantity::Hyper(h.parse().map_err(|_| unknown())?),
            _ => return Err(unknown()),
        };
        Ok(q)
    }

    /// Sparse coefficients of the functional over the latent vector.
    pub fn functional(&self, assembly: &ModelAssembly) -> Result<(Vec<usize>, Vec<f64>)> {
        let block = |kind: BlockKind| {
            assembly
                .block(kind)
                .ok_or_else(|| Error::EffectAbsent(kind.name().to_string()))
        };
        let t = assembly.n_weeks();
        let mut idx = Vec::new();
        let mut coef = Vec::new();
        match *self {
            Quantity::Beta0 => idx.push(block(BlockKind::Beta0)?.start),
            Quantity::Beta1 => idx.push(block(BlockKind::Beta1)?.start),
            Quantity::U(i) => idx.push(block(BlockKind::SpatialStructured)?.start + i),
            Quantity::V(i) => idx.push(block(BlockKind::SpatialUnstructured)?.start + i),
            Quantity::Bym(i) => {
                idx.push(block(BlockKind::SpatialStructured)?.start + i);
                idx.push(block(BlockKind::SpatialUnstructured)?.start + i);
            }
            Quantity::Gamma(w) => idx.push(block(BlockKind::TemporalStructured)?.start + w),
            Quantity::Phi(w) => idx.push(block(BlockKind::TemporalUnstructured)?.start + w),
            Quantity::Delta(i, w) => idx.push(block(BlockKind::Interaction)?.start + i * t + w),
            Quantity::Temporal(w) => {
                for kind in [BlockKind::TemporalStructured, BlockKind::TemporalUnstructured] {
                    if let Some(b) = assembly.block(kind) {
                        idx.push(b.start + w);
                    }
                }
                if idx.is_empty() {
                    return Err(Error::EffectAbsent("temporal".into()));
                }
            }
            Quantity::Eta(i, w) => {
                for b in assembly.blocks() {
                    match b.kind {
                        BlockKind::Beta0 => {
                            idx.push(b.start);
                            coef.push(1.0);
                        }
                        BlockKind::Beta1 => {
                            idx.push(b.start);
                            coef.push(assembly.covariate().map_or(0.0, |z| z[i]));
                        }
                        BlockKind::SpatialStructured | BlockKind::SpatialUnstructured => {
                            idx.push(b.start + i);
                            coef.push(1.0);
                        }
                        BlockKind::TemporalStructured | BlockKind::TemporalUnstructured => {
                            idx.push(b.start + w);
                            coef.push(1.0);
                        }
                        BlockKind::Interaction => {
                            idx.push(b.start + i * t + w);
                            coef.push(1.0);
                        }
                    }
                }
                return Ok((idx, coef));
            }
            Quantity::Hyper(h) => {
                return Err(Error::invalid(format!("{} is not a latent quantity", h.name())))
            }
        }
        coef.resize(idx.len(), 1.0);
        Ok((idx, coef))
    }
}

/// Mean, standard deviation and central 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PosteriorSummary {
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Mixture of Gaussians `Σ w_k N(m_k, s_k²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

impl GaussianMixture {
    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    pub fn sd(&self) -> f64 {
        let mean = self.mean();
        let second: f64 = self
            .weights
            .iter()
            .zip(self.means.iter().zip(&self.sds))
            .map(|(w, (m, s))| w * ((m - mean).powi(2) + s * s))
            .sum();
        second.max(0.0).sqrt()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.sds))
            .map(|(w, (&m, &s))| {
                if s > 0.0 {
                    w * std_normal_cdf((x - m) / s)
                } else if x >= m {
                    *w
                } else {
                    0.0
                }
            })
            .sum()
    }

    /// Quantile by bisection on the CDF.
    pub fn quantile(&self, p: f64) -> f64 {
        let lo0 = self
            .means
            .iter()
            .zip(&self.sds)
            .map(|(m, s)| m - 12.0 * s)
            .fold(f64::INFINITY, f64::min);
        let hi0 = self
            .means
            .iter()
            .zip(&self.sds)
            .map(|(m, s)| m + 12.0 * s)
            .fold(f64::NEG_INFINITY, f64::max);
        let (mut lo, mut hi) = (lo0, hi0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    pub fn summary(&self) -> PosteriorSummary {
        PosteriorSummary {
            mean: self.mean(),
            sd: self.sd(),
            lower: self.quantile(0.025),
            upper: self.quantile(0.975),
        }
    }

    /// Summary of `exp(X)`: log-normal moments, exponentiated quantiles.
    pub fn exp_summary(&self) -> PosteriorSummary {
        let comps = || self.weights.iter().zip(self.means.iter().zip(&self.sds));
        let mean: f64 = comps().map(|(w, (m, s))| w * (m + 0.5 * s * s).exp()).sum();
        let second: f64 = comps().map(|(w, (m, s))| w * (2.0 * m + 2.0 * s * s).exp()).sum();
        PosteriorSummary {
            mean,
            sd: (second - mean * mean).max(0.0).sqrt(),
            lower: self.quantile(0.025).exp(),
            upper: self.quantile(0.975).exp(),
        }
    }
}

/// Posterior of a latent linear functional as a mixture over the
/// integration points.
pub fn latent_mixture(fit: &FitResult, idx: &[usize], coef: &[f64]) -> GaussianMixture {
    GaussianMixture {
        weights: fit.weights(),
        means: fit.points.iter().map(|p| p.approx.mean_of(idx, coef)).collect(),
        sds: fit
            .points
            .iter()
            .map(|p| p.approx.variance_of(idx, coef).sqrt())
            .collect(),
    }
}

/// Summary of a named quantity. Latent quantities are summarized on the
/// latent scale; hyperparameters on their natural scale (precision or
/// probability).
pub fn posterior_summary(assembly: &ModelAssembly, fit: &FitResult, quantity: &str) -> Result<PosteriorSummary> {
    let q = Quantity::parse(quantity, assembly)?;
    summarize_quantity(assembly, fit, q)
}

pub fn summarize_quantity(assembly: &ModelAssembly, fit: &FitResult, q: Quantity) -> Result<PosteriorSummary> {
    match q {
        Quantity::Hyper(kind) => hyper_summary(assembly, fit, kind),
        _ => {
            let (idx, coef) = q.functional(assembly)?;
            Ok(latent_mixture(fit, &idx, &coef).summary())
        }
    }
}

/// Mean and sd from the weighted integration points; the interval maps
/// the Gaussian interval of the internal coordinate through its monotone
/// transform.
pub fn hyper_summary(assembly: &ModelAssembly, fit: &FitResult, kind: HyperKind) -> Result<PosteriorSummary> {
    let k = assembly
        .hyper_index(kind)
        .ok_or_else(|| Error::EffectAbsent(kind.name().to_string()))?;
    let values: Vec<f64> = fit.points.iter().map(|p| kind.to_natural(p.theta[k])).collect();
    let mean: f64 = fit.points.iter().zip(&values).map(|(p, v)| p.weight * v).sum();
    let var: f64 = fit
        .points
        .iter()
        .zip(&values)
        .map(|(p, v)| p.weight * (v - mean).powi(2))
        .sum();
    let centre = fit.theta_mode[k];
    let sd_internal = fit.theta_covariance[(k, k)].max(0.0).sqrt();
    let (lower, upper) = if sd_internal > 0.0 {
        let normal = Normal::new(centre, sd_internal).map_err(|e| Error::invalid(e.to_string()))?;
        (
            kind.to_natural(normal.inverse_cdf(0.025)),
            kind.to_natural(normal.inverse_cdf(0.975)),
        )
    } else {
        let v = kind.to_natural(centre);
        (v, v)
    };
    Ok(PosteriorSummary {
        mean,
        sd: var.sqrt(),
        lower,
        upper,
    })
}
