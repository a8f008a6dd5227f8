//! Hyperparameter exploration: locate the posterior mode of `θ`, measure
//! its curvature, and place a central composite design around it.

use std::sync::Mutex;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use super::dic::{compute_dic, Dic};
use super::laplace::{find_mode, GaussianApprox, ModeOptions};
use crate::error::{Error, Result};
use crate::model::ModelAssembly;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integration {
    /// Central composite design around the mode.
    Ccd,
    /// The mode alone.
    Mode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub mode: ModeOptions,
    pub max_evaluations: usize,
    /// Spread of simplex values at which the optimizer stops.
    pub f_tolerance: f64,
    /// Simplex size at which the optimizer stops.
    pub x_tolerance: f64,
    /// Finite-difference step for the Hessian, internal scale.
    pub hessian_step: f64,
    /// Smallest eigenvalue kept in the Hessian of `−ln p(θ | y)`.
    pub eigen_floor: f64,
    pub integration: Integration,
    /// Overrides the CCD scaling `f0`.
    pub ccd_f0: Option<f64>,
    /// Number of posterior draws for DIC; zero disables it.
    pub dic_samples: usize,
    pub seed: u64,
    /// Starting point (full hyper vector, internal scale).
    pub start: Option<Vec<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            mode: ModeOptions::default(),
            max_evaluations: 500,
            f_tolerance: 1e-7,
            x_tolerance: 1e-4,
            hessian_step: 0.01,
            eigen_floor: 1e-2,
            integration: Integration::Ccd,
            ccd_f0: None,
            dic_samples: 1000,
            seed: 0,
            start: None,
        }
    }
}

/// One integration point.
#[derive(Debug, Clone)]
pub struct HyperPoint {
    pub theta: Vec<f64>,
    pub log_marginal: f64,
    pub design_weight: f64,
    /// Normalized integration weight.
    pub weight: f64,
    pub approx: GaussianApprox,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub points: Vec<HyperPoint>,
    /// Posterior mode of the full hyper vector.
    pub theta_mode: Vec<f64>,
    /// Gaussian covariance of `θ` at the mode; fixed coordinates have zero
    /// rows and columns.
    pub theta_covariance: DMatrix<f64>,
    pub evaluations: usize,
    pub dic: Option<Dic>,
    /// Design points dropped because the inner optimization failed.
    pub dropped_points: usize,
}

impl FitResult {
    /// The integration point at the mode.
    pub fn mode_point(&self) -> &HyperPoint {
        &self.points[0]
    }

    pub fn weights(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.weight).collect()
    }

    /// Weighted mean of the conditional modes.
    pub fn latent_mean(&self) -> Vec<f64> {
        let dim = self.points[0].approx.mode().len();
        let mut out = vec![0.0; dim];
        for p in &self.points {
            for (o, m) in out.iter_mut().zip(p.approx.mode()) {
                *o += p.weight * m;
            }
        }
        out
    }
}

pub(crate) struct NmOutcome {
    pub best_x: Vec<f64>,
    pub best_f: f64,
    pub evaluations: usize,
    pub converged: bool,
    pub f_spread: f64,
}

/// Nelder–Mead minimization with an evaluation budget.
pub(crate) fn nelder_mead(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    step: f64,
    max_evaluations: usize,
    f_tolerance: f64,
    x_tolerance: f64,
) -> NmOutcome {
    let m = x0.len();
    let mut evaluations = 0;
    let mut eval = |x: &[f64], count: &mut usize| {
        *count += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(m + 1);
    let f0 = eval(x0, &mut evaluations);
    simplex.push((x0.to_vec(), f0));
    for k in 0..m {
        let mut x = x0.to_vec();
        x[k] += step;
        let v = eval(&x, &mut evaluations);
        simplex.push((x, v));
    }
    let mut converged = false;
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread = simplex[m].1 - simplex[0].1;
        let size = simplex[1..]
            .iter()
            .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if m == 0 || (spread.abs() <= f_tolerance * (1.0 + simplex[0].1.abs()) && size <= x_tolerance) {
            converged = true;
            break;
        }
        if evaluations >= max_evaluations {
            break;
        }
        let centroid: Vec<f64> = (0..m)
            .map(|k| simplex[..m].iter().map(|(x, _)| x[k]).sum::<f64>() / m as f64)
            .collect();
        let along = |t: f64, worst: &[f64]| -> Vec<f64> {
            centroid
                .iter()
                .zip(worst)
                .map(|(c, w)| c + t * (w - c))
                .collect()
        };
        let worst = simplex[m].0.clone();
        let xr = along(-1.0, &worst);
        let fr = eval(&xr, &mut evaluations);
        if fr < simplex[0].1 {
            let xe = along(-2.0, &worst);
            let fe = eval(&xe, &mut evaluations);
            simplex[m] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[m - 1].1 {
            simplex[m] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[m].1 {
                let xc = along(-0.5, &worst);
                let fc = eval(&xc, &mut evaluations);
                (xc, fc)
            } else {
                let xc = along(0.5, &worst);
                let fc = eval(&xc, &mut evaluations);
                (xc, fc)
            };
            if fc < simplex[m].1.min(fr) {
                simplex[m] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for vertex in simplex.iter_mut().skip(1) {
                    let x: Vec<f64> = best
                        .iter()
                        .zip(&vertex.0)
                        .map(|(b, v)| b + 0.5 * (v - b))
                        .collect();
                    let v = eval(&x, &mut evaluations);
                    *vertex = (x, v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    NmOutcome {
        f_spread: simplex[m].1 - simplex[0].1,
        best_x: simplex[0].0.clone(),
        best_f: simplex[0].1,
        evaluations,
        converged,
    }
}

/// CCD scaling: `√3` in one dimension, `1.1` otherwise.
pub fn ccd_f0(m: usize) -> f64 {
    if m == 1 {
        3f64.sqrt()
    } else {
        1.1
    }
}

/// Standardized CCD points: the center, a two-level (fractional) factorial
/// at `±f0`, and axial points at `±f0·√m`. All non-center points lie on the
/// sphere of radius `f0·√m`.
pub fn ccd_design(m: usize, f0: f64) -> Result<Vec<Vec<f64>>> {
    let mut points = vec![vec![0.0; m]];
    if m == 0 {
        return Ok(points);
    }
    if m == 1 {
        points.push(vec![f0]);
        points.push(vec![-f0]);
        return Ok(points);
    }
    if m > 7 {
        return Err(Error::invalid(format!("no composite design for {m} hyperparameters")));
    }
    let free = if m <= 4 { m } else { m - 1 };
    for code in 0..(1usize << free) {
        let mut p: Vec<f64> = (0..free)
            .map(|k| if code >> k & 1 == 1 { f0 } else { -f0 })
            .collect();
        if free < m {
            let sign: f64 = p.iter().map(|v| v.signum()).product();
            p.push(sign * f0);
        }
        points.push(p);
    }
    let r = f0 * (m as f64).sqrt();
    for k in 0..m {
        for s in [1.0, -1.0] {
            let mut p = vec![0.0; m];
            p[k] = s * r;
            points.push(p);
        }
    }
    Ok(points)
}

/// Design weight of a non-center point relative to the center, chosen so
/// that for a Gaussian `θ` posterior the weighted points reproduce its
/// covariance.
pub fn ccd_weight(m: usize, n_points: usize, f0: f64) -> f64 {
    (m as f64 * f0 * f0 / 2.0).exp() / ((n_points - 1) as f64 * (f0 * f0 - 1.0))
}

/// Normalized weights `∝ design_weight · exp(log_marginal)`, summed in
/// point order.
pub fn integration_weights(design_weights: &[f64], log_marginals: &[f64]) -> Vec<f64> {
    let top = log_marginals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = design_weights
        .iter()
        .zip(log_marginals)
        .map(|(w, lm)| w * (lm - top).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|r| r / total).collect()
}

/// Fits the model: mode search, Hessian, integration design and DIC.
pub fn fit(assembly: &ModelAssembly, options: &FitOptions) -> Result<FitResult> {
    let free = assembly.free_hypers();
    let base = match &options.start {
        Some(s) => {
            assembly.check_theta(s)?;
            s.clone()
        }
        None => assembly.default_theta(),
    };
    let expand = |z: &[f64]| -> Vec<f64> {
        let mut t = base.clone();
        for (&k, &v) in free.iter().zip(z) {
            t[k] = v;
        }
        t
    };

    // mode search with warm starts from the best latent mode so far
    let warm: Mutex<Option<(f64, Vec<f64>)>> = Mutex::new(None);
    let mut last_error: Option<Error> = None;
    let mut objective = |z: &[f64]| -> f64 {
        let theta = expand(z);
        let start = warm.lock().unwrap().as_ref().map(|(_, x)| x.clone());
        match find_mode(assembly, &theta, start.as_deref(), &options.mode) {
            Ok(ga) => {
                let lm = ga.log_marginal();
                let mut w = warm.lock().unwrap();
                if w.as_ref().map_or(true, |(best, _)| lm > *best) {
                    *w = Some((lm, ga.mode().to_vec()));
                }
                -lm
            }
            Err(e) => {
                log::debug!("inner optimization failed at {theta:?}: {e}");
                last_error = Some(e);
                f64::INFINITY
            }
        }
    };
    let z0: Vec<f64> = free.iter().map(|&k| base[k]).collect();
    let nm = nelder_mead(
        &mut objective,
        &z0,
        1.0,
        options.max_evaluations,
        options.f_tolerance,
        options.x_tolerance,
    );
    if !nm.best_f.is_finite() {
        return Err(last_error.unwrap_or(Error::OptimizerNotConverged {
            evaluations: nm.evaluations,
            best_theta: expand(&nm.best_x),
            best_value: f64::NEG_INFINITY,
        }));
    }
    if !nm.converged {
        // accept a budget-limited result whose simplex has flattened out
        if nm.f_spread > 1e-3 {
            return Err(Error::OptimizerNotConverged {
                evaluations: nm.evaluations,
                best_theta: expand(&nm.best_x),
                best_value: -nm.best_f,
            });
        }
        log::warn!(
            "optimizer budget exhausted with value spread {:e}; using best point",
            nm.f_spread
        );
    }
    let theta_mode = expand(&nm.best_x);
    let warm_mode = warm.into_inner().unwrap().map(|(_, x)| x);
    let center = find_mode(assembly, &theta_mode, warm_mode.as_deref(), &options.mode)?;
    let mut evaluations = nm.evaluations + 1;

    let m = free.len();
    let n_all = base.len();
    let mut theta_covariance = DMatrix::zeros(n_all, n_all);
    let mut points = Vec::new();
    let mut dropped_points = 0;
    if m == 0 || options.integration == Integration::Mode {
        if m > 0 {
            let (cov, used) = hessian_covariance(assembly, &theta_mode, &free, center.mode(), options)?;
            evaluations += used;
            theta_covariance = cov;
        }
        points.push(HyperPoint {
            theta: theta_mode.clone(),
            log_marginal: center.log_marginal(),
            design_weight: 1.0,
            weight: 1.0,
            approx: center,
        });
    } else {
        let (cov, used) = hessian_covariance(assembly, &theta_mode, &free, center.mode(), options)?;
        evaluations += used;
        theta_covariance = cov.clone();
        let sub = DMatrix::from_fn(m, m, |i, j| cov[(free[i], free[j])]);
        let eig = SymmetricEigen::new(sub);
        // θ = θ* + V Λ^{1/2} z, with Λ the covariance eigenvalues
        let transform = DMatrix::from_fn(m, m, |i, j| {
            eig.eigenvectors[(i, j)] * eig.eigenvalues[j].max(0.0).sqrt()
        });
        let f0 = options.ccd_f0.unwrap_or_else(|| ccd_f0(m));
        let design = ccd_design(m, f0)?;
        let w_other = ccd_weight(m, design.len(), f0);
        let center_mode = center.mode().to_vec();
        let evaluated: Vec<(Vec<f64>, f64, Result<GaussianApprox>)> = design[1..]
            .par_iter()
            .map(|z| {
                let zv = nalgebra::DVector::from_column_slice(z);
                let shift = &transform * zv;
                let mut theta = theta_mode.clone();
                for (a, &k) in free.iter().enumerate() {
                    theta[k] += shift[a];
                }
                let ga = find_mode(assembly, &theta, Some(&center_mode), &options.mode);
                (theta, w_other, ga)
            })
            .collect();
        evaluations += evaluated.len();
        points.push(HyperPoint {
            theta: theta_mode.clone(),
            log_marginal: center.log_marginal(),
            design_weight: 1.0,
            weight: 0.0,
            approx: center,
        });
        for (theta, w, ga) in evaluated {
            match ga {
                Ok(ga) if ga.log_marginal().is_finite() => points.push(HyperPoint {
                    theta,
                    log_marginal: ga.log_marginal(),
                    design_weight: w,
                    weight: 0.0,
                    approx: ga,
                }),
                Ok(_) => dropped_points += 1,
                Err(e) => {
                    log::warn!("dropping design point {theta:?}: {e}");
                    dropped_points += 1;
                }
            }
        }
        let design: Vec<f64> = points.iter().map(|p| p.design_weight).collect();
        let lm: Vec<f64> = points.iter().map(|p| p.log_marginal).collect();
        for (p, w) in points.iter_mut().zip(integration_weights(&design, &lm)) {
            p.weight = w;
        }
    }

    let mut result = FitResult {
        points,
        theta_mode,
        theta_covariance,
        evaluations,
        dic: None,
        dropped_points,
    };
    if options.dic_samples > 0 {
        result.dic = Some(compute_dic(assembly, &result, options.dic_samples, options.seed)?);
    }
    Ok(result)
}

/// Inverse of the floored finite-difference Hessian of `−ln p(θ | y)` over
/// the free coordinates, embedded in the full hyper layout.
fn hessian_covariance(
    assembly: &ModelAssembly,
    theta: &[f64],
    free: &[usize],
    warm: &[f64],
    options: &FitOptions,
) -> Result<(DMatrix<f64>, usize)> {
    let m = free.len();
    let h = options.hessian_step;
    let mut offsets: Vec<Vec<(usize, f64)>> = vec![vec![]];
    for a in 0..m {
        offsets.push(vec![(a, h)]);
        offsets.push(vec![(a, -h)]);
    }
    for a in 0..m {
        for b in a + 1..m {
            for (sa, sb) in [(h, h), (h, -h), (-h, h), (-h, -h)] {
                offsets.push(vec![(a, sa), (b, sb)]);
            }
        }
    }
    let values: Vec<Result<f64>> = offsets
        .par_iter()
        .map(|off| {
            let mut t = theta.to_vec();
            for &(a, s) in off {
                t[free[a]] += s;
            }
            find_mode(assembly, &t, Some(warm), &options.mode).map(|ga| -ga.log_marginal())
        })
        .collect();
    let values: Vec<f64> = values.into_iter().collect::<Result<_>>()?;
    let f0 = values[0];
    let mut hess = DMatrix::zeros(m, m);
    for a in 0..m {
        hess[(a, a)] = (values[1 + 2 * a] - 2.0 * f0 + values[2 + 2 * a]) / (h * h);
    }
    let mut k = 1 + 2 * m;
    for a in 0..m {
        for b in a + 1..m {
            let v = (values[k] - values[k + 1] - values[k + 2] + values[k + 3]) / (4.0 * h * h);
            hess[(a, b)] = v;
            hess[(b, a)] = v;
            k += 4;
        }
    }
    let eig = SymmetricEigen::new(hess);
    let inv_vals = eig.eigenvalues.map(|l| 1.0 / l.max(options.eigen_floor));
    let sub = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
    let n = theta.len();
    let mut cov = DMatrix::zeros(n, n);
    for a in 0..m {
        for b in 0..m {
            cov[(free[a], free[b])] = sub[(a, b)];
        }
    }
    Ok((cov, offsets.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nelder_mead_finds_quadratic_minimum() {
        let mut f = |x: &[f64]| (x[0] - 1.0).powi(2) + 3.0 * (x[1] + 2.0).powi(2) + 0.5 * x[0] * x[1];
        let out = nelder_mead(&mut f, &[0.0, 0.0], 1.0, 500, 1e-12, 1e-7);
        assert!(out.converged);
        // stationary point of the quadratic
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 6.0]);
        let b = nalgebra::DVector::from_vec(vec![2.0, -12.0]);
        let x = a.lu().solve(&b).unwrap();
        assert!((out.best_x[0] - x[0]).abs() < 1e-4);
        assert!((out.best_x[1] - x[1]).abs() < 1e-4);
    }

    #[test]
    fn nelder_mead_respects_budget() {
        let mut n = 0;
        let mut f = |x: &[f64]| {
            n += 1;
            x.iter().map(|v| v.abs().sqrt()).sum::<f64>()
        };
        let out = nelder_mead(&mut f, &[3.0, 4.0, 5.0], 1.0, 40, 0.0, 0.0);
        assert!(!out.converged);
        assert!(out.evaluations <= 40 + 4);
    }

    #[test]
    fn design_sizes() {
        assert_eq!(ccd_design(0, 1.1).unwrap().len(), 1);
        assert_eq!(ccd_design(1, 3f64.sqrt()).unwrap().len(), 3);
        assert_eq!(ccd_design(2, 1.1).unwrap().len(), 1 + 4 + 4);
        assert_eq!(ccd_design(4, 1.1).unwrap().len(), 1 + 16 + 8);
        assert_eq!(ccd_design(5, 1.1).unwrap().len(), 1 + 16 + 10);
        assert_eq!(ccd_design(6, 1.1).unwrap().len(), 1 + 32 + 12);
        assert!(ccd_design(8, 1.1).is_err());
    }

    #[test]
    fn design_points_share_a_radius() {
        for m in 1..=7 {
            let f0 = ccd_f0(m);
            let pts = ccd_design(m, f0).unwrap();
            for p in &pts[1..] {
                let r: f64 = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((r - f0 * (m as f64).sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn design_weights_recover_gaussian_moments() {
        // weights × Gaussian density reproduce mean 0 and identity covariance
        for m in 1..=6 {
            let f0 = ccd_f0(m);
            let pts = ccd_design(m, f0).unwrap();
            let w = ccd_weight(m, pts.len(), f0);
            let weights: Vec<f64> = pts
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    let d = if k == 0 { 1.0 } else { w };
                    d * (-0.5 * p.iter().map(|v| v * v).sum::<f64>()).exp()
                })
                .collect();
            let total: f64 = weights.iter().sum();
            for a in 0..m {
                for b in 0..m {
                    let c: f64 = pts
                        .iter()
                        .zip(&weights)
                        .map(|(p, w)| w * p[a] * p[b])
                        .sum::<f64>()
                        / total;
                    let expected = if a == b { 1.0 } else { 0.0 };
                    assert!((c - expected).abs() < 1e-12, "m={m} ({a},{b}) {c}");
                }
                let mean: f64 = pts.iter().zip(&weights).map(|(p, w)| w * p[a]).sum::<f64>() / total;
                assert!(mean.abs() < 1e-12);
            }
        }
    }
}
