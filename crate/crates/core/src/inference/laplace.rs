//! Gaussian approximation of `x | y, θ` at the conditional mode, and the
//! Laplace approximation of the hyperparameter marginal.
//!
//! Linear constraints `C x = 0` are handled by factoring
//! `H̃ = H + Cᵀ K C` instead of `H`. On the constraint subspace the two
//! define the same Gaussian, and `ln det H̃ + ln det(C H̃⁻¹ Cᵀ)` does not
//! depend on `K`, so `H̃` can be factored even when `H` itself is singular.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::likelihood::{observation_loglik, LogLik};
use crate::error::{Error, Result};
use crate::model::ModelAssembly;
use crate::sparse::{Ldl, SelectedInverse, SymMatrix};

/// Newton iteration controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeOptions {
    /// Converged when the ∞-norm of the projected gradient drops below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
}

impl Default for ModeOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 50,
            max_halvings: 30,
        }
    }
}

/// Gaussian approximation `N(x̂, H⁻¹)` restricted to `C x = 0`.
#[derive(Debug)]
pub struct GaussianApprox {
    theta: Vec<f64>,
    mode: Vec<f64>,
    factor: Ldl,
    // H̃⁻¹ Cᵀ, one column per constraint
    v: Vec<Vec<f64>>,
    m_inv: DMatrix<f64>,
    log_det: f64,
    loglik: f64,
    prior_quad: f64,
    prior_log_det: f64,
    log_hyper_prior: f64,
    iterations: usize,
    gradient_norm: f64,
    sets: Vec<Vec<usize>>,
    selected: OnceLock<SelectedInverse>,
}

impl Clone for GaussianApprox {
    fn clone(&self) -> Self {
        Self {
            theta: self.theta.clone(),
            mode: self.mode.clone(),
            factor: self.factor.clone(),
            v: self.v.clone(),
            m_inv: self.m_inv.clone(),
            log_det: self.log_det,
            loglik: self.loglik,
            prior_quad: self.prior_quad,
            prior_log_det: self.prior_log_det,
            log_hyper_prior: self.log_hyper_prior,
            iterations: self.iterations,
            gradient_norm: self.gradient_norm,
            sets: self.sets.clone(),
            selected: OnceLock::new(),
        }
    }
}

struct Evaluation {
    objective: f64,
    loglik: f64,
    prior_quad: f64,
    terms: Vec<LogLik>,
}

fn evaluate(assembly: &ModelAssembly, q: &SymMatrix, x: &[f64], pi: f64) -> Result<Evaluation> {
    let eta = assembly.linear_predictor(x);
    let kind = assembly.likelihood();
    let mut terms = Vec::with_capacity(eta.len());
    let mut loglik = 0.0;
    for (obs, &e) in assembly.observations().iter().zip(&eta) {
        let t = observation_loglik(kind, obs.y, e, obs.offset, pi)?;
        loglik += t.value;
        terms.push(t);
    }
    let prior_quad = q.quad_form(x);
    Ok(Evaluation {
        objective: loglik - 0.5 * prior_quad,
        loglik,
        prior_quad,
        terms,
    })
}

fn project(sets: &[Vec<usize>], g: &mut [f64]) {
    for set in sets {
        let mean = set.iter().map(|&i| g[i]).sum::<f64>() / set.len() as f64;
        for &i in set {
            g[i] -= mean;
        }
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct Factored {
    factor: Ldl,
    v: Vec<Vec<f64>>,
    m_inv: DMatrix<f64>,
    log_det_m: f64,
}

fn factor_with_constraints(
    assembly: &ModelAssembly,
    q: &SymMatrix,
    kappa: &[f64],
    terms: &[LogLik],
) -> Result<Factored> {
    let mut h = q.clone();
    // non-concave ZIP zeros contribute no curvature
    let w: Vec<f64> = terms.iter().map(|t| (-t.hess).max(0.0)).collect();
    assembly.add_curvature(&w, h.values_mut());
    assembly.add_constraint_penalty(kappa, h.values_mut());
    let factor = Ldl::factor(assembly.symbolic(), &h)?;
    let sets: Vec<&Vec<usize>> = assembly.constraints().iter().map(|c| &c.indices).collect();
    let k = sets.len();
    let dim = assembly.dim();
    let v: Vec<Vec<f64>> = sets
        .iter()
        .map(|set| {
            let mut e = vec![0.0; dim];
            for &i in *set {
                e[i] = 1.0;
            }
            factor.solve(&e)
        })
        .collect();
    let m = DMatrix::from_fn(k, k, |r, c| sets[r].iter().map(|&i| v[c][i]).sum::<f64>());
    let (m_inv, log_det_m) = if k == 0 {
        (DMatrix::zeros(0, 0), 0.0)
    } else {
        let sym = (&m + m.transpose()) * 0.5;
        let chol = sym.cholesky().ok_or(Error::NotPositiveDefinite {
            pivot: 0,
            value: f64::NAN,
        })?;
        let ld = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        (chol.inverse(), ld)
    };
    Ok(Factored {
        factor,
        v,
        m_inv,
        log_det_m,
    })
}

impl Factored {
    /// `x − V M⁻¹ C x`
    fn correct(&self, sets: &[Vec<usize>], x: &mut [f64]) {
        if sets.is_empty() {
            return;
        }
        let cx = DVector::from_iterator(sets.len(), sets.iter().map(|s| s.iter().map(|&i| x[i]).sum::<f64>()));
        let coef = &self.m_inv * cx;
        for (col, &c) in self.v.iter().zip(coef.iter()) {
            for (xi, vi) in x.iter_mut().zip(col) {
                *xi -= c * vi;
            }
        }
    }
}

/// Finds the mode of `x | y, θ` by damped Newton iteration on the
/// constraint subspace and returns the Gaussian approximation there.
pub fn find_mode(
    assembly: &ModelAssembly,
    theta: &[f64],
    start: Option<&[f64]>,
    options: &ModeOptions,
) -> Result<GaussianApprox> {
    assembly.check_theta(theta)?;
    let q = assembly.joint_latent_precision(theta)?;
    let kappa = assembly.constraint_penalties(theta);
    let pi = assembly.zero_prob(theta);
    let sets: Vec<Vec<usize>> = assembly.constraints().iter().map(|c| c.indices.clone()).collect();
    let dim = assembly.dim();

    let mut x = match start {
        Some(s) if s.len() == dim && s.iter().all(|v| v.is_finite()) => s.to_vec(),
        _ => vec![0.0; dim],
    };
    project(&sets, &mut x);
    let mut eval = evaluate(assembly, &q, &x, pi)?;
    if !eval.objective.is_finite() && start.is_some() {
        x = vec![0.0; dim];
        eval = evaluate(assembly, &q, &x, pi)?;
    }
    let mut trace = Vec::new();
    let mut iteration = 0;
    loop {
        let g: Vec<f64> = eval.terms.iter().map(|t| t.grad).collect();
        let mut grad = assembly.design_transpose_mul(&g);
        let qx = q.mul_vec(&x);
        for (gi, qi) in grad.iter_mut().zip(&qx) {
            *gi -= qi;
        }
        let mut projected = grad.clone();
        project(&sets, &mut projected);
        let norm = max_abs(&projected);
        trace.push(norm);
        let factored = factor_with_constraints(assembly, &q, &kappa, &eval.terms)?;
        if norm < options.tolerance {
            return Ok(finish(assembly, theta, x, eval, factored, sets, iteration, norm));
        }
        if iteration >= options.max_iterations {
            return Err(Error::ModeNotFound {
                iterations: iteration,
                reason: format!("projected gradient norm {norm:e} above tolerance"),
                trace,
            });
        }
        iteration += 1;
        let mut step = factored.factor.solve(&grad);
        factored.correct(&sets, &mut step);

        let floor = eval.objective - 1e-12 * eval.objective.abs().max(1.0);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=options.max_halvings {
            let trial: Vec<f64> = x.iter().zip(&step).map(|(a, b)| a + scale * b).collect();
            let e = evaluate(assembly, &q, &trial, pi)?;
            if e.objective.is_finite() && e.objective >= floor {
                accepted = Some((trial, e));
                break;
            }
            scale *= 0.5;
        }
        match accepted {
            Some((trial, e)) => {
                x = trial;
                eval = e;
            }
            None => {
                // No representable ascent is left: the gradient has hit its
                // rounding floor. Accept when it is small in relative terms.
                let scale_ref = 1.0 + max_abs(&assembly.design_transpose_mul(&g)) + max_abs(&qx);
                if norm < 1e-9 * scale_ref {
                    return Ok(finish(assembly, theta, x, eval, factored, sets, iteration, norm));
                }
                return Err(Error::ModeNotFound {
                    iterations: iteration,
                    reason: "line search found no ascent".into(),
                    trace,
                });
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    assembly: &ModelAssembly,
    theta: &[f64],
    x: Vec<f64>,
    eval: Evaluation,
    factored: Factored,
    sets: Vec<Vec<usize>>,
    iterations: usize,
    gradient_norm: f64,
) -> GaussianApprox {
    GaussianApprox {
        theta: theta.to_vec(),
        mode: x,
        log_det: factored.factor.log_det() + factored.log_det_m,
        factor: factored.factor,
        v: factored.v,
        m_inv: factored.m_inv,
        loglik: eval.loglik,
        prior_quad: eval.prior_quad,
        prior_log_det: assembly.prior_log_det(theta),
        log_hyper_prior: assembly.log_hyper_prior(theta),
        iterations,
        gradient_norm,
        sets,
        selected: OnceLock::new(),
    }
}

impl GaussianApprox {
    /// Rebuilds the approximation at a previously found mode, without
    /// iterating.
    pub fn at_point(assembly: &ModelAssembly, theta: &[f64], x: &[f64]) -> Result<Self> {
        assembly.check_theta(theta)?;
        if x.len() != assembly.dim() {
            return Err(Error::invalid("latent vector has the wrong length"));
        }
        let q = assembly.joint_latent_precision(theta)?;
        let kappa = assembly.constraint_penalties(theta);
        let pi = assembly.zero_prob(theta);
        let sets: Vec<Vec<usize>> = assembly.constraints().iter().map(|c| c.indices.clone()).collect();
        let eval = evaluate(assembly, &q, x, pi)?;
        let factored = factor_with_constraints(assembly, &q, &kappa, &eval.terms)?;
        Ok(finish(assembly, theta, x.to_vec(), eval, factored, sets, 0, f64::NAN))
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn mode(&self) -> &[f64] {
        &self.mode
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn gradient_norm(&self) -> f64 {
        self.gradient_norm
    }

    /// Σ log p(y | x̂, θ)
    pub fn loglik_at_mode(&self) -> f64 {
        self.loglik
    }

    /// `ln det H̃ + ln det(C H̃⁻¹ Cᵀ)`
    pub fn log_det_precision(&self) -> f64 {
        self.log_det
    }

    /// Laplace approximation of `ln p(y | θ)`.
    pub fn log_evidence(&self) -> f64 {
        self.loglik - 0.5 * self.prior_quad + 0.5 * self.prior_log_det - 0.5 * self.log_det
    }

    /// `ln p(y | θ) + ln π(θ)`, the unnormalized log posterior of `θ`.
    pub fn log_marginal(&self) -> f64 {
        self.log_evidence() + self.log_hyper_prior
    }

    fn correct(&self, x: &mut [f64]) {
        if self.sets.is_empty() {
            return;
        }
        let cx = DVector::from_iterator(
            self.sets.len(),
            self.sets.iter().map(|s| s.iter().map(|&i| x[i]).sum::<f64>()),
        );
        let coef = &self.m_inv * cx;
        for (col, &c) in self.v.iter().zip(coef.iter()) {
            for (xi, vi) in x.iter_mut().zip(col) {
                *xi -= c * vi;
            }
        }
    }

    /// Posterior mean of `aᵀx` for sparse `a`.
    pub fn mean_of(&self, idx: &[usize], coef: &[f64]) -> f64 {
        idx.iter().zip(coef).map(|(&i, &c)| c * self.mode[i]).sum()
    }

    /// Posterior variance of `aᵀx` under the constraints.
    pub fn variance_of(&self, idx: &[usize], coef: &[f64]) -> f64 {
        let sel = self.selected.get_or_init(|| self.factor.selected_inverse());
        let mut quad = Some(0.0);
        'outer: for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                match sel.get(i, j) {
                    Some(s) => *quad.as_mut().unwrap() += coef[a] * coef[b] * s,
                    None => {
                        quad = None;
                        break 'outer;
                    }
                }
            }
        }
        let quad = match quad {
            Some(q) => q,
            None => {
                let mut e = vec![0.0; self.mode.len()];
                for (&i, &c) in idx.iter().zip(coef) {
                    e[i] += c;
                }
                let z = self.factor.solve(&e);
                e.iter().zip(&z).map(|(a, b)| a * b).sum()
            }
        };
        if self.sets.is_empty() {
            return quad.max(0.0);
        }
        // Vᵀa = C H̃⁻¹ a
        let vta = DVector::from_iterator(
            self.v.len(),
            self.v
                .iter()
                .map(|col| idx.iter().zip(coef).map(|(&i, &c)| c * col[i]).sum::<f64>()),
        );
        let corr = vta.dot(&(&self.m_inv * &vta));
        (quad - corr).max(0.0)
    }

    /// Marginal variances of every latent coordinate.
    pub fn marginal_variances(&self) -> Vec<f64> {
        (0..self.mode.len())
            .map(|i| self.variance_of(&[i], &[1.0]))
            .collect()
    }

    /// Dense constrained covariance (small models only).
    pub fn covariance_dense(&self) -> DMatrix<f64> {
        let n = self.mode.len();
        let mut out = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let mut z = self.factor.solve(&e);
            self.correct(&mut z);
            for i in 0..n {
                out[(i, j)] = z[i];
            }
        }
        out
    }

    /// Maps standard-normal `z` to a draw from the approximation.
    pub fn sample_from(&self, z: &[f64]) -> Vec<f64> {
        let mut w = self.factor.sample_transform(z);
        self.correct(&mut w);
        for (wi, m) in w.iter_mut().zip(&self.mode) {
            *wi += m;
        }
        w
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.mode.len()).map(|_| rng.sample(StandardNormal)).collect();
        self.sample_from(&z)
    }
}

/// Laplace approximation of `ln p(θ | y)` up to a constant, with the
/// Gaussian approximation it was computed from.
pub fn log_marginal(
    assembly: &ModelAssembly,
    theta: &[f64],
    start: Option<&[f64]>,
    options: &ModeOptions,
) -> Result<(f64, GaussianApprox)> {
    let ga = find_mode(assembly, theta, start, options)?;
    Ok((ga.log_marginal(), ga))
}
