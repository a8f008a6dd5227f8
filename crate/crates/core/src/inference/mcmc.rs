//! Reference sampler used to validate the Laplace machinery: a
//! preconditioned Metropolis-adjusted Langevin sampler on the constrained
//! latent field, with optional Metropolis moves on the hyperparameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::laplace::{find_mode, GaussianApprox, ModeOptions};
use super::likelihood::observation_loglik;
use crate::error::{Error, Result};
use crate::model::ModelAssembly;
use crate::sparse::SymMatrix;

/// A differentiable log density on `ℝᵈ`.
pub trait LogTarget {
    fn dim(&self) -> usize;
    /// Log density (up to a constant) and its gradient.
    fn log_density(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Langevin step settings.
#[derive(Debug, Clone, PartialEq)]
pub struct MalaOptions {
    pub iterations: usize,
    /// Adaptation iterations before sampling starts; their draws are
    /// discarded.
    pub burn_in: usize,
    pub thin: usize,
    pub initial_step: f64,
    pub target_acceptance: f64,
    pub seed: u64,
}

impl Default for MalaOptions {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            burn_in: 5_000,
            thin: 10,
            initial_step: 0.5,
            target_acceptance: 0.57,
            seed: 0,
        }
    }
}

/// Preconditioned Langevin kernel on `{x : C x = 0}` with `C` given by
/// disjoint index sets and preconditioner `M = diag(m)`.
///
/// Proposal: `x' = x + ½ε² S ∇ + ε P M^{1/2} z`, with `P` the
/// `M`-orthogonal projection onto the constraint subspace and
/// `S = P M = M − M Cᵀ (C M Cᵀ)⁻¹ C M`.
struct Langevin<'a> {
    m: &'a [f64],
    sets: &'a [Vec<usize>],
}

impl Langevin<'_> {
    fn project(&self, y: &mut [f64]) {
        for set in self.sets {
            let num: f64 = set.iter().map(|&i| y[i]).sum();
            let den: f64 = set.iter().map(|&i| self.m[i]).sum();
            let c = num / den;
            for &i in set {
                y[i] -= c * self.m[i];
            }
        }
    }

    fn drift(&self, x: &[f64], grad: &[f64], eps: f64) -> Vec<f64> {
        let mut d: Vec<f64> = grad.iter().zip(self.m).map(|(g, m)| g * m).collect();
        self.project(&mut d);
        x.iter().zip(&d).map(|(a, b)| a + 0.5 * eps * eps * b).collect()
    }

    /// `log q(to | from)` up to a constant shared by both directions.
    fn log_q(&self, to: &[f64], mean: &[f64], eps: f64) -> f64 {
        -0.5 / (eps * eps)
            * to.iter()
                .zip(mean)
                .zip(self.m)
                .map(|((a, b), m)| (a - b) * (a - b) / m)
                .sum::<f64>()
    }

    fn propose<R: Rng>(&self, x: &[f64], grad: &[f64], eps: f64, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let mean = self.drift(x, grad, eps);
        let mut noise: Vec<f64> = self
            .m
            .iter()
            .map(|m| m.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.project(&mut noise);
        let prop = mean.iter().zip(&noise).map(|(a, b)| a + eps * b).collect();
        (prop, mean)
    }
}

struct StepState {
    log_eps: f64,
    accepted: usize,
    tried: usize,
}

impl StepState {
    fn adapt(&mut self, iteration: usize, accept_prob: f64, target: f64) {
        let gain = 1.0 / (iteration as f64 + 10.0).powf(0.6);
        self.log_eps += gain * (accept_prob - target);
    }
}

fn mala_step<R: Rng>(
    target: &dyn LogTarget,
    kernel: &Langevin<'_>,
    x: &mut Vec<f64>,
    current: &mut (f64, Vec<f64>),
    eps: f64,
    rng: &mut R,
) -> Result<(f64, bool)> {
    let (prop, fwd_mean) = kernel.propose(x, &current.1, eps, rng);
    let (lp, grad) = target.log_density(&prop)?;
    let accept_prob = if lp.is_finite() {
        let back_mean = kernel.drift(&prop, &grad, eps);
        let log_ratio =
            lp - current.0 + kernel.log_q(x, &back_mean, eps) - kernel.log_q(&prop, &fwd_mean, eps);
        log_ratio.min(0.0).exp()
    } else {
        0.0
    };
    let accepted = rng.random::<f64>() < accept_prob;
    if accepted {
        *x = prop;
        *current = (lp, grad);
    }
    Ok((accept_prob, accepted))
}

/// Output of [`mala`].
#[derive(Debug, Clone, PartialEq)]
pub struct MalaChain {
    pub samples: Vec<Vec<f64>>,
    /// Acceptance rate after adaptation.
    pub acceptance: f64,
    pub step_size: f64,
}

fn check_mixing(acceptance: f64) -> Result<()> {
    if acceptance < 0.05 {
        Err(Error::OracleFailedToMix { acceptance })
    } else {
        Ok(())
    }
}

/// Runs the preconditioned Langevin sampler on `target` restricted to the
/// sum-to-zero sets `sets`. `x0` must satisfy the constraints.
pub fn mala(
    target: &dyn LogTarget,
    x0: &[f64],
    preconditioner: &[f64],
    sets: &[Vec<usize>],
    options: &MalaOptions,
) -> Result<MalaChain> {
    let d = target.dim();
    if x0.len() != d || preconditioner.len() != d {
        return Err(Error::invalid("dimension mismatch in sampler inputs"));
    }
    if preconditioner.iter().any(|m| !(*m > 0.0) || !m.is_finite()) {
        return Err(Error::invalid("preconditioner must be positive"));
    }
    let kernel = Langevin {
        m: preconditioner,
        sets,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut x = x0.to_vec();
    let mut current = target.log_density(&x)?;
    if !current.0.is_finite() {
        return Err(Error::invalid("sampler started outside the support"));
    }
    let mut step = StepState {
        log_eps: options.initial_step.ln(),
        accepted: 0,
        tried: 0,
    };
    let thin = options.thin.max(1);
    let mut samples = Vec::new();
    for it in 0..options.burn_in + options.iterations {
        let eps = step.log_eps.exp();
        let (a, accepted) = mala_step(target, &kernel, &mut x, &mut current, eps, &mut rng)?;
        if it < options.burn_in {
            step.adapt(it, a, options.target_acceptance);
        } else {
            step.tried += 1;
            step.accepted += usize::from(accepted);
            if (it - options.burn_in) % thin == 0 {
                samples.push(x.clone());
            }
        }
    }
    let acceptance = step.accepted as f64 / step.tried.max(1) as f64;
    check_mixing(acceptance)?;
    Ok(MalaChain {
        samples,
        acceptance,
        step_size: step.log_eps.exp(),
    })
}

/// `x | y, θ` for a fixed hyper vector.
pub struct LatentPosterior<'a> {
    assembly: &'a ModelAssembly,
    q: SymMatrix,
    pi: f64,
}

impl<'a> LatentPosterior<'a> {
    pub fn new(assembly: &'a ModelAssembly, theta: &[f64]) -> Result<Self> {
        Ok(Self {
            assembly,
            q: assembly.joint_latent_precision(theta)?,
            pi: assembly.zero_prob(theta),
        })
    }
}

impl LogTarget for LatentPosterior<'_> {
    fn dim(&self) -> usize {
        self.assembly.dim()
    }

    fn log_density(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let eta = self.assembly.linear_predictor(x);
        let kind = self.assembly.likelihood();
        let mut value = 0.0;
        let mut g = Vec::with_capacity(eta.len());
        for (obs, &e) in self.assembly.observations().iter().zip(&eta) {
            let l = observation_loglik(kind, obs.y, e, obs.offset, self.pi)?;
            value += l.value;
            g.push(l.grad);
        }
        let mut grad = self.assembly.design_transpose_mul(&g);
        let qx = self.q.mul_vec(x);
        value -= 0.5 * x.iter().zip(&qx).map(|(a, b)| a * b).sum::<f64>();
        for (gi, qi) in grad.iter_mut().zip(&qx) {
            *gi -= qi;
        }
        if !value.is_finite() {
            value = f64::NEG_INFINITY;
        }
        Ok((value, grad))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ThetaMode {
    /// Condition on this hyper vector.
    Fixed(Vec<f64>),
    /// Sample the free hyperparameters, starting here.
    Sampled(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct McmcOptions {
    pub theta: ThetaMode,
    pub latent: MalaOptions,
    /// Random-walk scale for each free hyperparameter, internal scale.
    pub theta_step: f64,
}

impl McmcOptions {
    pub fn new(theta: ThetaMode, iterations: usize, seed: u64) -> Self {
        Self {
            theta,
            latent: MalaOptions {
                iterations,
                burn_in: iterations / 4,
                seed,
                ..MalaOptions::default()
            },
            theta_step: 0.3,
        }
    }
}

/// Thinned draws of `(x, θ)` and acceptance statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct McmcSamples {
    pub latent: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
    pub latent_acceptance: f64,
    pub theta_acceptance: Option<f64>,
    pub step_size: f64,
}

impl McmcSamples {
    /// Sample mean of `aᵀx`.
    pub fn mean_of(&self, idx: &[usize], coef: &[f64]) -> f64 {
        self.latent
            .iter()
            .map(|x| idx.iter().zip(coef).map(|(&i, &c)| c * x[i]).sum::<f64>())
            .sum::<f64>()
            / self.latent.len() as f64
    }
}

/// Largest latent dimension the oracle accepts.
pub const ORACLE_MAX_DIM: usize = 500;

fn log_joint(assembly: &ModelAssembly, x: &[f64], theta: &[f64]) -> Result<f64> {
    let target = LatentPosterior::new(assembly, theta)?;
    let (lp, _) = target.log_density(x)?;
    Ok(lp + 0.5 * assembly.prior_log_det(theta) + assembly.log_hyper_prior(theta))
}

fn total_loglik_or_neg_inf(assembly: &ModelAssembly, x: &[f64], theta: &[f64]) -> Result<f64> {
    match super::likelihood::total_loglik(assembly, x, assembly.zero_prob(theta)) {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) | Err(Error::ImpossibleObservation { .. }) => Ok(f64::NEG_INFINITY),
        Err(e) => Err(e),
    }
}

/// Affine map `x = x̂ + B w` onto the constraint subspace, with `B Bᵀ`
/// the constrained covariance of a Gaussian approximation.
struct Whitening {
    center: Vec<f64>,
    basis: DMatrix<f64>,
    // B⁺, rows scaled by Λ^{-1/2}
    inverse: DMatrix<f64>,
}

impl Whitening {
    fn new(ga: &GaussianApprox, n_constraints: usize) -> Result<Self> {
        let d = ga.mode().len();
        let r = d - n_constraints;
        let eig = SymmetricEigen::new(ga.covariance_dense());
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let keep = &order[..r];
        if keep.iter().any(|&k| !(eig.eigenvalues[k] > 0.0)) {
            return Err(Error::invalid("approximate covariance is not positive on the constraint subspace"));
        }
        let basis = DMatrix::from_fn(d, r, |i, c| eig.eigenvectors[(i, keep[c])] * eig.eigenvalues[keep[c]].sqrt());
        let inverse = DMatrix::from_fn(r, d, |c, i| eig.eigenvectors[(i, keep[c])] / eig.eigenvalues[keep[c]].sqrt());
        Ok(Self {
            center: ga.mode().to_vec(),
            basis,
            inverse,
        })
    }

    fn rank(&self) -> usize {
        self.basis.ncols()
    }

    fn to_latent(&self, w: &[f64]) -> Vec<f64> {
        let x = &self.basis * DVector::from_column_slice(w);
        x.iter().zip(&self.center).map(|(a, b)| a + b).collect()
    }

    fn to_whitened(&self, x: &[f64]) -> Vec<f64> {
        let dx = DVector::from_iterator(x.len(), x.iter().zip(&self.center).map(|(a, b)| a - b));
        (&self.inverse * dx).iter().copied().collect()
    }

    fn log_density(&self, inner: &dyn LogTarget, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (lp, g) = inner.log_density(&self.to_latent(w))?;
        let gw = self.basis.transpose() * DVector::from_vec(g);
        Ok((lp, gw.iter().copied().collect()))
    }
}

struct Whitened<'a> {
    metric: &'a Whitening,
    inner: &'a dyn LogTarget,
}

impl LogTarget for Whitened<'_> {
    fn dim(&self) -> usize {
        self.metric.rank()
    }

    fn log_density(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.metric.log_density(self.inner, w)
    }
}

/// Samples the posterior of the latent field (and optionally the free
/// hyperparameters) for validation against the Laplace approximation.
///
/// Latent moves are Langevin steps in coordinates whitened by the Gaussian
/// approximation at the starting hyper vector.
/// Hyperparameter moves alternate a random walk with the latent field held
/// fixed and a random walk that rescales each latent block with its
/// precision, which keeps the prior quadratic form unchanged.
pub fn mcmc_oracle(assembly: &ModelAssembly, options: &McmcOptions) -> Result<McmcSamples> {
    if assembly.dim() > ORACLE_MAX_DIM {
        return Err(Error::invalid(format!(
            "oracle limited to latent dimension {ORACLE_MAX_DIM}, got {}",
            assembly.dim()
        )));
    }
    let (mut theta, sample_theta) = match &options.theta {
        ThetaMode::Fixed(t) => (t.clone(), false),
        ThetaMode::Sampled(t) => (t.clone(), true),
    };
    assembly.check_theta(&theta)?;
    let ga = find_mode(assembly, &theta, None, &ModeOptions::default())?;
    let metric = Whitening::new(&ga, assembly.constraints().len())?;
    let ones = vec![1.0; metric.rank()];
    let kernel = Langevin { m: &ones, sets: &[] };
    let free = assembly.free_hypers();
    let opts = &options.latent;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut x = ga.mode().to_vec();
    let mut w = vec![0.0; metric.rank()];
    let mut target = LatentPosterior::new(assembly, &theta)?;
    let mut current = metric.log_density(&target, &w)?;
    let mut step = StepState {
        log_eps: opts.initial_step.ln(),
        accepted: 0,
        tried: 0,
    };
    let mut theta_scale = options.theta_step;
    let mut theta_accepted = 0usize;
    let mut theta_tried = 0usize;
    let thin = opts.thin.max(1);
    let mut latent_out = Vec::new();
    let mut theta_out = Vec::new();
    for it in 0..opts.burn_in + opts.iterations {
        let eps = step.log_eps.exp();
        let (a, accepted) = {
            let view = Whitened { metric: &metric, inner: &target };
            mala_step(&view, &kernel, &mut w, &mut current, eps, &mut rng)?
        };
        if accepted {
            x = metric.to_latent(&w);
        }
        let sampling = it >= opts.burn_in;
        if sampling {
            step.tried += 1;
            step.accepted += usize::from(accepted);
        } else {
            step.adapt(it, a, opts.target_acceptance);
        }

        if sample_theta && !free.is_empty() {
            let mut moved = false;
            // centred move: x fixed
            let mut prop = theta.clone();
            for &k in &free {
                prop[k] += theta_scale * rng.sample::<f64, _>(StandardNormal);
            }
            let old = log_joint(assembly, &x, &theta)?;
            let new = match log_joint(assembly, &x, &prop) {
                Ok(v) => v,
                Err(Error::ImpossibleObservation { .. }) => f64::NEG_INFINITY,
                Err(e) => return Err(e),
            };
            let p1 = if new.is_finite() { (new - old).min(0.0).exp() } else { 0.0 };
            if rng.random::<f64>() < p1 {
                theta = prop;
                moved = true;
            }
            // non-centred move: rescale blocks with their precision
            let mut prop = theta.clone();
            for &k in &free {
                prop[k] += theta_scale * rng.sample::<f64, _>(StandardNormal);
            }
            let old_scales = assembly.block_log_scales(&theta);
            let new_scales = assembly.block_log_scales(&prop);
            let mut x_new = x.clone();
            for ((block, ls_old), ls_new) in assembly.blocks().iter().zip(&old_scales).zip(&new_scales) {
                let f = (0.5 * (ls_old - ls_new)).exp();
                for i in block.range() {
                    x_new[i] *= f;
                }
            }
            let old = total_loglik_or_neg_inf(assembly, &x, &theta)? + assembly.log_hyper_prior(&theta);
            let new = total_loglik_or_neg_inf(assembly, &x_new, &prop)? + assembly.log_hyper_prior(&prop);
            let p2 = if new.is_finite() { (new - old).min(0.0).exp() } else { 0.0 };
            if rng.random::<f64>() < p2 {
                theta = prop;
                x = x_new;
                moved = true;
            }
            if moved {
                target = LatentPosterior::new(assembly, &theta)?;
                w = metric.to_whitened(&x);
                current = metric.log_density(&target, &w)?;
            }
            if sampling {
                theta_tried += 2;
            } else {
                let gain = 1.0 / (it as f64 + 10.0).powf(0.6);
                theta_scale *= (gain * (0.5 * (p1 + p2) - 0.3)).exp();
            }
            if sampling {
                theta_accepted += usize::from(moved);
            }
        }
        if sampling && (it - opts.burn_in) % thin == 0 {
            latent_out.push(x.clone());
            theta_out.push(theta.clone());
        }
    }
    let latent_acceptance = step.accepted as f64 / step.tried.max(1) as f64;
    check_mixing(latent_acceptance)?;
    Ok(McmcSamples {
        latent: latent_out,
        theta: theta_out,
        latent_acceptance,
        theta_acceptance: (sample_theta && !free.is_empty())
            .then(|| theta_accepted as f64 / (theta_tried / 2).max(1) as f64),
        step_size: step.log_eps.exp(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct StdNormal(usize);

    impl LogTarget for StdNormal {
        fn dim(&self) -> usize {
            self.0
        }

        fn log_density(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
            Ok((-0.5 * x.iter().map(|v| v * v).sum::<f64>(), x.iter().map(|v| -v).collect()))
        }
    }

    #[test]
    fn standard_gaussian_moments() {
        let options = MalaOptions {
            iterations: 100_000,
            burn_in: 2_000,
            thin: 1,
            ..MalaOptions::default()
        };
        let chain = mala(&StdNormal(1), &[0.0], &[1.0], &[], &options).unwrap();
        let n = chain.samples.len() as f64;
        let mean = chain.samples.iter().map(|x| x[0]).sum::<f64>() / n;
        let sd = (chain.samples.iter().map(|x| (x[0] - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((sd - 1.0).abs() < 0.02, "sd {sd}");
        assert!((chain.acceptance - 0.57).abs() < 0.1);
    }

    #[test]
    fn constrained_chain_stays_on_subspace() {
        let options = MalaOptions {
            iterations: 2_000,
            burn_in: 500,
            thin: 1,
            ..MalaOptions::default()
        };
        let sets = vec![vec![0, 1, 2]];
        let chain = mala(&StdNormal(4), &[0.0; 4], &[1.0, 2.0, 0.5, 1.0], &sets, &options).unwrap();
        for x in &chain.samples {
            assert!((x[0] + x[1] + x[2]).abs() < 1e-10);
        }
    }

    #[test]
    fn same_seed_same_chain() {
        let options = MalaOptions {
            iterations: 500,
            burn_in: 100,
            ..MalaOptions::default()
        };
        let a = mala(&StdNormal(3), &[0.0; 3], &[1.0; 3], &[], &options).unwrap();
        let b = mala(&StdNormal(3), &[0.0; 3], &[1.0; 3], &[], &options).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn poor_mixing_is_reported() {
        let options = MalaOptions {
            iterations: 200,
            burn_in: 0,
            initial_step: 1e3,
            ..MalaOptions::default()
        };
        assert!(matches!(
            mala(&StdNormal(50), &[0.0; 50], &[1.0; 50], &[], &options),
            Err(Error::OracleFailedToMix { .. })
        ));
    }
}
