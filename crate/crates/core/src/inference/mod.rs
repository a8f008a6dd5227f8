//! Approximate Bayesian inference for the assembled latent Gaussian model.

pub mod dic;
pub mod explore;
pub mod laplace;
pub mod likelihood;
pub mod mcmc;
pub mod posterior;

pub use dic::{compute_dic, select_by_dic, Dic};
pub use explore::{fit, FitOptions, FitResult, HyperPoint, Integration};
pub use laplace::{find_mode, log_marginal, GaussianApprox, ModeOptions};
pub use likelihood::{gaussian_loglik, poisson_loglik, zip_loglik, LogLik};
pub use mcmc::{mcmc_oracle, McmcOptions, McmcSamples, ThetaMode};
pub use posterior::{posterior_summary, PosteriorSummary, Quantity};
