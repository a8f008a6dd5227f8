//! Synthetic panels with known ground truth, and the recovery experiments
//! run on them.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, LogNormal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::epi::{Basis, CauseClass, EpiPanel, Stratum};
use crate::error::{Error, Result};
use crate::graph::ArealGraph;
use crate::inference::dic::select_by_dic;
use crate::inference::explore::{fit, FitOptions};
use crate::inference::posterior::{summarize_quantity, Quantity};
use crate::model::{assemble_panel, parse_key_values, LikelihoodKind, ModelSpec};
use crate::structure::{icar_structure, rw1_structure, scale_gv};
use crate::summaries::{crossing_index, weekly_covariate_series, WeekOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum GraphSpec {
    Lattice { rows: usize, cols: usize },
    /// `n` uniform points in the unit square joined when closer than
    /// `radius`.
    RandomGeometric { n: usize, radius: f64 },
}

impl fmt::Display for GraphSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphSpec::Lattice { rows, cols } => write!(f, "lattice:{rows}x{cols}"),
            GraphSpec::RandomGeometric { n, radius } => write!(f, "geometric:{n}:{radius}"),
        }
    }
}

impl std::str::FromStr for GraphSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unknown graph spec `{s}`"));
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("lattice:") {
            let (r, c) = rest.split_once('x').ok_or_else(bad)?;
            return Ok(GraphSpec::Lattice {
                rows: r.trim().parse().map_err(|_| bad())?,
                cols: c.trim().parse().map_err(|_| bad())?,
            });
        }
        if let Some(rest) = s.strip_prefix("geometric:") {
            let (n, r) = rest.split_once(':').ok_or_else(bad)?;
            return Ok(GraphSpec::RandomGeometric {
                n: n.trim().parse().map_err(|_| bad())?,
                radius: r.trim().parse().map_err(|_| bad())?,
            });
        }
        Err(bad())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CovariateGenerator {
    /// iid uniform on [−1, 1].
    Uniform,
    /// Linear west–east gradient on [−1, 1] plus small noise.
    Gradient,
}

/// Data-generating configuration. Precisions are on the natural scale.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimScenario {
    pub graph: GraphSpec,
    pub weeks: usize,
    pub likelihood: LikelihoodKind,
    pub beta0: f64,
    pub beta1: f64,
    /// Per-week covariate effect; overrides `beta1` when present.
    pub beta1_schedule: Option<Vec<f64>>,
    pub tau_bym: f64,
    pub phi_mix: f64,
    pub tau_rw1: f64,
    pub tau_iid_time: f64,
    pub tau_interaction: f64,
    pub zip_prob: f64,
    pub covariate: CovariateGenerator,
    /// Median area population.
    pub population_median: f64,
    /// Log-scale spread of area populations.
    pub population_sdlog: f64,
    /// Share of deaths that are confirmed (the rest are suspected).
    pub confirmed_share: f64,
    pub seed: u64,
}

/// Population share of each stratum (sex × age band).
const STRATUM_SHARES: [f64; 8] = [0.29, 0.13, 0.06, 0.015, 0.31, 0.12, 0.06, 0.015];
/// Deaths per person over the simulated period, by stratum.
const STRATUM_RATES: [f64; 8] = [5e-5, 6e-4, 3.5e-3, 1.4e-2, 3e-5, 3.5e-4, 2.2e-3, 1.1e-2];
const AGE_BANDS: [&str; 4] = ["0-39", "40-59", "60-79", "80+"];

impl Default for SimScenario {
    fn default() -> Self {
        Self {
            graph: GraphSpec::Lattice { rows: 5, cols: 10 },
            weeks: 13,
            likelihood: LikelihoodKind::Poisson,
            beta0: 0.0,
            beta1: 0.75f64.ln(),
            beta1_schedule: None,
            tau_bym: 10.0,
            phi_mix: 0.5,
            tau_rw1: 10.0,
            tau_iid_time: 50.0,
            tau_interaction: 25.0,
            zip_prob: 0.0,
            covariate: CovariateGenerator::Uniform,
            population_median: 200_000.0,
            population_sdlog: 0.5,
            confirmed_share: 0.55,
            seed: 0,
        }
    }
}

impl SimScenario {
    /// Mid-series sign flip of the covariate effect: `beta` before week
    /// index `at`, `−beta` from it on.
    pub fn with_sign_flip(mut self, beta: f64, at: usize) -> Self {
        self.beta1_schedule = Some((0..self.weeks).map(|t| if t < at { beta } else { -beta }).collect());
        self
    }

    pub fn n_areas(&self) -> usize {
        match self.graph {
            GraphSpec::Lattice { rows, cols } => rows * cols,
            GraphSpec::RandomGeometric { n, .. } => n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_areas() < 4 {
            return Err(Error::invalid("scenario needs at least 4 areas"));
        }
        if self.weeks < 2 {
            return Err(Error::invalid("scenario needs at least 2 weeks"));
        }
        for (name, v) in [
            ("tau_bym", self.tau_bym),
            ("tau_rw1", self.tau_rw1),
            ("tau_iid_time", self.tau_iid_time),
            ("tau_interaction", self.tau_interaction),
            ("population_median", self.population_median),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.phi_mix > 0.0 && self.phi_mix < 1.0) {
            return Err(Error::invalid("phi_mix must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.zip_prob) {
            return Err(Error::invalid("zip_prob must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.confirmed_share) {
            return Err(Error::invalid("confirmed_share must lie in [0, 1]"));
        }
        if !(self.population_sdlog >= 0.0) {
            return Err(Error::invalid("population_sdlog must be non-negative"));
        }
        if let Some(s) = &self.beta1_schedule {
            if s.len() != self.weeks {
                return Err(Error::invalid("beta1_schedule needs one value per week"));
            }
        }
        if let GraphSpec::RandomGeometric { radius, .. } = self.graph {
            if !(radius > 0.0) {
                return Err(Error::invalid("geometric radius must be positive"));
            }
        }
        Ok(())
    }

    /// Parses a `key = value` scenario file; absent keys keep defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = SimScenario::default();
        for (key, (line, value)) in parse_key_values(text)? {
            let num = || -> Result<f64> {
                value
                    .parse::<f64>()
                    .map_err(|_| Error::parse(line, format!("`{value}` is not a number")))
            };
            let int = || -> Result<usize> {
                value
                    .parse::<usize>()
                    .map_err(|_| Error::parse(line, format!("`{value}` is not a count")))
            };
            match key.as_str() {
                "graph" => s.graph = value.parse()?,
                "weeks" => s.weeks = int()?,
                "likelihood" => s.likelihood = value.parse()?,
                "beta0" => s.beta0 = num()?,
                "beta1" => s.beta1 = num()?,
                "beta1_schedule" => {
                    s.beta1_schedule = Some(
                        value
                            .split(',')
                            .map(|v| {
                                v.trim()
                                    .parse::<f64>()
                                    .map_err(|_| Error::parse(line, format!("`{v}` is not a number")))
                            })
                            .collect::<Result<_>>()?,
                    )
                }
                "tau_bym" => s.tau_bym = num()?,
                "phi_mix" => s.phi_mix = num()?,
                "tau_rw1" => s.tau_rw1 = num()?,
                "tau_iid_time" => s.tau_iid_time = num()?,
                "tau_interaction" => s.tau_interaction = num()?,
                "zip_prob" => s.zip_prob = num()?,
                "covariate" => {
                    s.covariate = match value.as_str() {
                        "uniform" => CovariateGenerator::Uniform,
                        "gradient" => CovariateGenerator::Gradient,
                        other => return Err(Error::parse(line, format!("unknown covariate generator `{other}`"))),
                    }
                }
                "population_median" => s.population_median = num()?,
                "population_sdlog" => s.population_sdlog = num()?,
                "confirmed_share" => s.confirmed_share = num()?,
                "seed" => {
                    s.seed = value
                        .parse()
                        .map_err(|_| Error::parse(line, format!("`{value}` is not a seed")))?
                }
                other => return Err(Error::parse(line, format!("unknown key `{other}`"))),
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn to_config(&self) -> String {
        let mut out = format!(
            "graph = {}\nweeks = {}\nlikelihood = {}\nbeta0 = {}\nbeta1 = {}\n",
            self.graph, self.weeks, self.likelihood, self.beta0, self.beta1
        );
        if let Some(s) = &self.beta1_schedule {
            let v: Vec<String> = s.iter().map(|b| b.to_string()).collect();
            out.push_str(&format!("beta1_schedule = {}\n", v.join(", ")));
        }
        out.push_str(&format!(
            "tau_bym = {}\nphi_mix = {}\ntau_rw1 = {}\ntau_iid_time = {}\ntau_interaction = {}\nzip_prob = {}\ncovariate = {}\npopulation_median = {}\npopulation_sdlog = {}\nconfirmed_share = {}\nseed = {}\n",
            self.tau_bym,
            self.phi_mix,
            self.tau_rw1,
            self.tau_iid_time,
            self.tau_interaction,
            self.zip_prob,
            match self.covariate {
                CovariateGenerator::Uniform => "uniform",
                CovariateGenerator::Gradient => "gradient",
            },
            self.population_median,
            self.population_sdlog,
            self.confirmed_share,
            self.seed
        ));
        out
    }

    fn beta1_at(&self, week: usize) -> f64 {
        self.beta1_schedule.as_ref().map_or(self.beta1, |s| s[week])
    }
}

/// The latent fields and rates behind a simulated panel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimTruth {
    pub beta0: f64,
    /// Covariate effect per week.
    pub beta1: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub gamma: Vec<f64>,
    pub phi: Vec<f64>,
    /// Area-major.
    pub delta: Vec<f64>,
    /// Linear predictor without offset, area-major.
    pub eta: Vec<f64>,
    /// Expected counts from the generating rates, area-major.
    pub expected: Vec<f64>,
}

fn build_graph<R: Rng>(spec: GraphSpec, rng: &mut R) -> Result<(ArealGraph, Vec<(f64, f64)>)> {
    match spec {
        GraphSpec::Lattice { rows, cols } => {
            let g = ArealGraph::lattice(rows, cols);
            // lattice ids sort row-major
            let coords = (0..rows * cols)
                .map(|k| ((k % cols) as f64 / (cols.max(2) - 1) as f64, (k / cols) as f64))
                .collect();
            Ok((g, coords))
        }
        GraphSpec::RandomGeometric { n, radius } => {
            let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
            let mut pairs = Vec::new();
            for j in 1..n {
                for i in 0..j {
                    let d = ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();
                    if d < radius {
                        pairs.push((i, j));
                    }
                }
            }
            let width = n.to_string().len();
            let ids = (0..n).map(|k| format!("g{k:0width$}")).collect();
            Ok((ArealGraph::new(ids, &pairs)?, pts))
        }
    }
}

/// Draw from the sum-to-zero constrained Gaussian with intrinsic precision
/// `q` (dense), one constraint per listed component; singleton components
/// are standard normal.
pub(crate) fn constrained_draw<R: Rng>(q: &DMatrix<f64>, components: &[Vec<usize>], rng: &mut R) -> Result<Vec<f64>> {
    let n = q.nrows();
    let mut aug = q.clone();
    for comp in components {
        if comp.len() == 1 {
            aug[(comp[0], comp[0])] = 1.0;
            continue;
        }
        let w = 1.0 / comp.len() as f64;
        for &i in comp {
            for &j in comp {
                aug[(i, j)] += w;
            }
        }
    }
    let chol = aug.cholesky().ok_or(Error::NotPositiveDefinite {
        pivot: 0,
        value: f64::NAN,
    })?;
    // x = L⁻ᵀ z has covariance (L Lᵀ)⁻¹
    let z = nalgebra::DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let x = chol.l().transpose().solve_upper_triangular(&z).expect("triangular solve");
    let mut x: Vec<f64> = x.iter().copied().collect();
    for comp in components {
        if comp.len() > 1 {
            let mean = comp.iter().map(|&i| x[i]).sum::<f64>() / comp.len() as f64;
            for &i in comp {
                x[i] -= mean;
            }
        }
    }
    Ok(x)
}

/// Scaled ICAR draw with unit geometric-mean marginal variance.
pub fn draw_scaled_icar<R: Rng>(graph: &ArealGraph, rng: &mut R) -> Result<Vec<f64>> {
    let s = scale_gv(&icar_structure(graph)?)?;
    constrained_draw(&s.to_dense(), s.components(), rng)
}

/// Simulates a panel from the scenario's generative model.
pub fn simulate_panel(scenario: &SimScenario) -> Result<(EpiPanel, SimTruth)> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let (graph, coords) = build_graph(scenario.graph, &mut rng)?;
    let n = graph.n_units();
    let t = scenario.weeks;

    let covariate: Vec<f64> = match scenario.covariate {
        CovariateGenerator::Uniform => (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect(),
        CovariateGenerator::Gradient => {
            let (lo, hi) = coords
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
            coords
                .iter()
                .map(|p| {
                    let base = if hi > lo { 2.0 * (p.0 - lo) / (hi - lo) - 1.0 } else { 0.0 };
                    (base + 0.1 * rng.sample::<f64, _>(StandardNormal)).clamp(-1.0, 1.0)
                })
                .collect()
        }
    };

    let sizes = LogNormal::new(scenario.population_median.ln(), scenario.population_sdlog)
        .map_err(|e| Error::invalid(e.to_string()))?;
    let mut population = Vec::with_capacity(n * STRATUM_SHARES.len());
    for _ in 0..n {
        let size: f64 = sizes.sample(&mut rng);
        for share in STRATUM_SHARES {
            population.push((size * share).round().max(1.0));
        }
    }

    let u_star = draw_scaled_icar(&graph, &mut rng)?;
    let sd_u = (scenario.phi_mix / scenario.tau_bym).sqrt();
    let sd_v = ((1.0 - scenario.phi_mix) / scenario.tau_bym).sqrt();
    let u: Vec<f64> = u_star.iter().map(|x| sd_u * x).collect();
    let v: Vec<f64> = (0..n).map(|_| sd_v * rng.sample::<f64, _>(StandardNormal)).collect();
    let rw = rw1_structure(t)?;
    let gamma: Vec<f64> = constrained_draw(&rw.to_dense(), rw.components(), &mut rng)?
        .into_iter()
        .map(|x| x / scenario.tau_rw1.sqrt())
        .collect();
    let phi: Vec<f64> = (0..t)
        .map(|_| rng.sample::<f64, _>(StandardNormal) / scenario.tau_iid_time.sqrt())
        .collect();
    let delta: Vec<f64> = (0..n * t)
        .map(|_| rng.sample::<f64, _>(StandardNormal) / scenario.tau_interaction.sqrt())
        .collect();
    let beta1: Vec<f64> = (0..t).map(|w| scenario.beta1_at(w)).collect();

    let s = STRATUM_SHARES.len();
    let mut eta = Vec::with_capacity(n * t);
    let mut expected = Vec::with_capacity(n * t);
    let mut deaths = Vec::with_capacity(n * t * s);
    for i in 0..n {
        let stratum_expected: Vec<f64> = (0..s)
            .map(|k| population[i * s + k] * STRATUM_RATES[k] / t as f64)
            .collect();
        let e: f64 = stratum_expected.iter().sum();
        for w in 0..t {
            let h = scenario.beta0 + beta1[w] * covariate[i] + u[i] + v[i] + gamma[w] + phi[w] + delta[i * t + w];
            eta.push(h);
            expected.push(e);
            let mean = e * h.exp();
            let structural_zero =
                scenario.likelihood == LikelihoodKind::ZeroInflatedPoisson && rng.random::<f64>() < scenario.zip_prob;
            let y = if structural_zero || mean <= 0.0 {
                0
            } else {
                Poisson::new(mean)
                    .map_err(|e| Error::invalid(e.to_string()))?
                    .sample(&mut rng) as u64
            };
            // split across strata, then causes
            let mut left = y;
            let mut weight_left: f64 = stratum_expected.iter().sum();
            for k in 0..s {
                let c = if k + 1 == s || left == 0 {
                    left
                } else {
                    let p = (stratum_expected[k] / weight_left).clamp(0.0, 1.0);
                    Binomial::new(left, p).unwrap().sample(&mut rng)
                };
                left -= c;
                weight_left -= stratum_expected[k];
                let confirmed = Binomial::new(c, scenario.confirmed_share).unwrap().sample(&mut rng);
                deaths.push([confirmed, c - confirmed]);
            }
        }
    }
    let strata = ["M", "F"]
        .iter()
        .flat_map(|sex| AGE_BANDS.iter().map(move |a| Stratum::new(*sex, *a)))
        .collect();
    let panel = EpiPanel::new(
        Arc::new(graph),
        (1..=t as u32).collect(),
        strata,
        deaths,
        population,
        Some(covariate),
    )?;
    Ok((
        panel,
        SimTruth {
            beta0: scenario.beta0,
            beta1,
            u,
            v,
            gamma,
            phi,
            delta,
            eta,
            expected,
        },
    ))
}

/// Outcome of one recovery replicate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub seed: u64,
    pub estimate: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub covered: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryReport {
    pub truth: f64,
    pub replicates: Vec<ReplicateOutcome>,
    pub coverage: f64,
    pub mean_absolute_error: f64,
    pub mean_estimate: f64,
    /// Monte-Carlo standard error of the mean estimate.
    pub mc_standard_error: f64,
    pub failures: usize,
}

impl RecoveryReport {
    fn from_outcomes(truth: f64, replicates: Vec<ReplicateOutcome>) -> Result<Self> {
        let total = replicates.len();
        let ok: Vec<&ReplicateOutcome> = replicates.iter().filter(|r| r.estimate.is_some()).collect();
        let failures = total - ok.len();
        if failures * 5 > total || ok.is_empty() {
            return Err(Error::ExperimentFailed { failed: failures, total });
        }
        let m = ok.len() as f64;
        let est: Vec<f64> = ok.iter().map(|r| r.estimate.unwrap()).collect();
        let mean_estimate = est.iter().sum::<f64>() / m;
        let var = est.iter().map(|e| (e - mean_estimate).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
        Ok(Self {
            truth,
            coverage: ok.iter().filter(|r| r.covered == Some(true)).count() as f64 / m,
            mean_absolute_error: est.iter().map(|e| (e - truth).abs()).sum::<f64>() / m,
            mean_estimate,
            mc_standard_error: (var / m).sqrt(),
            failures,
            replicates,
        })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["replicate", "seed", "estimate", "q025", "q975", "covered", "error"])?;
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.replicates {
            w.write_record([
                r.replicate.to_string(),
                r.seed.to_string(),
                f(r.estimate),
                f(r.lower),
                f(r.upper),
                r.covered.map(|c| c.to_string()).unwrap_or_default(),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_text(&self) -> String {
        format!(
            "replicates: {}\nfailures: {}\ntruth: {:.6}\nmean estimate: {:.6} (MC s.e. {:.6})\ncoverage of 95% intervals: {:.3}\nmean absolute error: {:.6}\n",
            self.replicates.len(),
            self.failures,
            self.truth,
            self.mean_estimate,
            self.mc_standard_error,
            self.coverage,
            self.mean_absolute_error
        )
    }
}

/// Fit spec matching a scenario: every effect, covariate on, whole-period
/// expected counts of total deaths.
pub fn matching_spec(scenario: &SimScenario) -> ModelSpec {
    let mut spec = ModelSpec::spatiotemporal(scenario.likelihood, true);
    spec.cause = CauseClass::Total;
    spec.basis = Basis::WholePeriod;
    spec
}

fn replicate_scenario(scenario: &SimScenario, r: usize) -> SimScenario {
    let mut s = scenario.clone();
    s.seed = scenario.seed.wrapping_add(r as u64);
    s
}

/// Simulates and refits `replicates` times, recording 95%-interval
/// coverage of the covariate effect. Replicate `r` uses seed `seed + r`.
pub fn recovery_experiment(
    scenario: &SimScenario,
    replicates: usize,
    spec: &ModelSpec,
    options: &FitOptions,
) -> Result<RecoveryReport> {
    if replicates < 20 {
        return Err(Error::invalid("recovery needs at least 20 replicates"));
    }
    if scenario.beta1_schedule.is_some() {
        return Err(Error::invalid("recovery expects a constant covariate effect"));
    }
    scenario.validate()?;
    let truth = scenario.beta1;
    let outcomes: Vec<ReplicateOutcome> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let sc = replicate_scenario(scenario, r);
            let started = std::time::Instant::now();
            let run = || -> Result<(f64, f64, f64)> {
                let (panel, _) = simulate_panel(&sc)?;
                let assembly = assemble_panel(spec, &panel)?;
                let fitted = fit(&assembly, options)?;
                let s = summarize_quantity(&assembly, &fitted, Quantity::Beta1)?;
                Ok((s.mean, s.lower, s.upper))
            };
            let out = match run() {
                Ok((m, lo, hi)) => ReplicateOutcome {
                    replicate: r,
                    seed: sc.seed,
                    estimate: Some(m),
                    lower: Some(lo),
                    upper: Some(hi),
                    covered: Some(lo <= truth && truth <= hi),
                    error: None,
                },
                Err(e) => ReplicateOutcome {
                    replicate: r,
                    seed: sc.seed,
                    estimate: None,
                    lower: None,
                    upper: None,
                    covered: None,
                    error: Some(e.to_string()),
                },
            };
            log::info!("replicate {r} done in {:.2?}", started.elapsed());
            out
        })
        .collect();
    RecoveryReport::from_outcomes(truth, outcomes)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DicPreferenceReport {
    /// `(replicate, poisson DIC, ZIP DIC)`; failed replicates are absent.
    pub pairs: Vec<(usize, f64, f64)>,
    pub prefer_poisson: f64,
    pub failures: usize,
}

/// Fits both likelihoods to each replicate and records how often DIC
/// prefers Poisson.
pub fn dic_preference_experiment(
    scenario: &SimScenario,
    replicates: usize,
    options: &FitOptions,
) -> Result<DicPreferenceReport> {
    scenario.validate()?;
    let mut options = options.clone();
    if options.dic_samples == 0 {
        options.dic_samples = 1000;
    }
    let results: Vec<Result<(usize, f64, f64)>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let sc = replicate_scenario(scenario, r);
            let (panel, _) = simulate_panel(&sc)?;
            let mut dics = Vec::new();
            for lik in [LikelihoodKind::Poisson, LikelihoodKind::ZeroInflatedPoisson] {
                let mut spec = matching_spec(&sc);
                spec.likelihood = lik;
                let assembly = assemble_panel(&spec, &panel)?;
                let mut o = options.clone();
                o.seed = sc.seed;
                let fitted = fit(&assembly, &o)?;
                dics.push(fitted.dic.expect("dic requested").dic);
            }
            Ok((r, dics[0], dics[1]))
        })
        .collect();
    let total = results.len();
    let pairs: Vec<(usize, f64, f64)> = results.into_iter().filter_map(|r| r.ok()).collect();
    let failures = total - pairs.len();
    if failures * 5 > total || pairs.is_empty() {
        return Err(Error::ExperimentFailed { failed: failures, total });
    }
    let wins = pairs
        .iter()
        .filter(|(_, p, z)| select_by_dic(&[*p, *z]).ok() == Some(0))
        .count();
    Ok(DicPreferenceReport {
        prefer_poisson: wins as f64 / pairs.len() as f64,
        pairs,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShiftOutcome {
    pub replicate: usize,
    pub true_index: usize,
    pub estimated_index: Option<usize>,
    pub hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShiftReport {
    pub outcomes: Vec<ShiftOutcome>,
    pub hit_rate: f64,
}

/// Simulates a sign flip of the covariate effect and checks whether the
/// per-week covariate-RR series crosses 1 within `tolerance` weeks of the
/// flip. The scenario must carry a `beta1_schedule`.
pub fn shift_experiment(
    scenario: &SimScenario,
    replicates: usize,
    tolerance: usize,
    options: &FitOptions,
) -> Result<ShiftReport> {
    scenario.validate()?;
    let schedule = scenario
        .beta1_schedule
        .as_ref()
        .ok_or_else(|| Error::invalid("shift experiment needs a beta1 schedule"))?;
    let true_index = (1..schedule.len())
        .find(|&k| schedule[k].signum() != schedule[k - 1].signum())
        .ok_or_else(|| Error::invalid("schedule has no sign change"))?;
    let mut spec = ModelSpec::spatial_weekly(LikelihoodKind::Poisson);
    spec.cause = CauseClass::Total;
    let outcomes: Vec<Result<ShiftOutcome>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let sc = replicate_scenario(scenario, r);
            let (panel, _) = simulate_panel(&sc)?;
            let series = weekly_covariate_series(&panel, &spec, options)?;
            // index into the full week range; skipped weeks drop out
            let fitted: Vec<(usize, f64)> = series
                .iter()
                .enumerate()
                .filter_map(|(k, w)| match &w.outcome {
                    WeekOutcome::Fitted(c) => Some((k, c.rr.mean)),
                    _ => None,
                })
                .collect();
            let rr: Vec<f64> = fitted.iter().map(|(_, v)| *v).collect();
            let estimated_index = crossing_index(&rr).map(|k| fitted[k].0);
            let hit = estimated_index.is_some_and(|k| k.abs_diff(true_index) <= tolerance);
            Ok(ShiftOutcome {
                replicate: r,
                true_index,
                estimated_index,
                hit,
            })
        })
        .collect();
    let outcomes: Vec<ShiftOutcome> = outcomes.into_iter().collect::<Result<_>>()?;
    let hit_rate = outcomes.iter().filter(|o| o.hit).count() as f64 / outcomes.len().max(1) as f64;
    Ok(ShiftReport { outcomes, hit_rate })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scenario_matches_desk_configuration() {
        let s = SimScenario::default();
        assert_eq!(s.n_areas(), 50);
        assert_eq!(s.weeks, 13);
        assert!((s.beta1 - 0.75f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn same_seed_same_panel() {
        let s = SimScenario::default();
        let (a, ta) = simulate_panel(&s).unwrap();
        let (b, tb) = simulate_panel(&s).unwrap();
        assert_eq!(a.count_matrix(CauseClass::Total), b.count_matrix(CauseClass::Total));
        assert_eq!(ta, tb);
    }

    #[test]
    fn constrained_fields_sum_to_zero() {
        for seed in 0..5 {
            let s = SimScenario {
                seed,
                ..SimScenario::default()
            };
            let (_, truth) = simulate_panel(&s).unwrap();
            assert!(truth.u.iter().sum::<f64>().abs() < 1e-8);
            assert!(truth.gamma.iter().sum::<f64>().abs() < 1e-8);
        }
    }

    #[test]
    fn scenario_round_trip() {
        let s = SimScenario::default().with_sign_flip(0.3, 6);
        let parsed = SimScenario::parse(&s.to_config()).unwrap();
        assert_eq!(parsed, s);
        assert!(SimScenario::parse("weeks = 1").is_err());
        assert!(SimScenario::parse("nonsense = 1").is_err());
    }
}
