//! Latent Gaussian model declarations and their assembly into an indexed
//! latent structure.
//!
//! Latent layout, in order: `β0`, `β1`, `u` (structured spatial, n), `v`
//! (unstructured spatial, n), `γ` (RW1, T), `φ` (iid temporal, T) and `δ`
//! (iid interaction, n·T, area-major). Only active effects take space.
//!
//! The BYM2 pair is stored on the natural scale: `u = √(φ_mix/τ_b)·u*` and
//! `v = √((1−φ_mix)/τ_b)·v*`, where `u*` has the scaled ICAR precision and
//! `v*` is standard normal, so the combined spatial effect of an area is
//! simply `u_i + v_i` and its block precisions are `(τ_b/φ_mix)·Q*` and
//! `(τ_b/(1−φ_mix))·I`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::epi::{expected_counts, Basis, CauseClass, EpiPanel, ExpectedCounts};
use crate::error::{Error, Result};
use crate::graph::ArealGraph;
use crate::sparse::{LdlSymbolic, Ordering, SymMatrix, SymPattern};
use crate::structure::{icar_structure, rw1_structure, scale_gv, StructureMatrix};

/// Prior precision of the fixed effects (a vague proper Gaussian).
pub const FIXED_EFFECT_PRECISION: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LikelihoodKind {
    Poisson,
    ZeroInflatedPoisson,
    /// Gaussian observations with known precision around `offset + η`.
    /// Used to check the Laplace machinery, where it is exact.
    Gaussian { precision: f64 },
}

impl FromStr for LikelihoodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "poisson" => Ok(LikelihoodKind::Poisson),
            "zip" | "zipoisson" | "zero-inflated-poisson" | "zeroinflatedpoisson" => {
                Ok(LikelihoodKind::ZeroInflatedPoisson)
            }
            other => Err(Error::invalid(format!("unknown likelihood `{other}`"))),
        }
    }
}

impl fmt::Display for LikelihoodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LikelihoodKind::Poisson => f.write_str("poisson"),
            LikelihoodKind::ZeroInflatedPoisson => f.write_str("zip"),
            LikelihoodKind::Gaussian { precision } => write!(f, "gaussian({precision})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Effect {
    Intercept,
    Covariate,
    Bym2Spatial,
    Rw1Temporal,
    IidTemporal,
    IidInteraction,
}

impl Effect {
    pub const ALL: [Effect; 6] = [
        Effect::Intercept,
        Effect::Covariate,
        Effect::Bym2Spatial,
        Effect::Rw1Temporal,
        Effect::IidTemporal,
        Effect::IidInteraction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Effect::Intercept => "intercept",
            Effect::Covariate => "covariate",
            Effect::Bym2Spatial => "bym2_spatial",
            Effect::Rw1Temporal => "rw1_temporal",
            Effect::IidTemporal => "iid_temporal",
            Effect::IidInteraction => "iid_interaction",
        }
    }

    pub fn is_random(self) -> bool {
        !matches!(self, Effect::Intercept | Effect::Covariate)
    }
}

impl fmt::Display for Effect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Effect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Effect::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown effect `{s}`")))
    }
}

/// Penalized-complexity prior on a standard deviation: `P(σ > u) = alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcPrior {
    pub u: f64,
    pub alpha: f64,
}

impl Default for PcPrior {
    fn default() -> Self {
        Self { u: 1.0, alpha: 0.01 }
    }
}

impl PcPrior {
    pub fn new(u: f64, alpha: f64) -> Result<Self> {
        pc_precision_rate(u, alpha)?;
        Ok(Self { u, alpha })
    }

    pub fn rate(&self) -> f64 {
        -self.alpha.ln() / self.u
    }
}

/// Rate `λ` of the exponential prior on σ with `P(σ > u) = alpha`.
pub fn pc_precision_rate(u: f64, alpha: f64) -> Result<f64> {
    if !(u > 0.0) || !u.is_finite() {
        return Err(Error::invalid(format!("PC prior threshold must be positive, got {u}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!(
            "PC prior tail probability must lie in (0, 1), got {alpha}"
        )));
    }
    Ok(-alpha.ln() / u)
}

/// Hyperparameters, each on its internal (unconstrained) scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HyperKind {
    /// log τ_b, total BYM2 precision
    LogPrecisionBym,
    /// logit φ_mix, share of the structured component
    LogitMixing,
    /// log τ_γ
    LogPrecisionRw1,
    /// log τ_φ
    LogPrecisionIidTime,
    /// log τ_δ
    LogPrecisionInteraction,
    /// logit π, zero-inflation probability
    LogitZeroProb,
}

impl HyperKind {
    pub const ALL: [HyperKind; 6] = [
        HyperKind::LogPrecisionBym,
        HyperKind::LogitMixing,
        HyperKind::LogPrecisionRw1,
        HyperKind::LogPrecisionIidTime,
        HyperKind::LogPrecisionInteraction,
        HyperKind::LogitZeroProb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HyperKind::LogPrecisionBym => "tau_bym",
            HyperKind::LogitMixing => "phi_mix",
            HyperKind::LogPrecisionRw1 => "tau_rw1",
            HyperKind::LogPrecisionIidTime => "tau_iid_time",
            HyperKind::LogPrecisionInteraction => "tau_interaction",
            HyperKind::LogitZeroProb => "zip_prob",
        }
    }

    pub fn is_precision(self) -> bool {
        !matches!(self, HyperKind::LogitMixing | HyperKind::LogitZeroProb)
    }

    /// Internal value to natural scale (precision or probability).
    pub fn to_natural(self, internal: f64) -> f64 {
        if self.is_precision() {
            internal.exp()
        } else {
            logistic(internal)
        }
    }

    pub fn to_internal(self, natural: f64) -> f64 {
        if self.is_precision() {
            natural.ln()
        } else {
            (natural / (1.0 - natural)).ln()
        }
    }

    /// Starting value of the hyperparameter search.
    pub fn default_start(self) -> f64 {
        match self {
            HyperKind::LogitMixing => 0.0,
            HyperKind::LogitZeroProb => (0.1f64 / 0.9).ln(),
            _ => 4f64.ln(),
        }
    }

    fn effect(self) -> Option<Effect> {
        match self {
            HyperKind::LogPrecisionBym | HyperKind::LogitMixing => Some(Effect::Bym2Spatial),
            HyperKind::LogPrecisionRw1 => Some(Effect::Rw1Temporal),
            HyperKind::LogPrecisionIidTime => Some(Effect::IidTemporal),
            HyperKind::LogPrecisionInteraction => Some(Effect::IidInteraction),
            HyperKind::LogitZeroProb => None,
        }
    }
}

impl FromStr for HyperKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        HyperKind::ALL
            .into_iter()
            .find(|h| h.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown hyperparameter `{s}`")))
    }
}

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + eˣ) without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Priors: PC priors on every random-effect precision, optionally with some
/// hyperparameters held fixed (given on the natural scale).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PriorSpec {
    pub pc: BTreeMap<Effect, PcPrior>,
    pub fixed: BTreeMap<HyperKind, f64>,
}

impl PriorSpec {
    pub fn pc_for(&self, effect: Effect) -> PcPrior {
        self.pc.get(&effect).copied().unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub likelihood: LikelihoodKind,
    /// Active effects in canonical order.
    pub effects: Vec<Effect>,
    pub priors: PriorSpec,
    pub cause: CauseClass,
    pub basis: Basis,
}

impl ModelSpec {
    pub fn new(likelihood: LikelihoodKind, effects: &[Effect]) -> Self {
        let mut effects: Vec<Effect> = effects.to_vec();
        if !effects.contains(&Effect::Intercept) {
            effects.push(Effect::Intercept);
        }
        effects.sort();
        effects.dedup();
        Self {
            likelihood,
            effects,
            priors: PriorSpec::default(),
            cause: CauseClass::Total,
            basis: Basis::WholePeriod,
        }
    }

    /// Intercept, optional covariate, BYM2, RW1, iid temporal and iid
    /// interaction over all weeks.
    pub fn spatiotemporal(likelihood: LikelihoodKind, with_covariate: bool) -> Self {
        let mut effects = vec![
            Effect::Intercept,
            Effect::Bym2Spatial,
            Effect::Rw1Temporal,
            Effect::IidTemporal,
            Effect::IidInteraction,
        ];
        if with_covariate {
            effects.push(Effect::Covariate);
        }
        Self::new(likelihood, &effects)
    }

    /// Intercept, covariate and BYM2, fitted to a single week against that
    /// week's city rates.
    pub fn spatial_weekly(likelihood: LikelihoodKind) -> Self {
        let mut spec = Self::new(
            likelihood,
            &[Effect::Intercept, Effect::Covariate, Effect::Bym2Spatial],
        );
        spec.basis = Basis::PerWeek;
        spec
    }

    pub fn has(&self, effect: Effect) -> bool {
        self.effects.contains(&effect)
    }

    /// Parses the `key = value` model configuration. Recognized keys:
    /// `likelihood`, `effects` (comma-separated), `cause`, `basis`,
    /// `prior.<effect>.u`, `prior.<effect>.alpha` and `fix.<hyper>`.
    pub fn parse_config(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let likelihood = match kv.get("likelihood") {
            Some((_, v)) => v.parse()?,
            None => LikelihoodKind::Poisson,
        };
        let effects = match kv.get("effects") {
            Some((_, v)) => v
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(str::parse)
                .collect::<Result<Vec<Effect>>>()?,
            None => ModelSpec::spatiotemporal(likelihood, true).effects,
        };
        let mut spec = ModelSpec::new(likelihood, &effects);
        for (key, (line, value)) in &kv {
            let bad = |m: String| Error::parse(*line, m);
            match key.as_str() {
                "likelihood" | "effects" => {}
                "cause" => spec.cause = value.parse()?,
                "basis" => spec.basis = value.parse()?,
                k if k.starts_with("prior.") => {
                    let rest = &k["prior.".len()..];
                    let (effect, field) = rest
                        .rsplit_once('.')
                        .ok_or_else(|| bad(format!("malformed key `{k}`")))?;
                    let effect: Effect = effect.parse()?;
                    if !effect.is_random() {
                        return Err(bad(format!("`{effect}` has no precision prior")));
                    }
                    let v: f64 = value
                        .parse()
                        .map_err(|_| bad(format!("`{value}` is not a number")))?;
                    let entry = spec.priors.pc.entry(effect).or_default();
                    match field {
                        "u" => entry.u = v,
                        "alpha" => entry.alpha = v,
                        _ => return Err(bad(format!("unknown prior field `{field}`"))),
                    }
                }
                k if k.starts_with("fix.") => {
                    let hyper: HyperKind = k["fix.".len()..].parse()?;
                    let v: f64 = value
                        .parse()
                        .map_err(|_| bad(format!("`{value}` is not a number")))?;
                    spec.priors.fixed.insert(hyper, v);
                }
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }
        for prior in spec.priors.pc.values() {
            pc_precision_rate(prior.u, prior.alpha)?;
        }
        Ok(spec)
    }

    /// Renders the configuration in the format read by [`Self::parse_config`].
    pub fn to_config(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("likelihood = {}\n", self.likelihood));
        let names: Vec<&str> = self.effects.iter().map(|e| e.name()).collect();
        out.push_str(&format!("effects = {}\n", names.join(", ")));
        out.push_str(&format!("cause = {}\n", self.cause));
        out.push_str(&format!("basis = {}\n", self.basis));
        for (effect, prior) in &self.priors.pc {
            out.push_str(&format!("prior.{effect}.u = {}\n", prior.u));
            out.push_str(&format!("prior.{effect}.alpha = {}\n", prior.alpha));
        }
        for (hyper, value) in &self.priors.fixed {
            out.push_str(&format!("fix.{} = {value}\n", hyper.name()));
        }
        out
    }
}

/// `key = value` lines; `#` starts a comment. Returns values with their line
/// numbers. Duplicate keys are rejected.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, (usize, String)>> {
    let mut out = BTreeMap::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(k + 1, format!("expected key = value, got `{line}`")))?;
        let key = key.trim().to_string();
        if out
            .insert(key.clone(), (k + 1, value.trim().to_string()))
            .is_some()
        {
            return Err(Error::DuplicateKey(key));
        }
    }
    Ok(out)
}

/// A named range of the latent vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LatentBlock {
    pub kind: BlockKind,
    pub start: usize,
    pub len: usize,
}

impl LatentBlock {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum BlockKind {
    Beta0,
    Beta1,
    SpatialStructured,
    SpatialUnstructured,
    TemporalStructured,
    TemporalUnstructured,
    Interaction,
}

impl BlockKind {
    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Beta0 => "beta0",
            BlockKind::Beta1 => "beta1",
            BlockKind::SpatialStructured => "u",
            BlockKind::SpatialUnstructured => "v",
            BlockKind::TemporalStructured => "gamma",
            BlockKind::TemporalUnstructured => "phi",
            BlockKind::Interaction => "delta",
        }
    }
}

/// One modelled cell: counts `y` with offset `ln E`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Observation {
    pub area: usize,
    pub week: usize,
    pub y: f64,
    pub offset: f64,
}

/// Raw material for [`ModelAssembly::build`]: responses and expected
/// counts for every area-week cell (area-major).
#[derive(Debug, Clone)]
pub struct AssemblyInput {
    pub graph: Arc<ArealGraph>,
    pub weeks: Vec<u32>,
    pub covariate: Option<Vec<f64>>,
    pub response: Vec<f64>,
    pub expected: Vec<f64>,
}

/// Sum-to-zero constraint over a set of latent indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Constraint {
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone)]
struct PriorBlock {
    kind: BlockKind,
    structure: Option<SymMatrix>,
    // θ-free part of ½·log-normalizer: ln det(S + κCᵀC) + ln det(C(S + κCᵀC)⁻¹Cᵀ)
    log_norm_const: f64,
    rank: usize,
}

/// Fully indexed latent Gaussian model ready for inference.
#[derive(Debug, Clone)]
pub struct ModelAssembly {
    spec: ModelSpec,
    graph: Arc<ArealGraph>,
    weeks: Vec<u32>,
    covariate: Option<Vec<f64>>,
    blocks: Vec<LatentBlock>,
    dim: usize,
    observations: Vec<Observation>,
    design_ptr: Vec<usize>,
    design_idx: Vec<usize>,
    design_coef: Vec<f64>,
    excluded: Vec<(usize, usize)>,
    icar: Option<StructureMatrix>,
    constraints: Vec<Constraint>,
    hypers: Vec<HyperKind>,
    prior_blocks: Vec<PriorBlock>,
    pattern: Arc<SymPattern>,
    symbolic: Arc<LdlSymbolic>,
    // storage offsets (both triangles) touched by each observation's AᵀWA term
    curv_ptr: Vec<usize>,
    curv_pos: Vec<usize>,
    curv_coef: Vec<f64>,
    // storage offsets of the full square block of each constraint set
    constraint_pos: Vec<Vec<usize>>,
}

/// Natural-scale hyperparameters decoded from an internal vector.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct NaturalHypers {
    pub tau_bym: Option<f64>,
    pub phi_mix: Option<f64>,
    pub tau_rw1: Option<f64>,
    pub tau_iid_time: Option<f64>,
    pub tau_interaction: Option<f64>,
    pub zip_prob: Option<f64>,
}

/// Builds the assembly for `spec` from a panel and expected counts for the
/// spec's cause class.
pub fn assemble(spec: &ModelSpec, panel: &EpiPanel, expected: &ExpectedCounts) -> Result<ModelAssembly> {
    if expected.n_areas != panel.n_areas() || expected.n_weeks != panel.n_weeks() {
        return Err(Error::SpecMismatch(
            "expected counts do not match the panel dimensions".into(),
        ));
    }
    let response = panel
        .count_matrix(spec.cause)
        .into_iter()
        .map(|c| c as f64)
        .collect();
    ModelAssembly::build(
        spec,
        AssemblyInput {
            graph: panel.graph().clone(),
            weeks: panel.weeks().to_vec(),
            covariate: panel.covariate().map(<[f64]>::to_vec),
            response,
            expected: expected.values.clone(),
        },
    )
}

/// Convenience: standardize with the spec's cause and basis, then assemble.
pub fn assemble_panel(spec: &ModelSpec, panel: &EpiPanel) -> Result<ModelAssembly> {
    let expected = expected_counts(panel, spec.cause, spec.basis)?;
    assemble(spec, panel, &expected)
}

impl ModelAssembly {
    pub fn build(spec: &ModelSpec, input: AssemblyInput) -> Result<Self> {
        Self::build_with_ordering(spec, input, Ordering::MinimumDegree)
    }

    pub fn build_with_ordering(
        spec: &ModelSpec,
        input: AssemblyInput,
        ordering: Ordering,
    ) -> Result<Self> {
        let graph = input.graph;
        let n = graph.n_units();
        let t = input.weeks.len();
        if n == 0 || t == 0 {
            return Err(Error::invalid("model needs at least one area and one week"));
        }
        if input.response.len() != n * t || input.expected.len() != n * t {
            return Err(Error::invalid("response and expected counts must cover every area-week"));
        }
        if !spec.has(Effect::Intercept) {
            return Err(Error::SpecMismatch("the intercept is always required".into()));
        }
        let covariate = if spec.has(Effect::Covariate) {
            match input.covariate {
                Some(z) if z.len() == n => Some(z),
                Some(_) => return Err(Error::SpecMismatch("covariate length mismatch".into())),
                None => {
                    return Err(Error::SpecMismatch(
                        "covariate effect requested but the panel has no covariate".into(),
                    ))
                }
            }
        } else {
            None
        };
        if spec.has(Effect::Rw1Temporal) && t < 2 {
            return Err(Error::SpecMismatch("RW1 needs at least two weeks".into()));
        }
        if spec.has(Effect::Bym2Spatial) && n < 2 {
            return Err(Error::SpecMismatch("BYM2 needs at least two areas".into()));
        }
        let count_like = !matches!(spec.likelihood, LikelihoodKind::Gaussian { .. });
        for &y in &input.response {
            if !y.is_finite() || (count_like && (y < 0.0 || y.fract() != 0.0)) {
                return Err(Error::invalid(format!("invalid response value {y}")));
            }
        }
        if let LikelihoodKind::Gaussian { precision } = spec.likelihood {
            if !(precision > 0.0) || !precision.is_finite() {
                return Err(Error::invalid("Gaussian precision must be positive"));
            }
        }
        for (hyper, value) in &spec.priors.fixed {
            let ok = if hyper.is_precision() {
                *value > 0.0 && value.is_finite()
            } else {
                *value > 0.0 && *value < 1.0
            };
            if !ok {
                return Err(Error::invalid(format!(
                    "fixed value {value} out of range for {}",
                    hyper.name()
                )));
            }
        }
        for prior in spec.priors.pc.values() {
            pc_precision_rate(prior.u, prior.alpha)?;
        }

        // layout
        let mut blocks = Vec::new();
        let mut dim = 0;
        let mut push = |kind: BlockKind, len: usize| {
            blocks.push(LatentBlock { kind, start: dim, len });
            dim += len;
        };
        for effect in &spec.effects {
            match effect {
                Effect::Intercept => push(BlockKind::Beta0, 1),
                Effect::Covariate => push(BlockKind::Beta1, 1),
                Effect::Bym2Spatial => {
                    push(BlockKind::SpatialStructured, n);
                    push(BlockKind::SpatialUnstructured, n);
                }
                Effect::Rw1Temporal => push(BlockKind::TemporalStructured, t),
                Effect::IidTemporal => push(BlockKind::TemporalUnstructured, t),
                Effect::IidInteraction => push(BlockKind::Interaction, n * t),
            }
        }
        let find = |kind: BlockKind| blocks.iter().find(|b| b.kind == kind).copied();

        // observations and design
        let mut observations = Vec::new();
        let mut excluded = Vec::new();
        let mut design_ptr = vec![0];
        let mut design_idx = Vec::new();
        let mut design_coef = Vec::new();
        for i in 0..n {
            for w in 0..t {
                let e = input.expected[i * t + w];
                if !e.is_finite() || e < 0.0 {
                    return Err(Error::invalid(format!("invalid expected count {e}")));
                }
                if e == 0.0 {
                    excluded.push((i, w));
                    continue;
                }
                observations.push(Observation {
                    area: i,
                    week: w,
                    y: input.response[i * t + w],
                    offset: e.ln(),
                });
                for block in &blocks {
                    let (idx, coef) = match block.kind {
                        BlockKind::Beta0 => (block.start, 1.0),
                        BlockKind::Beta1 => (block.start, covariate.as_ref().unwrap()[i]),
                        BlockKind::SpatialStructured | BlockKind::SpatialUnstructured => {
                            (block.start + i, 1.0)
                        }
                        BlockKind::TemporalStructured | BlockKind::TemporalUnstructured => {
                            (block.start + w, 1.0)
                        }
                        BlockKind::Interaction => (block.start + i * t + w, 1.0),
                    };
                    design_idx.push(idx);
                    design_coef.push(coef);
                }
                design_ptr.push(design_idx.len());
            }
        }
        if observations.is_empty() {
            return Err(Error::invalid("no cell has a positive expected count"));
        }

        // structures and constraints
        let icar = if spec.has(Effect::Bym2Spatial) {
            Some(scale_gv(&icar_structure(&graph)?)?)
        } else {
            None
        };
        let mut constraints = Vec::new();
        let mut prior_blocks = Vec::new();
        for block in &blocks {
            let (structure, block_constraints): (Option<SymMatrix>, Vec<Vec<usize>>) = match block.kind {
                BlockKind::SpatialStructured => {
                    let q = icar.as_ref().unwrap();
                    let mut m = q.matrix().clone();
                    let mut sets = Vec::new();
                    for members in q.components() {
                        if members.len() == 1 {
                            m.add(members[0], members[0], 1.0);
                        } else {
                            sets.push(members.clone());
                        }
                    }
                    (Some(m), sets)
                }
                BlockKind::TemporalStructured => {
                    (Some(rw1_structure(t)?.matrix().clone()), vec![(0..t).collect()])
                }
                _ => (None, Vec::new()),
            };
            let log_norm_const = match &structure {
                Some(s) => structure_log_norm(s, &block_constraints)?,
                None => 0.0,
            };
            let rank = block.len - block_constraints.len();
            for set in block_constraints {
                constraints.push(Constraint {
                    indices: set.into_iter().map(|k| block.start + k).collect(),
                });
            }
            prior_blocks.push(PriorBlock {
                kind: block.kind,
                structure,
                log_norm_const,
                rank,
            });
        }

        let mut hypers = Vec::new();
        if spec.has(Effect::Bym2Spatial) {
            hypers.push(HyperKind::LogPrecisionBym);
            hypers.push(HyperKind::LogitMixing);
        }
        if spec.has(Effect::Rw1Temporal) {
            hypers.push(HyperKind::LogPrecisionRw1);
        }
        if spec.has(Effect::IidTemporal) {
            hypers.push(HyperKind::LogPrecisionIidTime);
        }
        if spec.has(Effect::IidInteraction) {
            hypers.push(HyperKind::LogPrecisionInteraction);
        }
        if spec.likelihood == LikelihoodKind::ZeroInflatedPoisson {
            hypers.push(HyperKind::LogitZeroProb);
        }
        for hyper in spec.priors.fixed.keys() {
            if !hypers.contains(hyper) {
                return Err(Error::SpecMismatch(format!(
                    "fixed hyperparameter `{}` is not part of the model",
                    hyper.name()
                )));
            }
        }

        // sparsity pattern of Q + AᵀWA + CᵀKC
        let mut entries = Vec::new();
        for pb in &prior_blocks {
            if let Some(s) = &pb.structure {
                let start = find(pb.kind).unwrap().start;
                for j in 0..s.dim() {
                    for &i in s.pattern().column(j) {
                        if i < j {
                            entries.push((start + i, start + j));
                        }
                    }
                }
            }
        }
        for k in 0..observations.len() {
            let idx = &design_idx[design_ptr[k]..design_ptr[k + 1]];
            for (a, &i) in idx.iter().enumerate() {
                for &j in &idx[a + 1..] {
                    entries.push((i, j));
                }
            }
        }
        for c in &constraints {
            for (a, &i) in c.indices.iter().enumerate() {
                for &j in &c.indices[a + 1..] {
                    entries.push((i, j));
                }
            }
        }
        let pattern = Arc::new(SymPattern::from_entries(dim, entries));
        let symbolic = Arc::new(LdlSymbolic::new(pattern.clone(), ordering));

        let mut curv_ptr = vec![0];
        let mut curv_pos = Vec::new();
        let mut curv_coef = Vec::new();
        for k in 0..observations.len() {
            let r = design_ptr[k]..design_ptr[k + 1];
            let idx = &design_idx[r.clone()];
            let coef = &design_coef[r];
            for (a, &i) in idx.iter().enumerate() {
                for (b, &j) in idx.iter().enumerate() {
                    curv_pos.push(pattern.position(i, j).unwrap());
                    curv_coef.push(coef[a] * coef[b]);
                }
            }
            curv_ptr.push(curv_pos.len());
        }
        let constraint_pos = constraints
            .iter()
            .map(|c| {
                let mut out = Vec::with_capacity(c.indices.len() * c.indices.len());
                for &j in &c.indices {
                    for &i in &c.indices {
                        out.push(pattern.position(i, j).unwrap());
                    }
                }
                out
            })
            .collect();

        Ok(Self {
            spec: spec.clone(),
            graph,
            weeks: input.weeks,
            covariate,
            blocks,
            dim,
            observations,
            design_ptr,
            design_idx,
            design_coef,
            excluded,
            icar,
            constraints,
            hypers,
            prior_blocks,
            pattern,
            symbolic,
            curv_ptr,
            curv_pos,
            curv_coef,
            constraint_pos,
        })
    }

    /// Adds `Aᵀ diag(w) A` to values stored on the assembly pattern.
    pub(crate) fn add_curvature(&self, w: &[f64], values: &mut [f64]) {
        for (k, &wk) in w.iter().enumerate() {
            if wk == 0.0 {
                continue;
            }
            let r = self.curv_ptr[k]..self.curv_ptr[k + 1];
            for (&p, &c) in self.curv_pos[r.clone()].iter().zip(&self.curv_coef[r]) {
                values[p] += wk * c;
            }
        }
    }

    /// Adds `Σ_r κ_r 1_r 1_rᵀ` over the constraint sets.
    pub(crate) fn add_constraint_penalty(&self, kappa: &[f64], values: &mut [f64]) {
        for (positions, &k) in self.constraint_pos.iter().zip(kappa) {
            for &p in positions {
                values[p] += k;
            }
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn likelihood(&self) -> LikelihoodKind {
        self.spec.likelihood
    }

    pub fn graph(&self) -> &Arc<ArealGraph> {
        &self.graph
    }

    pub fn n_areas(&self) -> usize {
        self.graph.n_units()
    }

    pub fn n_weeks(&self) -> usize {
        self.weeks.len()
    }

    pub fn weeks(&self) -> &[u32] {
        &self.weeks
    }

    pub fn covariate(&self) -> Option<&[f64]> {
        self.covariate.as_deref()
    }

    /// Latent dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[LatentBlock] {
        &self.blocks
    }

    pub fn block(&self, kind: BlockKind) -> Option<LatentBlock> {
        self.blocks.iter().find(|b| b.kind == kind).copied()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    /// Area-week cells left out because their expected count is zero.
    pub fn excluded(&self) -> &[(usize, usize)] {
        &self.excluded
    }

    /// Latent indices and coefficients of observation `k`'s predictor.
    pub fn design_row(&self, k: usize) -> (&[usize], &[f64]) {
        let r = self.design_ptr[k]..self.design_ptr[k + 1];
        (&self.design_idx[r.clone()], &self.design_coef[r])
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    /// Hyperparameter layout, internal scale.
    pub fn hypers(&self) -> &[HyperKind] {
        &self.hypers
    }

    pub fn hyper_index(&self, kind: HyperKind) -> Option<usize> {
        self.hypers.iter().position(|&h| h == kind)
    }

    /// Indices of hyperparameters that are not held fixed.
    pub fn free_hypers(&self) -> Vec<usize> {
        (0..self.hypers.len())
            .filter(|&k| !self.spec.priors.fixed.contains_key(&self.hypers[k]))
            .collect()
    }

    /// Default starting point, with fixed hyperparameters at their values.
    pub fn default_theta(&self) -> Vec<f64> {
        self.hypers
            .iter()
            .map(|h| match self.spec.priors.fixed.get(h) {
                Some(v) => h.to_internal(*v),
                None => h.default_start(),
            })
            .collect()
    }

    pub fn scaled_icar(&self) -> Option<&StructureMatrix> {
        self.icar.as_ref()
    }

    pub fn pattern(&self) -> &Arc<SymPattern> {
        &self.pattern
    }

    pub fn symbolic(&self) -> &Arc<LdlSymbolic> {
        &self.symbolic
    }

    /// Linear predictor without offset, `A x`.
    pub fn linear_predictor(&self, x: &[f64]) -> Vec<f64> {
        (0..self.observations.len())
            .map(|k| {
                let (idx, coef) = self.design_row(k);
                idx.iter().zip(coef).map(|(&i, &c)| c * x[i]).sum()
            })
            .collect()
    }

    /// `Aᵀ g`
    pub fn design_transpose_mul(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (k, &gk) in g.iter().enumerate() {
            let (idx, coef) = self.design_row(k);
            for (&i, &c) in idx.iter().zip(coef) {
                out[i] += c * gk;
            }
        }
        out
    }

    pub fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.hypers.len() {
            return Err(Error::invalid(format!(
                "hyper vector has length {}, expected {}",
                theta.len(),
                self.hypers.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite hyperparameter"));
        }
        Ok(())
    }

    pub fn natural_hypers(&self, theta: &[f64]) -> NaturalHypers {
        let mut out = NaturalHypers::default();
        for (&kind, &v) in self.hypers.iter().zip(theta) {
            let nat = Some(kind.to_natural(v));
            match kind {
                HyperKind::LogPrecisionBym => out.tau_bym = nat,
                HyperKind::LogitMixing => out.phi_mix = nat,
                HyperKind::LogPrecisionRw1 => out.tau_rw1 = nat,
                HyperKind::LogPrecisionIidTime => out.tau_iid_time = nat,
                HyperKind::LogPrecisionInteraction => out.tau_interaction = nat,
                HyperKind::LogitZeroProb => out.zip_prob = nat,
            }
        }
        out
    }

    /// Zero-inflation probability at `theta` (0 for other likelihoods).
    pub fn zero_prob(&self, theta: &[f64]) -> f64 {
        self.hyper_index(HyperKind::LogitZeroProb)
            .map(|k| logistic(theta[k]))
            .unwrap_or(0.0)
    }

    fn get_hyper(&self, theta: &[f64], kind: HyperKind) -> f64 {
        theta[self.hyper_index(kind).expect("hyper in layout")]
    }

    /// Precision multiplier of each prior block at `theta`, on the log scale.
    pub(crate) fn block_log_scales(&self, theta: &[f64]) -> Vec<f64> {
        self.prior_blocks
            .iter()
            .map(|pb| match pb.kind {
                BlockKind::Beta0 | BlockKind::Beta1 => FIXED_EFFECT_PRECISION.ln(),
                BlockKind::SpatialStructured => {
                    let lt = self.get_hyper(theta, HyperKind::LogPrecisionBym);
                    let m = self.get_hyper(theta, HyperKind::LogitMixing);
                    // τ/φ with φ = logistic(m): ln τ + ln(1 + e^{-m})
                    lt + softplus(-m)
                }
                BlockKind::SpatialUnstructured => {
                    let lt = self.get_hyper(theta, HyperKind::LogPrecisionBym);
                    let m = self.get_hyper(theta, HyperKind::LogitMixing);
                    lt + softplus(m)
                }
                BlockKind::TemporalStructured => self.get_hyper(theta, HyperKind::LogPrecisionRw1),
                BlockKind::TemporalUnstructured => {
                    self.get_hyper(theta, HyperKind::LogPrecisionIidTime)
                }
                BlockKind::Interaction => self.get_hyper(theta, HyperKind::LogPrecisionInteraction),
            })
            .collect()
    }

    /// Joint prior precision `Q(θ)` of the latent field, laid out on the
    /// assembly's factorization pattern.
    pub fn joint_latent_precision(&self, theta: &[f64]) -> Result<SymMatrix> {
        self.check_theta(theta)?;
        let mut q = SymMatrix::zeros(self.pattern.clone());
        let scales = self.block_log_scales(theta);
        for ((pb, block), log_scale) in self.prior_blocks.iter().zip(&self.blocks).zip(scales) {
            let s = match pb.kind {
                BlockKind::Beta0 | BlockKind::Beta1 => FIXED_EFFECT_PRECISION,
                _ => log_scale.exp(),
            };
            match &pb.structure {
                Some(m) => {
                    for j in 0..m.dim() {
                        for &i in m.pattern().column(j) {
                            if i <= j {
                                let v = m.get(i, j);
                                if v != 0.0 {
                                    q.add(block.start + i, block.start + j, s * v);
                                }
                            }
                        }
                    }
                }
                None => {
                    for k in block.range() {
                        q.add(k, k, s);
                    }
                }
            }
        }
        Ok(q)
    }

    /// `ln det Q + ln det(C Q⁻¹ Cᵀ)` for the constrained prior (the
    /// generalized determinant for intrinsic blocks).
    pub fn prior_log_det(&self, theta: &[f64]) -> f64 {
        self.block_log_scales(theta)
            .iter()
            .zip(&self.prior_blocks)
            .map(|(ls, pb)| pb.rank as f64 * ls + pb.log_norm_const)
            .sum()
    }

    /// Diagonal multipliers `κ` for the constraint rows, one per constraint,
    /// comparable to the prior precision of the constrained block.
    pub(crate) fn constraint_penalties(&self, theta: &[f64]) -> Vec<f64> {
        let scales = self.block_log_scales(theta);
        self.constraints
            .iter()
            .map(|c| {
                let first = c.indices[0];
                let b = self
                    .blocks
                    .iter()
                    .position(|b| b.range().contains(&first))
                    .unwrap();
                let s = scales[b].exp();
                let structure = self.prior_blocks[b].structure.as_ref().unwrap();
                let start = self.blocks[b].start;
                let mean_diag = c
                    .indices
                    .iter()
                    .map(|&k| structure.get(k - start, k - start))
                    .sum::<f64>()
                    / c.indices.len() as f64;
                s * mean_diag / c.indices.len() as f64
            })
            .collect()
    }

    /// Log density of the hyperparameter prior on the internal scale.
    pub fn log_hyper_prior(&self, theta: &[f64]) -> f64 {
        let mut total = 0.0;
        for (&kind, &v) in self.hypers.iter().zip(theta) {
            if self.spec.priors.fixed.contains_key(&kind) {
                continue;
            }
            total += match kind {
                HyperKind::LogitMixing | HyperKind::LogitZeroProb => -softplus(-v) - softplus(v),
                _ => {
                    let effect = kind.effect().unwrap();
                    pc_log_density(self.spec.priors.pc_for(effect).rate(), v)
                }
            };
        }
        total
    }
}

/// PC prior log density of `log τ` for rate `lambda` on σ = exp(−½ log τ).
pub fn pc_log_density(lambda: f64, log_tau: f64) -> f64 {
    let sigma = (-0.5 * log_tau).exp();
    lambda.ln() - lambda * sigma + (sigma / 2.0).ln()
}

fn structure_log_norm(s: &SymMatrix, constraints: &[Vec<usize>]) -> Result<f64> {
    let d = s.to_dense();
    let n = d.nrows();
    let mut penalized = d.clone();
    for set in constraints {
        for &i in set {
            for &j in set {
                penalized[(i, j)] += 1.0;
            }
        }
    }
    let chol = penalized
        .cholesky()
        .ok_or_else(|| Error::invalid("structure matrix has an unconstrained null space"))?;
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    if constraints.is_empty() {
        return Ok(log_det);
    }
    let k = constraints.len();
    let mut c = DMatrix::zeros(n, k);
    for (r, set) in constraints.iter().enumerate() {
        for &i in set {
            c[(i, r)] = 1.0;
        }
    }
    let solved = chol.solve(&c);
    let m = c.transpose() * solved;
    let mc = m
        .cholesky()
        .ok_or_else(|| Error::invalid("constraint matrix is rank deficient"))?;
    Ok(log_det + 2.0 * mc.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}
