//! Relative-risk tables built from fitted models.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::epi::{expected_counts, Basis, EpiPanel};
use crate::error::{Error, Result};
use crate::inference::explore::{fit, FitOptions, FitResult};
use crate::inference::posterior::{latent_mixture, PosteriorSummary, Quantity};
use crate::model::{assemble, BlockKind, Effect, ModelAssembly, ModelSpec};

/// One row of a relative-risk table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RrRow {
    pub area: Option<String>,
    pub week: Option<u32>,
    pub rr: PosteriorSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RrTable {
    pub rows: Vec<RrRow>,
    pub baseline_note: String,
}

pub fn baseline_note(basis: Basis) -> String {
    match basis {
        Basis::WholePeriod => "relative to city-wide stratum rates over the whole period".into(),
        Basis::PerWeek => "relative to each week's city-wide stratum rates".into(),
    }
}

fn fmt_num(v: f64) -> String {
    format!("{v:.6}")
}

impl RrTable {
    /// CSV with `area_id` and `week` columns when they apply.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let has_area = self.rows.iter().any(|r| r.area.is_some());
        let has_week = self.rows.iter().any(|r| r.week.is_some());
        let mut w = csv::Writer::from_writer(out);
        let mut header = Vec::new();
        if has_area {
            header.push("area_id");
        }
        if has_week {
            header.push("week");
        }
        header.extend(["rr_mean", "rr_sd", "rr_q025", "rr_q975"]);
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = Vec::new();
            if has_area {
                rec.push(row.area.clone().unwrap_or_default());
            }
            if has_week {
                rec.push(row.week.map(|v| v.to_string()).unwrap_or_default());
            }
            rec.extend([
                fmt_num(row.rr.mean),
                fmt_num(row.rr.sd),
                fmt_num(row.rr.lower),
                fmt_num(row.rr.upper),
            ]);
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

fn rr_of(fit: &FitResult, idx: &[usize], coef: &[f64]) -> PosteriorSummary {
    latent_mixture(fit, idx, coef).exp_summary()
}

/// Weekly RR `exp(γ_t + φ_t)`, or `exp(γ_t)` alone when `structured_only`.
pub fn temporal_rr(assembly: &ModelAssembly, fit: &FitResult, structured_only: bool) -> Result<RrTable> {
    let gamma = assembly.block(BlockKind::TemporalStructured);
    let phi = assembly.block(BlockKind::TemporalUnstructured);
    if gamma.is_none() && (structured_only || phi.is_none()) {
        return Err(Error::EffectAbsent(Effect::Rw1Temporal.name().into()));
    }
    let rows = (0..assembly.n_weeks())
        .map(|w| {
            let idx: Vec<usize> = if structured_only {
                vec![gamma.unwrap().start + w]
            } else {
                [gamma, phi].iter().flatten().map(|b| b.start + w).collect()
            };
            let coef = vec![1.0; idx.len()];
            RrRow {
                area: None,
                week: Some(assembly.weeks()[w]),
                rr: rr_of(fit, &idx, &coef),
            }
        })
        .collect();
    Ok(RrTable {
        rows,
        baseline_note: baseline_note(assembly.spec().basis),
    })
}

/// Area-week RR `exp(η_it − offset_it)` of the full predictor.
pub fn spatiotemporal_rr(assembly: &ModelAssembly, fit: &FitResult) -> Result<RrTable> {
    if assembly.block(BlockKind::SpatialStructured).is_none() || assembly.n_weeks() < 2 {
        return Err(Error::EffectAbsent("spatiotemporal effects".into()));
    }
    let (n, t) = (assembly.n_areas(), assembly.n_weeks());
    let rows: Vec<Result<RrRow>> = (0..n * t)
        .into_par_iter()
        .map(|k| {
            let (i, w) = (k / t, k % t);
            let (idx, coef) = Quantity::Eta(i, w).functional(assembly)?;
            Ok(RrRow {
                area: Some(assembly.graph().unit_ids()[i].clone()),
                week: Some(assembly.weeks()[w]),
                rr: rr_of(fit, &idx, &coef),
            })
        })
        .collect();
    Ok(RrTable {
        rows: rows.into_iter().collect::<Result<_>>()?,
        baseline_note: baseline_note(assembly.spec().basis),
    })
}

/// Area RR `exp(u_i + v_i)` of the spatial effect.
pub fn spatial_rr(assembly: &ModelAssembly, fit: &FitResult) -> Result<RrTable> {
    let rows = (0..assembly.n_areas())
        .map(|i| {
            let (idx, coef) = Quantity::Bym(i).functional(assembly)?;
            Ok(RrRow {
                area: Some(assembly.graph().unit_ids()[i].clone()),
                week: None,
                rr: rr_of(fit, &idx, &coef),
            })
        })
        .collect::<Result<_>>()?;
    Ok(RrTable {
        rows,
        baseline_note: baseline_note(assembly.spec().basis),
    })
}

/// RR of a one-unit covariate increase, and of a two-unit increase
/// (`exp(2β1)`, e.g. the full range of an index on [−1, 1]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CovariateRr {
    pub rr: PosteriorSummary,
    pub rr_two_units: PosteriorSummary,
    /// Latent-scale summary of β1.
    pub beta1: PosteriorSummary,
}

pub fn covariate_rr(assembly: &ModelAssembly, fit: &FitResult) -> Result<CovariateRr> {
    let b = assembly
        .block(BlockKind::Beta1)
        .ok_or_else(|| Error::EffectAbsent(Effect::Covariate.name().into()))?;
    let mix = latent_mixture(fit, &[b.start], &[1.0]);
    let double = latent_mixture(fit, &[b.start], &[2.0]);
    Ok(CovariateRr {
        rr: mix.exp_summary(),
        rr_two_units: double.exp_summary(),
        beta1: mix.summary(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum WeekOutcome {
    Fitted(CovariateRr),
    /// No deaths city-wide, so no per-week expected counts.
    Skipped(String),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeeklyCovariate {
    pub week: u32,
    pub outcome: WeekOutcome,
}

/// Covariate RR per week from independent spatial fits, each offset by
/// that week's city-wide rates. Weeks are fitted concurrently; the output
/// is in week order.
pub fn weekly_covariate_series(
    panel: &EpiPanel,
    spec: &ModelSpec,
    options: &FitOptions,
) -> Result<Vec<WeeklyCovariate>> {
    if !spec.has(Effect::Covariate) {
        return Err(Error::EffectAbsent(Effect::Covariate.name().into()));
    }
    if spec.effects.iter().any(|e| matches!(e, Effect::Rw1Temporal | Effect::IidTemporal | Effect::IidInteraction)) {
        return Err(Error::SpecMismatch(
            "per-week fits take only intercept, covariate and spatial effects".into(),
        ));
    }
    if panel.covariate().is_none() {
        return Err(Error::SpecMismatch("panel has no covariate".into()));
    }
    let out = (0..panel.n_weeks())
        .into_par_iter()
        .map(|w| {
            let week = panel.weeks()[w];
            let slice = panel.week_slice(w);
            if slice.total_deaths(spec.cause) == 0 {
                return WeeklyCovariate {
                    week,
                    outcome: WeekOutcome::Skipped("no deaths city-wide".into()),
                };
            }
            let run = || -> Result<CovariateRr> {
                let expected = expected_counts(&slice, spec.cause, Basis::PerWeek)?;
                let mut week_spec = spec.clone();
                week_spec.basis = Basis::PerWeek;
                let assembly = assemble(&week_spec, &slice, &expected)?;
                let fitted = fit(&assembly, options)?;
                covariate_rr(&assembly, &fitted)
            };
            WeeklyCovariate {
                week,
                outcome: match run() {
                    Ok(rr) => WeekOutcome::Fitted(rr),
                    Err(e) => WeekOutcome::Failed(e.to_string()),
                },
            }
        })
        .collect();
    Ok(out)
}

/// CSV of a weekly series: `week,status,rr_mean,rr_sd,rr_q025,rr_q975`.
pub fn write_weekly_csv<W: Write>(series: &[WeeklyCovariate], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["week", "status", "rr_mean", "rr_sd", "rr_q025", "rr_q975"])?;
    for item in series {
        let week = item.week.to_string();
        match &item.outcome {
            WeekOutcome::Fitted(c) => w.write_record([
                week,
                "fitted".into(),
                fmt_num(c.rr.mean),
                fmt_num(c.rr.sd),
                fmt_num(c.rr.lower),
                fmt_num(c.rr.upper),
            ])?,
            WeekOutcome::Skipped(_) => w.write_record([week.as_str(), "skipped", "", "", "", ""])?,
            WeekOutcome::Failed(_) => w.write_record([week.as_str(), "failed", "", "", "", ""])?,
        }
    }
    w.flush()?;
    Ok(())
}

/// Week index where a series crosses 1: the `k` maximizing the number of
/// weeks on the expected side (before `k` on one side, from `k` on the
/// other). The direction is read from the series: downward when the first
/// half averages above the second. Returns `None` for fewer than 2 points.
pub fn crossing_index(rr: &[f64]) -> Option<usize> {
    let t = rr.len();
    if t < 2 {
        return None;
    }
    let half = t / 2;
    let mean = |s: &[f64]| s.iter().map(|v| v.ln()).sum::<f64>() / s.len() as f64;
    let downward = mean(&rr[..half]) >= mean(&rr[half..]);
    let (before, after): (fn(f64) -> bool, fn(f64) -> bool) = if downward {
        (|v| v > 1.0, |v| v < 1.0)
    } else {
        (|v| v < 1.0, |v| v > 1.0)
    };
    let mut best = (0usize, 1usize);
    for k in 1..t {
        let score = rr[..k].iter().filter(|&&v| before(v)).count()
            + rr[k..].iter().filter(|&&v| after(v)).count();
        if score > best.0 {
            best = (score, k);
        }
    }
    Some(best.1)
}
