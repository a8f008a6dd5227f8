use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use dmap_core::epi::{
    expected_counts, group_rates, ingest_panel, panel_csv, population_units, weekly_rates, CauseClass, EpiPanel,
    IngestReport,
};
use dmap_core::graph::load_edge_list;
use dmap_core::inference::posterior::{hyper_summary, summarize_quantity};
use dmap_core::inference::{fit, FitOptions, FitResult, PosteriorSummary, Quantity};
use dmap_core::model::{assemble_panel, Effect, LikelihoodKind, ModelAssembly, ModelSpec};
use dmap_core::simulate::{matching_spec, recovery_experiment, simulate_panel, SimScenario};
use dmap_core::summaries::{
    covariate_rr, crossing_index, spatial_rr, spatiotemporal_rr, temporal_rr, weekly_covariate_series,
    write_weekly_csv, RrTable, WeekOutcome,
};

use crate::manifest::RunManifest;
use crate::output::OutDir;
use crate::{Cli, CliError, Command, ModelArgs, PanelArgs};

fn read_text(path: &Path, manifest: &mut RunManifest) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    manifest.record_input(path, &bytes);
    String::from_utf8(bytes).map_err(|_| CliError::Input(format!("{} is not UTF-8", path.display())))
}

fn parse_weeks(text: &str) -> Result<(u32, u32), CliError> {
    let bad = || CliError::Input(format!("bad week range `{text}`, expected LO-HI"));
    let (lo, hi) = match text.split_once('-') {
        Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
        None => {
            let w = text.trim().parse().map_err(|_| bad())?;
            (w, w)
        }
    };
    if lo > hi {
        return Err(bad());
    }
    Ok((lo, hi))
}

fn load_panel(args: &PanelArgs, manifest: &mut RunManifest) -> Result<(EpiPanel, IngestReport), CliError> {
    let deaths = read_text(&args.deaths, manifest)?;
    let population = read_text(&args.population, manifest)?;
    let covariate = match &args.covariate {
        Some(p) => Some(read_text(p, manifest)?),
        None => None,
    };
    let edges = read_text(&args.edges, manifest)?;
    let universe = population_units(&population)?;
    let graph = load_edge_list(&edges, Some(&universe))?;
    let weeks = args.weeks.as_deref().map(parse_weeks).transpose()?;
    Ok(ingest_panel(&deaths, &population, covariate.as_deref(), Arc::new(graph), weeks)?)
}

fn load_spec(args: &ModelArgs, panel: &EpiPanel, manifest: &mut RunManifest) -> Result<ModelSpec, CliError> {
    let mut spec = match &args.model {
        Some(p) => ModelSpec::parse_config(&read_text(p, manifest)?)?,
        None => ModelSpec::spatiotemporal(LikelihoodKind::Poisson, panel.covariate().is_some()),
    };
    if let Some(c) = args.cause {
        spec.cause = c;
    }
    if let Some(b) = args.basis {
        spec.basis = b;
    }
    manifest.set_config(&spec.to_config());
    Ok(spec)
}

fn fit_options(args: &ModelArgs, seed: u64) -> FitOptions {
    FitOptions {
        dic_samples: args.dic_samples,
        seed,
        ..FitOptions::default()
    }
}

fn load_scenario(path: Option<&Path>, seed: Option<u64>, manifest: &mut RunManifest) -> Result<SimScenario, CliError> {
    let mut s = match path {
        Some(p) => SimScenario::parse(&read_text(p, manifest)?)?,
        None => SimScenario::default(),
    };
    if let Some(seed) = seed {
        s.seed = seed;
    }
    s.validate()?;
    manifest.seed = s.seed;
    manifest.set_config(&s.to_config());
    Ok(s)
}

fn excluded_cells(a: &ModelAssembly) -> Vec<String> {
    a.excluded()
        .iter()
        .map(|&(i, w)| format!("{}@{}", a.graph().unit_ids()[i], a.weeks()[w]))
        .collect()
}

fn fit_panel(
    panel: &EpiPanel,
    spec: &ModelSpec,
    options: &FitOptions,
) -> Result<(ModelAssembly, FitResult), CliError> {
    let assembly = assemble_panel(spec, panel)?;
    let excluded = excluded_cells(&assembly);
    if !excluded.is_empty() {
        log::warn!(
            "excluded {} cell(s) with zero expected count: {}",
            excluded.len(),
            excluded.join(", ")
        );
    }
    let fitted = fit(&assembly, options)?;
    Ok((assembly, fitted))
}

fn summary_line(out: &mut String, name: &str, s: &PosteriorSummary) {
    let _ = writeln!(
        out,
        "  {name:<18}{:>14.6}{:>14.6}{:>14.6}{:>14.6}",
        s.mean, s.sd, s.lower, s.upper
    );
}

fn columns() -> String {
    format!("  {:<18}{:>14}{:>14}{:>14}{:>14}", "", "mean", "sd", "q025", "q975")
}

fn fit_report(spec: &ModelSpec, a: &ModelAssembly, f: &FitResult) -> Result<String, CliError> {
    let mut r = String::new();
    let effects: Vec<&str> = spec.effects.iter().map(|e| e.name()).collect();
    let weeks = a.weeks();
    let _ = writeln!(r, "model");
    let _ = writeln!(r, "  likelihood: {}", spec.likelihood);
    let _ = writeln!(r, "  effects: {}", effects.join(", "));
    let _ = writeln!(r, "  cause: {}", spec.cause);
    let _ = writeln!(r, "  basis: {}", spec.basis);
    let _ = writeln!(r, "data");
    let _ = writeln!(r, "  areas: {}", a.n_areas());
    let _ = writeln!(r, "  weeks: {}-{}", weeks[0], weeks[weeks.len() - 1]);
    let _ = writeln!(r, "  observations: {}", a.observations().len());
    let excluded = excluded_cells(a);
    let _ = writeln!(r, "  excluded cells: {}", excluded.len());
    for cell in &excluded {
        let _ = writeln!(r, "    {cell}");
    }
    let _ = writeln!(r, "hyperparameter search");
    let _ = writeln!(r, "  evaluations: {}", f.evaluations);
    let _ = writeln!(r, "  integration points: {}", f.points.len());
    let _ = writeln!(r, "  dropped points: {}", f.dropped_points);
    let _ = writeln!(r, "fixed effects\n{}", columns());
    summary_line(&mut r, "beta0", &summarize_quantity(a, f, Quantity::Beta0)?);
    if spec.has(Effect::Covariate) {
        summary_line(&mut r, "beta1", &summarize_quantity(a, f, Quantity::Beta1)?);
    }
    if !a.hypers().is_empty() {
        let _ = writeln!(r, "hyperparameters (natural scale)\n{}", columns());
        for &h in a.hypers() {
            summary_line(&mut r, h.name(), &hyper_summary(a, f, h)?);
        }
    }
    if let Some(d) = &f.dic {
        let _ = writeln!(r, "DIC");
        let _ = writeln!(r, "  mean deviance: {:.4}", d.mean_deviance);
        let _ = writeln!(r, "  deviance at mean: {:.4}", d.deviance_at_mean);
        let _ = writeln!(r, "  p_D: {:.4}", d.p_d);
        let _ = writeln!(r, "  DIC: {:.4}", d.dic);
    }
    Ok(r)
}

fn posterior_csv(spec: &ModelSpec, a: &ModelAssembly, f: &FitResult) -> Result<String, CliError> {
    let mut names = vec!["beta0".to_string()];
    if spec.has(Effect::Covariate) {
        names.push("beta1".into());
    }
    names.extend(a.hypers().iter().map(|h| h.name().to_string()));
    if spec.has(Effect::Bym2Spatial) {
        names.extend(a.graph().unit_ids().iter().map(|id| format!("bym[{id}]")));
    }
    if spec.has(Effect::Rw1Temporal) || spec.has(Effect::IidTemporal) {
        names.extend(a.weeks().iter().map(|w| format!("temporal[{w}]")));
    }
    let mut out = String::from("quantity,mean,sd,q025,q975\n");
    for name in names {
        let q = Quantity::parse(&name, a)?;
        let s = summarize_quantity(a, f, q)?;
        let _ = writeln!(out, "{name},{:.6},{:.6},{:.6},{:.6}", s.mean, s.sd, s.lower, s.upper);
    }
    Ok(out)
}

fn table_bytes(t: &RrTable) -> Result<Vec<u8>, CliError> {
    Ok(t.to_csv_string()?.into_bytes())
}

fn ingest_text(panel: &EpiPanel, report: &IngestReport) -> String {
    let mut r = format!("{report}\n");
    let weeks = panel.weeks();
    let _ = writeln!(r, "areas: {}", panel.n_areas());
    let _ = writeln!(r, "weeks: {}-{}", weeks[0], weeks[weeks.len() - 1]);
    let _ = writeln!(r, "strata: {}", panel.strata().len());
    let _ = writeln!(r, "covariate: {}", if panel.covariate().is_some() { "yes" } else { "no" });
    for cause in CauseClass::ALL {
        let zeros = dmap_core::epi::zero_fraction(panel, cause, false)[0];
        let _ = writeln!(
            r,
            "{cause} deaths: {} ({zeros:.1}% of area-weeks without deaths)",
            panel.total_deaths(cause)
        );
    }
    r
}

fn rates_csv(panel: &EpiPanel, cause: CauseClass) -> Result<(String, String), CliError> {
    let mut groups = String::from("group,cause,deaths,population,rate_per_100k\n");
    for g in group_rates(panel)? {
        let _ = writeln!(
            groups,
            "{},{},{},{},{:.4}",
            g.group, g.cause, g.deaths, g.population, g.rate_per_100k
        );
    }
    let mut weekly = String::from("week,deaths,rate_per_100k\n");
    let rates = weekly_rates(panel, cause);
    for (t, (week, rate)) in panel.weeks().iter().zip(rates).enumerate() {
        let deaths: u64 = (0..panel.n_areas()).map(|i| panel.area_week_deaths(i, t, cause)).sum();
        let _ = writeln!(weekly, "{week},{deaths},{rate:.4}");
    }
    Ok((groups, weekly))
}

fn expected_csv(panel: &EpiPanel, cause: CauseClass, basis: dmap_core::epi::Basis) -> Result<String, CliError> {
    let e = expected_counts(panel, cause, basis)?;
    let mut out = String::from("area_id,week,observed,expected,smr\n");
    for (i, id) in panel.graph().unit_ids().iter().enumerate() {
        for (t, week) in panel.weeks().iter().enumerate() {
            let y = panel.area_week_deaths(i, t, cause);
            let ex = e.get(i, t);
            let smr = if ex > 0.0 { format!("{:.6}", y as f64 / ex) } else { String::new() };
            let _ = writeln!(out, "{id},{week},{y},{ex:.6},{smr}");
        }
    }
    Ok(out)
}

fn require_out(out: &mut Option<OutDir>) -> Result<&mut OutDir, CliError> {
    out.as_mut().ok_or_else(|| CliError::Input("this command needs --out DIR".into()))
}

pub fn run(cli: Cli, argv: Vec<String>) -> Result<(), CliError> {
    let started = Instant::now();
    let threads = match cli.threads {
        Some(0) => return Err(CliError::Input("--threads must be at least 1".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Input(e.to_string()))?;
    let seed = cli.seed.unwrap_or(0);
    let mut manifest = RunManifest::new(argv, seed, threads);
    let mut out = match &cli.out {
        Some(p) => Some(OutDir::open(p, cli.force)?),
        None => None,
    };

    match &cli.command {
        Command::Ingest { panel } => {
            let (p, report) = load_panel(panel, &mut manifest)?;
            let text = ingest_text(&p, &report);
            print!("{text}");
            if let Some(o) = out.as_mut() {
                o.write("ingest_report.txt", text.as_bytes())?;
            }
        }
        Command::Rates { panel, cause } => {
            let o = require_out(&mut out)?;
            let (p, _) = load_panel(panel, &mut manifest)?;
            let (groups, weekly) = rates_csv(&p, *cause)?;
            o.write("rates.csv", groups.as_bytes())?;
            o.write("weekly_rates.csv", weekly.as_bytes())?;
        }
        Command::Expected { panel, cause, basis } => {
            let o = require_out(&mut out)?;
            let (p, _) = load_panel(panel, &mut manifest)?;
            o.write("expected.csv", expected_csv(&p, *cause, *basis)?.as_bytes())?;
        }
        Command::Fit { panel, model } => {
            let o = require_out(&mut out)?;
            let (p, _) = load_panel(panel, &mut manifest)?;
            let spec = load_spec(model, &p, &mut manifest)?;
            let (a, f) = fit_panel(&p, &spec, &fit_options(model, seed))?;
            o.write("fit_report.txt", fit_report(&spec, &a, &f)?.as_bytes())?;
            o.write("posterior.csv", posterior_csv(&spec, &a, &f)?.as_bytes())?;
        }
        Command::Summarize { panel, model, weekly } => {
            let o = require_out(&mut out)?;
            let (p, _) = load_panel(panel, &mut manifest)?;
            let spec = load_spec(model, &p, &mut manifest)?;
            let options = fit_options(model, seed);
            let (a, f) = fit_panel(&p, &spec, &options)?;
            let mut notes = String::new();
            if spec.has(Effect::Rw1Temporal) || spec.has(Effect::IidTemporal) {
                let t = temporal_rr(&a, &f, false)?;
                let _ = writeln!(notes, "temporal_rr.csv: exp(gamma + phi), {}", t.baseline_note);
                o.write("temporal_rr.csv", &table_bytes(&t)?)?;
            }
            if spec.has(Effect::Bym2Spatial) {
                let t = spatial_rr(&a, &f)?;
                let _ = writeln!(notes, "spatial_rr.csv: exp(u + v), {}", t.baseline_note);
                o.write("spatial_rr.csv", &table_bytes(&t)?)?;
                if a.n_weeks() >= 2 {
                    let t = spatiotemporal_rr(&a, &f)?;
                    let _ = writeln!(notes, "spatiotemporal_rr.csv: full predictor, {}", t.baseline_note);
                    o.write("spatiotemporal_rr.csv", &table_bytes(&t)?)?;
                }
            }
            if spec.has(Effect::Covariate) {
                let c = covariate_rr(&a, &f)?;
                let mut csv = String::from("contrast,mean,sd,q025,q975\n");
                for (name, s) in [("beta1", c.beta1), ("rr_one_unit", c.rr), ("rr_two_units", c.rr_two_units)] {
                    let _ = writeln!(csv, "{name},{:.6},{:.6},{:.6},{:.6}", s.mean, s.sd, s.lower, s.upper);
                }
                o.write("covariate_rr.csv", csv.as_bytes())?;
            }
            if *weekly {
                let mut wspec = ModelSpec::spatial_weekly(spec.likelihood);
                wspec.cause = spec.cause;
                wspec.priors = spec.priors.clone();
                wspec.priors.fixed.retain(|h, _| {
                    matches!(
                        h,
                        dmap_core::model::HyperKind::LogPrecisionBym
                            | dmap_core::model::HyperKind::LogitMixing
                            | dmap_core::model::HyperKind::LogitZeroProb
                    )
                });
                let series = weekly_covariate_series(&p, &wspec, &options)?;
                let mut buf = Vec::new();
                write_weekly_csv(&series, &mut buf)?;
                o.write("weekly_covariate.csv", &buf)?;
                let fitted: Vec<(u32, f64)> = series
                    .iter()
                    .filter_map(|w| match &w.outcome {
                        WeekOutcome::Fitted(c) => Some((w.week, c.rr.mean)),
                        _ => None,
                    })
                    .collect();
                let rr: Vec<f64> = fitted.iter().map(|x| x.1).collect();
                match crossing_index(&rr) {
                    Some(k) => {
                        let _ = writeln!(notes, "weekly covariate RR crosses 1 at week {}", fitted[k].0);
                    }
                    None => {
                        let _ = writeln!(notes, "weekly covariate RR: too few fitted weeks for a crossing");
                    }
                }
            }
            o.write("notes.txt", notes.as_bytes())?;
        }
        Command::Simulate { scenario } => {
            let o = require_out(&mut out)?;
            let s = load_scenario(scenario.as_deref(), cli.seed, &mut manifest)?;
            let (panel, truth) = simulate_panel(&s)?;
            let tables = panel_csv(&panel)?;
            o.write("deaths.csv", tables.deaths.as_bytes())?;
            o.write("population.csv", tables.population.as_bytes())?;
            if let Some(c) = &tables.covariate {
                o.write("covariate.csv", c.as_bytes())?;
            }
            o.write("edges.csv", panel.graph().to_edge_csv().as_bytes())?;
            let mut csv = String::from("area_id,week,eta,expected,beta1\n");
            let t = panel.n_weeks();
            for (i, id) in panel.graph().unit_ids().iter().enumerate() {
                for (w, week) in panel.weeks().iter().enumerate() {
                    let k = i * t + w;
                    let _ = writeln!(
                        csv,
                        "{id},{week},{:.6},{:.6},{:.6}",
                        truth.eta[k], truth.expected[k], truth.beta1[w]
                    );
                }
            }
            o.write("truth.csv", csv.as_bytes())?;
            o.write("scenario.txt", s.to_config().as_bytes())?;
        }
        Command::Recover { scenario, replicates } => {
            let o = require_out(&mut out)?;
            let s = load_scenario(scenario.as_deref(), cli.seed, &mut manifest)?;
            let options = FitOptions {
                dic_samples: 0,
                seed: s.seed,
                ..FitOptions::default()
            };
            let report = recovery_experiment(&s, *replicates, &matching_spec(&s), &options)?;
            let mut buf = Vec::new();
            report.write_csv(&mut buf)?;
            o.write("recovery.csv", &buf)?;
            let summary = report.summary_text();
            print!("{summary}");
            o.write("recovery_summary.txt", summary.as_bytes())?;
        }
    }

    if let Some(o) = out.as_mut() {
        manifest.artifacts = o.take_written();
        manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Input(e.to_string()))?;
        fs::write(o.path().join("manifest.json"), json + "\n")?;
        log::info!("wrote {} artifact(s) to {}", manifest.artifacts.len(), o.path().display());
    }
    Ok(())
}
