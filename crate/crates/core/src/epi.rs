//! Death counts, stratified populations and the area covariate; mortality
//! rates and expected counts by indirect standardization.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ArealGraph;

pub const PER_100K: f64 = 100_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CauseClass {
    /// ICD-10 B34.2
    Confirmed,
    /// ICD-10 U04.9
    Suspected,
    /// confirmed + suspected
    Total,
}

impl CauseClass {
    pub const ALL: [CauseClass; 3] = [CauseClass::Confirmed, CauseClass::Suspected, CauseClass::Total];

    pub fn name(self) -> &'static str {
        match self {
            CauseClass::Confirmed => "confirmed",
            CauseClass::Suspected => "suspected",
            CauseClass::Total => "total",
        }
    }
}

impl fmt::Display for CauseClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CauseClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "confirmed" | "b34.2" | "b342" => Ok(CauseClass::Confirmed),
            "suspected" | "u04.9" | "u049" => Ok(CauseClass::Suspected),
            "total" => Ok(CauseClass::Total),
            other => Err(Error::invalid(format!("unknown cause class `{other}`"))),
        }
    }
}

/// One (sex, age-group) population stratum.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Stratum {
    pub sex: String,
    pub age_group: String,
}

impl Stratum {
    pub fn new(sex: impl Into<String>, age_group: impl Into<String>) -> Self {
        Self {
            sex: sex.into(),
            age_group: age_group.into(),
        }
    }
}

/// Default age bands, used when none are configured.
pub const DEFAULT_AGE_BANDS: [&str; 4] = ["0-19", "20-39", "40-59", "60+"];

/// Refinement of the oldest band.
pub const DEFAULT_OLDER_BANDS: [&str; 4] = ["60-64", "65-69", "70-74", "75+"];

/// Area × week × stratum death counts with stratified populations.
///
/// Counts are dense: missing cells are explicit zeros. Confirmed and
/// suspected deaths are stored separately; the total class is their sum.
#[derive(Debug, Clone)]
pub struct EpiPanel {
    graph: Arc<ArealGraph>,
    weeks: Vec<u32>,
    strata: Vec<Stratum>,
    // [(area * n_weeks + week) * n_strata + stratum] -> [confirmed, suspected]
    deaths: Vec<[u64; 2]>,
    // [area * n_strata + stratum]
    population: Vec<f64>,
    covariate: Option<Vec<f64>>,
}

impl EpiPanel {
    /// Validating constructor. `deaths` is laid out as documented on the
    /// struct; `population` as area-major.
    pub fn new(
        graph: Arc<ArealGraph>,
        weeks: Vec<u32>,
        strata: Vec<Stratum>,
        deaths: Vec<[u64; 2]>,
        population: Vec<f64>,
        covariate: Option<Vec<f64>>,
    ) -> Result<Self> {
        let (n, t, s) = (graph.n_units(), weeks.len(), strata.len());
        if t == 0 || s == 0 || n == 0 {
            return Err(Error::invalid("panel needs at least one area, week and stratum"));
        }
        if weeks.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::invalid("weeks must be contiguous and strictly increasing"));
        }
        if deaths.len() != n * t * s || population.len() != n * s {
            return Err(Error::invalid("panel arrays do not match its dimensions"));
        }
        for (k, &p) in population.iter().enumerate() {
            if !(p >= 0.0) || !p.is_finite() {
                return Err(Error::NegativeCount {
                    context: format!("population of area {} stratum {}", k / s, k % s),
                    value: p,
                });
            }
        }
        if population.iter().sum::<f64>() <= 0.0 {
            return Err(Error::ZeroPopulation("total population is zero".into()));
        }
        if let Some(z) = &covariate {
            if z.len() != n {
                return Err(Error::invalid("covariate length differs from the number of areas"));
            }
            if let Some(i) = z.iter().position(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "covariate of `{}` is not finite",
                    graph.unit_ids()[i]
                )));
            }
        }
        Ok(Self {
            graph,
            weeks,
            strata,
            deaths,
            population,
            covariate,
        })
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

    pub fn strata(&self) -> &[Stratum] {
        &self.strata
    }

    pub fn covariate(&self) -> Option<&[f64]> {
        self.covariate.as_deref()
    }

    pub fn with_covariate(mut self, covariate: Option<Vec<f64>>) -> Result<Self> {
        if let Some(z) = &covariate {
            if z.len() != self.n_areas() || z.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("covariate must be finite, one value per area"));
            }
        }
        self.covariate = covariate;
        Ok(self)
    }

    fn cell(&self, area: usize, week: usize, stratum: usize) -> usize {
        (area * self.n_weeks() + week) * self.strata.len() + stratum
    }

    pub fn deaths(&self, area: usize, week: usize, stratum: usize, cause: CauseClass) -> u64 {
        let [c, s] = self.deaths[self.cell(area, week, stratum)];
        match cause {
            CauseClass::Confirmed => c,
            CauseClass::Suspected => s,
            CauseClass::Total => c + s,
        }
    }

    /// Deaths in one area-week summed over strata.
    pub fn area_week_deaths(&self, area: usize, week: usize, cause: CauseClass) -> u64 {
        (0..self.strata.len())
            .map(|s| self.deaths(area, week, s, cause))
            .sum()
    }

    /// Area-week counts, area-major.
    pub fn count_matrix(&self, cause: CauseClass) -> Vec<u64> {
        let mut out = Vec::with_capacity(self.n_areas() * self.n_weeks());
        for i in 0..self.n_areas() {
            for t in 0..self.n_weeks() {
                out.push(self.area_week_deaths(i, t, cause));
            }
        }
        out
    }

    pub fn population(&self, area: usize, stratum: usize) -> f64 {
        self.population[area * self.strata.len() + stratum]
    }

    pub fn area_population(&self, area: usize) -> f64 {
        (0..self.strata.len()).map(|s| self.population(area, s)).sum()
    }

    pub fn stratum_population(&self, stratum: usize) -> f64 {
        (0..self.n_areas()).map(|i| self.population(i, stratum)).sum()
    }

    pub fn total_population(&self) -> f64 {
        self.population.iter().sum()
    }

    pub fn total_deaths(&self, cause: CauseClass) -> u64 {
        (0..self.n_areas())
            .flat_map(|i| (0..self.n_weeks()).map(move |t| (i, t)))
            .map(|(i, t)| self.area_week_deaths(i, t, cause))
            .sum()
    }

    /// Restriction to a single week (for per-week spatial fits).
    pub fn week_slice(&self, week: usize) -> EpiPanel {
        let s = self.strata.len();
        let mut deaths = Vec::with_capacity(self.n_areas() * s);
        for i in 0..self.n_areas() {
            for k in 0..s {
                deaths.push(self.deaths[self.cell(i, week, k)]);
            }
        }
        EpiPanel {
            graph: self.graph.clone(),
            weeks: vec![self.weeks[week]],
            strata: self.strata.clone(),
            deaths,
            population: self.population.clone(),
            covariate: self.covariate.clone(),
        }
    }
}

/// What ingestion dropped or filled in.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub death_rows: usize,
    pub deaths_read: u64,
    pub dropped_unknown_sex: u64,
    pub dropped_unknown_age: u64,
    pub dropped_outside_weeks: u64,
    pub population_rows: usize,
    pub covariate_rows: usize,
}

impl fmt::Display for IngestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "death rows: {}", self.death_rows)?;
        writeln!(f, "deaths read: {}", self.deaths_read)?;
        writeln!(f, "dropped (unknown sex): {}", self.dropped_unknown_sex)?;
        writeln!(f, "dropped (unknown age): {}", self.dropped_unknown_age)?;
        writeln!(f, "dropped (outside week range): {}", self.dropped_outside_weeks)?;
        writeln!(f, "population rows: {}", self.population_rows)?;
        write!(f, "covariate rows: {}", self.covariate_rows)
    }
}

fn is_unknown(label: &str) -> bool {
    matches!(
        label.trim().to_ascii_lowercase().as_str(),
        "" | "na" | "nan" | "ignored" | "ignorado" | "unknown" | "ign" | "?"
    )
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

fn expect_header(r: &mut csv::Reader<&[u8]>, names: &[&str], file: &str) -> Result<()> {
    let headers = r.headers()?;
    let got: Vec<&str> = headers.iter().collect();
    if got != names {
        return Err(Error::parse(
            1,
            format!("{file}: expected header `{}`, found `{}`", names.join(","), got.join(",")),
        ));
    }
    Ok(())
}

fn parse_count(field: &str, line: usize, context: &str) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| Error::parse(line, format!("{context}: `{field}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::parse(line, format!("{context}: non-finite value")));
    }
    if v < 0.0 {
        return Err(Error::NegativeCount {
            context: format!("{context} (line {line})"),
            value: v,
        });
    }
    Ok(v)
}

/// Reads `deaths.csv`, `population.csv` and optionally `covariate.csv` into
/// a dense panel over the units of `graph`.
///
/// Strata are the (sex, age-group) pairs of the population table, in order
/// of first appearance. Death rows with an unknown sex or age are dropped
/// and counted in the report. `weeks` restricts the panel to a range;
/// otherwise it spans the smallest to the largest week present.
pub fn ingest_panel(
    deaths_csv: &str,
    population_csv: &str,
    covariate_csv: Option<&str>,
    graph: Arc<ArealGraph>,
    weeks: Option<(u32, u32)>,
) -> Result<(EpiPanel, IngestReport)> {
    let mut report = IngestReport::default();
    let area_index = |id: &str| {
        graph
            .index_of(id)
            .ok_or_else(|| Error::UnknownUnit(id.to_string()))
    };

    let mut strata: Vec<Stratum> = Vec::new();
    let mut stratum_index: HashMap<Stratum, usize> = HashMap::new();
    let mut pop_rows: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut r = reader(population_csv);
    expect_header(&mut r, &["area_id", "sex", "age_group", "count"], "population")?;
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        if rec.len() != 4 {
            return Err(Error::parse(line, "population: expected 4 columns"));
        }
        let area = area_index(&rec[0])?;
        let stratum = Stratum::new(&rec[1], &rec[2]);
        if is_unknown(&stratum.sex) || is_unknown(&stratum.age_group) {
            return Err(Error::parse(line, "population: unknown sex or age group"));
        }
        let s = *stratum_index.entry(stratum.clone()).or_insert_with(|| {
            strata.push(stratum.clone());
            strata.len() - 1
        });
        let count = parse_count(&rec[3], line, "population")?;
        if pop_rows.insert((area, s), count).is_some() {
            return Err(Error::DuplicateKey(format!(
                "population ({}, {}, {})",
                &rec[0], &rec[1], &rec[2]
            )));
        }
        report.population_rows += 1;
    }
    if strata.is_empty() {
        return Err(Error::invalid("population table is empty"));
    }

    struct DeathRow {
        area: usize,
        week: u32,
        stratum: usize,
        cause: usize,
        count: u64,
    }
    let mut rows = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut r = reader(deaths_csv);
    expect_header(
        &mut r,
        &["area_id", "week", "sex", "age_group", "cause", "count"],
        "deaths",
    )?;
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        if rec.len() != 6 {
            return Err(Error::parse(line, "deaths: expected 6 columns"));
        }
        report.death_rows += 1;
        let area = area_index(&rec[0])?;
        let week: u32 = rec[1]
            .parse()
            .map_err(|_| Error::parse(line, format!("deaths: bad week `{}`", &rec[1])))?;
        let cause = match rec[4].parse::<CauseClass>() {
            Ok(CauseClass::Confirmed) => 0,
            Ok(CauseClass::Suspected) => 1,
            _ => {
                return Err(Error::parse(
                    line,
                    format!("deaths: cause must be B34.2 or U04.9, got `{}`", &rec[4]),
                ))
            }
        };
        let count = parse_count(&rec[5], line, "deaths")?;
        if count.fract() != 0.0 {
            return Err(Error::parse(line, "deaths: count must be an integer"));
        }
        let count = count as u64;
        report.deaths_read += count;
        if !seen.insert((
            rec[0].to_string(),
            week,
            rec[2].to_string(),
            rec[3].to_string(),
            cause,
        )) {
            return Err(Error::DuplicateKey(format!(
                "deaths ({}, {}, {}, {}, {})",
                &rec[0], week, &rec[2], &rec[3], &rec[4]
            )));
        }
        if is_unknown(&rec[2]) {
            report.dropped_unknown_sex += count;
            continue;
        }
        if is_unknown(&rec[3]) {
            report.dropped_unknown_age += count;
            continue;
        }
        if let Some((lo, hi)) = weeks {
            if week < lo || week > hi {
                report.dropped_outside_weeks += count;
                continue;
            }
        }
        let stratum = *stratum_index
            .get(&Stratum::new(&rec[2], &rec[3]))
            .ok_or_else(|| {
                Error::parse(
                    line,
                    format!(
                        "deaths: stratum ({}, {}) is not in the population table",
                        &rec[2], &rec[3]
                    ),
                )
            })?;
        rows.push(DeathRow {
            area,
            week,
            stratum,
            cause,
            count,
        });
    }

    let (lo, hi) = match weeks {
        Some((lo, hi)) if lo <= hi => (lo, hi),
        Some(_) => return Err(Error::invalid("empty week range")),
        None => {
            let lo = rows.iter().map(|r| r.week).min();
            let hi = rows.iter().map(|r| r.week).max();
            match (lo, hi) {
                (Some(lo), Some(hi)) => (lo, hi),
                _ => return Err(Error::invalid("deaths table has no usable rows")),
            }
        }
    };
    let week_labels: Vec<u32> = (lo..=hi).collect();
    let (n, t, s) = (graph.n_units(), week_labels.len(), strata.len());
    let mut deaths = vec![[0u64; 2]; n * t * s];
    for row in rows {
        let idx = (row.area * t + (row.week - lo) as usize) * s + row.stratum;
        deaths[idx][row.cause] += row.count;
    }
    let mut population = vec![0.0; n * s];
    for ((area, st), v) in pop_rows {
        population[area * s + st] = v;
    }

    let covariate = match covariate_csv {
        None => None,
        Some(text) => {
            let mut values = vec![None; n];
            let mut r = reader(text);
            expect_header(&mut r, &["area_id", "value"], "covariate")?;
            for (k, rec) in r.records().enumerate() {
                let rec = rec?;
                let line = k + 2;
                if rec.len() != 2 {
                    return Err(Error::parse(line, "covariate: expected 2 columns"));
                }
                let area = area_index(&rec[0])?;
                let v: f64 = rec[1]
                    .parse()
                    .map_err(|_| Error::parse(line, format!("covariate: bad value `{}`", &rec[1])))?;
                if !v.is_finite() {
                    return Err(Error::parse(line, "covariate: non-finite value"));
                }
                if values[area].replace(v).is_some() {
                    return Err(Error::DuplicateKey(format!("covariate {}", &rec[0])));
                }
                report.covariate_rows += 1;
            }
            let mut out = Vec::with_capacity(n);
            for (i, v) in values.into_iter().enumerate() {
                out.push(v.ok_or_else(|| {
                    Error::invalid(format!("covariate missing for `{}`", graph.unit_ids()[i]))
                })?);
            }
            Some(out)
        }
    };

    let panel = EpiPanel::new(graph, week_labels, strata, deaths, population, covariate)?;
    Ok((panel, report))
}

/// Deaths per 100,000 inhabitants.
pub fn period_rate(deaths: f64, population: f64) -> Result<f64> {
    if !(population > 0.0) {
        return Err(Error::ZeroPopulation(format!("rate of {deaths} deaths")));
    }
    if deaths < 0.0 {
        return Err(Error::NegativeCount {
            context: "period_rate".into(),
            value: deaths,
        });
    }
    Ok(deaths / population * PER_100K)
}

/// Distinct area identifiers of a population table, sorted.
pub fn population_units(population_csv: &str) -> Result<Vec<String>> {
    let mut r = reader(population_csv);
    expect_header(&mut r, &["area_id", "sex", "age_group", "count"], "population")?;
    let mut ids = std::collections::BTreeSet::new();
    for rec in r.records() {
        let rec = rec?;
        if let Some(id) = rec.get(0) {
            ids.insert(id.to_string());
        }
    }
    Ok(ids.into_iter().collect())
}

/// The three input tables of a panel, in the formats read by
/// [`ingest_panel`].
#[derive(Debug, Clone, PartialEq)]
pub struct PanelTables {
    pub deaths: String,
    pub population: String,
    pub covariate: Option<String>,
}

/// Writes a panel back out as CSV tables. Zero death cells are omitted.
pub fn panel_csv(panel: &EpiPanel) -> Result<PanelTables> {
    let ids = panel.graph().unit_ids();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["area_id", "week", "sex", "age_group", "cause", "count"])?;
    for (i, id) in ids.iter().enumerate() {
        for (t, week) in panel.weeks().iter().enumerate() {
            for (s, st) in panel.strata().iter().enumerate() {
                for (cause, code) in [(CauseClass::Confirmed, "B34.2"), (CauseClass::Suspected, "U04.9")] {
                    let c = panel.deaths(i, t, s, cause);
                    if c > 0 {
                        w.write_record([id.as_str(), &week.to_string(), &st.sex, &st.age_group, code, &c.to_string()])?;
                    }
                }
            }
        }
    }
    let deaths = into_string(w)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["area_id", "sex", "age_group", "count"])?;
    for (i, id) in ids.iter().enumerate() {
        for (s, st) in panel.strata().iter().enumerate() {
            w.write_record([id.as_str(), &st.sex, &st.age_group, &panel.population(i, s).to_string()])?;
        }
    }
    let population = into_string(w)?;
    let covariate = match panel.covariate() {
        None => None,
        Some(values) => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["area_id", "value"])?;
            for (id, v) in ids.iter().zip(values) {
                w.write_record([id.as_str(), &v.to_string()])?;
            }
            Some(into_string(w)?)
        }
    };
    Ok(PanelTables {
        deaths,
        population,
        covariate,
    })
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Population implied by a published count and its rate per 100,000.
pub fn implied_population(deaths: f64, rate_per_100k: f64) -> Result<f64> {
    if !(rate_per_100k > 0.0) || deaths < 0.0 {
        return Err(Error::invalid(format!(
            "cannot infer a population from {deaths} deaths at rate {rate_per_100k}"
        )));
    }
    Ok(deaths / rate_per_100k * PER_100K)
}

/// City-wide deaths per 100,000 inhabitants for each week.
pub fn weekly_rates(panel: &EpiPanel, cause: CauseClass) -> Vec<f64> {
    let pop = panel.total_population();
    (0..panel.n_weeks())
        .map(|t| {
            let d: u64 = (0..panel.n_areas())
                .map(|i| panel.area_week_deaths(i, t, cause))
                .sum();
            d as f64 / pop * PER_100K
        })
        .collect()
}

/// Period-wide city rate (per person) of each stratum.
pub fn stratum_rates(panel: &EpiPanel, cause: CauseClass) -> Result<Vec<f64>> {
    (0..panel.strata().len())
        .map(|s| {
            let deaths: u64 = (0..panel.n_areas())
                .flat_map(|i| (0..panel.n_weeks()).map(move |t| (i, t)))
                .map(|(i, t)| panel.deaths(i, t, s, cause))
                .sum();
            stratum_rate(panel, s, deaths)
        })
        .collect()
}

fn stratum_rate(panel: &EpiPanel, s: usize, deaths: u64) -> Result<f64> {
    let pop = panel.stratum_population(s);
    if pop > 0.0 {
        Ok(deaths as f64 / pop)
    } else if deaths == 0 {
        Ok(0.0)
    } else {
        let st = &panel.strata()[s];
        Err(Error::ZeroPopulation(format!(
            "stratum ({}, {}) has {deaths} deaths and no population",
            st.sex, st.age_group
        )))
    }
}

/// City rate (per person) of each stratum in each week, `[week][stratum]`.
pub fn weekly_stratum_rates(panel: &EpiPanel, cause: CauseClass) -> Result<Vec<Vec<f64>>> {
    (0..panel.n_weeks())
        .map(|t| {
            (0..panel.strata().len())
                .map(|s| {
                    let deaths: u64 = (0..panel.n_areas())
                        .map(|i| panel.deaths(i, t, s, cause))
                        .sum();
                    stratum_rate(panel, s, deaths)
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Basis {
    /// Period-wide city rates, spread evenly over the weeks.
    WholePeriod,
    /// Each week's own city rates.
    PerWeek,
}

impl FromStr for Basis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "period" | "whole-period" | "whole_period" => Ok(Basis::WholePeriod),
            "per-week" | "per_week" | "week" => Ok(Basis::PerWeek),
            other => Err(Error::invalid(format!("unknown basis `{other}`"))),
        }
    }
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Basis::WholePeriod => "period",
            Basis::PerWeek => "per-week",
        })
    }
}

/// Expected counts `E[area, week]`, area-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedCounts {
    pub values: Vec<f64>,
    pub basis: Basis,
    pub n_areas: usize,
    pub n_weeks: usize,
}

impl ExpectedCounts {
    pub fn get(&self, area: usize, week: usize) -> f64 {
        self.values[area * self.n_weeks + week]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

/// Indirect standardization against city-wide stratum rates.
pub fn expected_counts(panel: &EpiPanel, cause: CauseClass, basis: Basis) -> Result<ExpectedCounts> {
    let (n, t, s) = (panel.n_areas(), panel.n_weeks(), panel.strata().len());
    let mut values = Vec::with_capacity(n * t);
    match basis {
        Basis::WholePeriod => {
            let rates = stratum_rates(panel, cause)?;
            for i in 0..n {
                let e: f64 = (0..s).map(|k| panel.population(i, k) * rates[k]).sum();
                values.extend(std::iter::repeat_n(e / t as f64, t));
            }
        }
        Basis::PerWeek => {
            let rates = weekly_stratum_rates(panel, cause)?;
            for i in 0..n {
                for week_rates in &rates {
                    values.push((0..s).map(|k| panel.population(i, k) * week_rates[k]).sum());
                }
            }
        }
    }
    Ok(ExpectedCounts {
        values,
        basis,
        n_areas: n,
        n_weeks: t,
    })
}

/// Percentage of zeros in `counts`.
pub fn zero_percentage(counts: &[u64]) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    100.0 * counts.iter().filter(|&&c| c == 0).count() as f64 / counts.len() as f64
}

/// Percentage of area cells without deaths: one value over all area-weeks,
/// or one value per week.
pub fn zero_fraction(panel: &EpiPanel, cause: CauseClass, per_week: bool) -> Vec<f64> {
    let counts = panel.count_matrix(cause);
    if per_week {
        let t = panel.n_weeks();
        (0..t)
            .map(|w| {
                let week: Vec<u64> = counts.iter().skip(w).step_by(t).copied().collect();
                zero_percentage(&week)
            })
            .collect()
    } else {
        vec![zero_percentage(&counts)]
    }
}

/// One row of a Table-1 style summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRate {
    pub group: String,
    pub cause: CauseClass,
    pub deaths: u64,
    pub population: f64,
    pub rate_per_100k: f64,
}

/// Period rates by sex, by age group and overall, for every cause class.
pub fn group_rates(panel: &EpiPanel) -> Result<Vec<GroupRate>> {
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    let mut push = |label: String, s: usize| match groups.iter_mut().find(|(g, _)| *g == label) {
        Some((_, members)) => members.push(s),
        None => groups.push((label, vec![s])),
    };
    for (s, st) in panel.strata().iter().enumerate() {
        push(format!("sex={}", st.sex), s);
    }
    for (s, st) in panel.strata().iter().enumerate() {
        push(format!("age={}", st.age_group), s);
    }
    groups.push(("total".into(), (0..panel.strata().len()).collect()));

    let mut out = Vec::new();
    for (label, members) in groups {
        let population: f64 = members.iter().map(|&s| panel.stratum_population(s)).sum();
        for cause in CauseClass::ALL {
            let deaths: u64 = members
                .iter()
                .map(|&s| {
                    (0..panel.n_areas())
                        .flat_map(|i| (0..panel.n_weeks()).map(move |t| (i, t)))
                        .map(|(i, t)| panel.deaths(i, t, s, cause))
                        .sum::<u64>()
                })
                .sum();
            out.push(GroupRate {
                group: label.clone(),
                cause,
                deaths,
                population,
                rate_per_100k: period_rate(deaths as f64, population)?,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::load_edge_list;

    fn graph2() -> Arc<ArealGraph> {
        Arc::new(load_edge_list("src,dst\nA,B\n", None).unwrap())
    }

    const POP: &str = "area_id,sex,age_group,count\nA,M,0-59,10\nA,F,0-59,20\nB,M,0-59,30\nB,F,0-59,40\n";

    #[test]
    fn single_death_row_gives_dense_zeros() {
        let deaths = "area_id,week,sex,age_group,cause,count\nA,12,M,0-59,B34.2,1\nB,13,F,0-59,U04.9,0\n";
        let (p, report) = ingest_panel(deaths, POP, None, graph2(), None).unwrap();
        assert_eq!(p.weeks(), &[12, 13]);
        let total = p.count_matrix(CauseClass::Total);
        assert_eq!(total, vec![1, 0, 0, 0]);
        assert_eq!(report.deaths_read, 1);
    }

    #[test]
    fn unknown_area_is_named() {
        let deaths = "area_id,week,sex,age_group,cause,count\nQ,12,M,0-59,B34.2,1\n";
        let err = ingest_panel(deaths, POP, None, graph2(), None).unwrap_err();
        assert!(err.to_string().contains("`Q`"), "{err}");
    }

    #[test]
    fn total_is_confirmed_plus_suspected() {
        let deaths = "area_id,week,sex,age_group,cause,count\n\
            A,1,M,0-59,B34.2,2\nA,1,M,0-59,U04.9,3\nB,1,F,0-59,U04.9,4\n";
        let (p, _) = ingest_panel(deaths, POP, None, graph2(), None).unwrap();
        for i in 0..2 {
            for s in 0..2 {
                assert_eq!(
                    p.deaths(i, 0, s, CauseClass::Total),
                    p.deaths(i, 0, s, CauseClass::Confirmed) + p.deaths(i, 0, s, CauseClass::Suspected)
                );
            }
        }
        assert_eq!(p.total_deaths(CauseClass::Total), 9);
    }

    #[test]
    fn rejects_negative_and_duplicate_rows() {
        let neg = "area_id,week,sex,age_group,cause,count\nA,1,M,0-59,B34.2,-1\n";
        assert!(matches!(
            ingest_panel(neg, POP, None, graph2(), None),
            Err(Error::NegativeCount { .. })
        ));
        let dup = "area_id,week,sex,age_group,cause,count\nA,1,M,0-59,B34.2,1\nA,1,M,0-59,B34.2,2\n";
        assert!(matches!(
            ingest_panel(dup, POP, None, graph2(), None),
            Err(Error::DuplicateKey(_))
        ));
    }

    #[test]
    fn unknown_sex_and_age_are_dropped_and_reported() {
        let deaths = "area_id,week,sex,age_group,cause,count\n\
            A,1,M,0-59,B34.2,2\nA,1,ignored,0-59,B34.2,3\nA,1,F,,U04.9,6\n";
        let (p, report) = ingest_panel(deaths, POP, None, graph2(), None).unwrap();
        assert_eq!(p.total_deaths(CauseClass::Total), 2);
        assert_eq!(report.dropped_unknown_sex, 3);
        assert_eq!(report.dropped_unknown_age, 6);
    }

    #[test]
    fn covariate_is_read_and_checked() {
        let deaths = "area_id,week,sex,age_group,cause,count\nA,1,M,0-59,B34.2,2\n";
        let (p, _) = ingest_panel(
            deaths,
            POP,
            Some("area_id,value\nB,-0.5\nA,0.25\n"),
            graph2(),
            None,
        )
        .unwrap();
        assert_eq!(p.covariate(), Some(&[0.25, -0.5][..]));
        assert!(ingest_panel(deaths, POP, Some("area_id,value\nA,1\n"), graph2(), None).is_err());
    }

    #[test]
    fn period_rate_examples() {
        assert!((period_rate(5875.0, 11_869_660.0).unwrap() - 49.5).abs() < 0.05);
        assert!((period_rate(10693.0, 11_869_660.0).unwrap() - 90.1).abs() < 0.05);
        assert_eq!(period_rate(0.0, 123.0).unwrap(), 0.0);
        assert!(period_rate(1.0, 0.0).is_err());
    }

    #[test]
    fn stratum_and_expected_examples() {
        let g = Arc::new(ArealGraph::new(vec!["A".into()], &[]).unwrap());
        let strata = vec![Stratum::new("M", "all"), Stratum::new("F", "all")];
        // one area, one week; rates male 0.1 (1/10), female 0.05 (1/20)
        let p = EpiPanel::new(g, vec![1], strata, vec![[1, 0], [1, 0]], vec![10.0, 20.0], None).unwrap();
        let rates = stratum_rates(&p, CauseClass::Total).unwrap();
        assert_eq!(rates, vec![0.1, 0.05]);
        let e = expected_counts(&p, CauseClass::Total, Basis::WholePeriod).unwrap();
        assert!((e.get(0, 0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_population_stratum_with_deaths_is_rejected() {
        let g = Arc::new(ArealGraph::new(vec!["A".into()], &[]).unwrap());
        let strata = vec![Stratum::new("M", "a"), Stratum::new("F", "a")];
        let p = EpiPanel::new(g, vec![1], strata, vec![[1, 0], [0, 0]], vec![0.0, 5.0], None).unwrap();
        assert!(matches!(
            stratum_rates(&p, CauseClass::Confirmed),
            Err(Error::ZeroPopulation(_))
        ));
    }

    #[test]
    fn zero_percentage_examples() {
        assert_eq!(zero_percentage(&[0, 0, 1, 3]), 50.0);
        assert_eq!(zero_percentage(&[1, 2]), 0.0);
        assert_eq!(zero_percentage(&[0, 0, 0]), 100.0);
    }

    #[test]
    fn cause_parsing() {
        assert_eq!("B34.2".parse::<CauseClass>().unwrap(), CauseClass::Confirmed);
        assert_eq!("U04.9".parse::<CauseClass>().unwrap(), CauseClass::Suspected);
        assert_eq!("total".parse::<CauseClass>().unwrap(), CauseClass::Total);
        assert!("X".parse::<CauseClass>().is_err());
    }
}
