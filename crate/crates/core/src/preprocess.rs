//! Exclusion criteria and the fold of multi-year samples onto a 52-week year.
//!
//! The pipeline per site is: exclusions -> weekly pooling -> province window
//! -> gap filter -> log10. Covariates share the pooling but are never logged.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use chrono::{Datelike, Duration, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{CovariateRecord, Province, SampleRecord, SiteCovariateMap, SiteRegistry, StoreError};

pub const WEEKS_PER_YEAR: u32 = 52;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("site `{site_id}`: non-positive value at week {week}")]
    NonPositiveValue { site_id: String, week: u32 },
    #[error("site `{0}` has no precipitation location in the site/covariate map")]
    UnmappedSite(String),
    #[error("site `{0}` is not in the site registry")]
    UnknownSite(String),
    #[error("selected provinces use different week windows: {0}")]
    MixedWindows(String),
    #[error("weekly series file: {0}")]
    Format(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Inclusive range of weeks analysed for a province.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub first: u32,
    pub last: u32,
}

impl Window {
    pub const FULL_YEAR: Window = Window {
        first: 1,
        last: WEEKS_PER_YEAR,
    };

    pub fn new(first: u32, last: u32) -> Self {
        assert!(
            1 <= first && first <= last && last <= WEEKS_PER_YEAR,
            "invalid window {first}..={last}"
        );
        Self { first, last }
    }

    /// BC reports year-round; the Atlantic provinces only in the warm season.
    pub fn for_province(p: Province) -> Self {
        match p {
            Province::BC => Window::FULL_YEAR,
            Province::QC | Province::NB | Province::PE | Province::NS => Window::new(19, 45),
            Province::NL => Window::new(20, 38),
        }
    }

    pub fn contains(&self, week: u32) -> bool {
        (self.first..=self.last).contains(&week)
    }

    pub fn len(&self) -> usize {
        (self.last - self.first + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn weeks(&self) -> impl Iterator<Item = u32> {
        self.first..=self.last
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// Weekly mean count, not yet logged.
    RawCount,
    Log10Count,
    RawCovariate,
}

impl Scale {
    pub fn as_str(self) -> &'static str {
        match self {
            Scale::RawCount => "raw_count",
            Scale::Log10Count => "log10_count",
            Scale::RawCovariate => "raw_covariate",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "raw_count" => Some(Scale::RawCount),
            "log10_count" => Some(Scale::Log10Count),
            "raw_covariate" => Some(Scale::RawCovariate),
            _ => None,
        }
    }
}

/// A sparse per-site series over the weeks of one pooled year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeeklySeries {
    pub site_id: String,
    pub window: Window,
    pub values: BTreeMap<u32, f64>,
    pub scale: Scale,
}

impl WeeklySeries {
    pub fn new(site_id: impl Into<String>, window: Window, values: BTreeMap<u32, f64>, scale: Scale) -> Self {
        Self {
            site_id: site_id.into(),
            window,
            values,
            scale,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Longest run of consecutive missing weeks inside the window.
    pub fn longest_gap(&self) -> u32 {
        let mut longest = 0;
        let mut run = 0;
        for w in self.window.weeks() {
            if self.values.contains_key(&w) {
                run = 0;
            } else {
                run += 1;
                longest = longest.max(run);
            }
        }
        longest
    }
}

/// Week index of a calendar date: `ceil(day_of_year / 7)`, with days 365
/// and 366 folded into week 52.
pub fn week_of(date: NaiveDate) -> u32 {
    let doy = date.ordinal();
    doy.div_ceil(7).min(WEEKS_PER_YEAR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    Retained,
    NoPostCutoffData,
    BelowDetection,
    GapTooLong,
}

impl Disposition {
    pub fn as_str(self) -> &'static str {
        match self {
            Disposition::Retained => "retained",
            Disposition::NoPostCutoffData => "no_post_cutoff_data",
            Disposition::BelowDetection => "below_detection",
            Disposition::GapTooLong => "gap_too_long",
        }
    }
}

/// Per-site outcome of the exclusion criteria. Every input site appears once.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExclusionReport {
    pub dispositions: BTreeMap<String, Disposition>,
}

impl ExclusionReport {
    pub fn counts(&self) -> BTreeMap<Disposition, usize> {
        let mut c = BTreeMap::new();
        for d in self.dispositions.values() {
            *c.entry(*d).or_insert(0) += 1;
        }
        c
    }

    pub fn retained(&self) -> impl Iterator<Item = &str> {
        self.dispositions
            .iter()
            .filter(|(_, d)| **d == Disposition::Retained)
            .map(|(s, _)| s.as_str())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["site_id", "disposition"])?;
        for (site, d) in &self.dispositions {
            w.write_record([site.as_str(), d.as_str()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Groups samples by site, preserving input order within each site.
pub fn group_by_site(samples: &[SampleRecord]) -> BTreeMap<String, Vec<SampleRecord>> {
    let mut by_site: BTreeMap<String, Vec<SampleRecord>> = BTreeMap::new();
    for s in samples {
        by_site.entry(s.site_id.clone()).or_default().push(s.clone());
    }
    by_site
}

/// Drops sites without any sample dated in or after `cutoff_year`, then
/// sites whose every remaining count is strictly below `detection_limit`.
/// Retained sites keep only their post-cutoff samples.
pub fn apply_exclusions(
    by_site: &BTreeMap<String, Vec<SampleRecord>>,
    cutoff_year: i32,
    detection_limit: f64,
) -> (BTreeMap<String, Vec<SampleRecord>>, ExclusionReport) {
    let mut retained = BTreeMap::new();
    let mut report = ExclusionReport::default();
    for (site, samples) in by_site {
        let recent: Vec<SampleRecord> = samples
            .iter()
            .filter(|s| s.date.year() >= cutoff_year)
            .cloned()
            .collect();
        let disposition = if recent.is_empty() {
            Disposition::NoPostCutoffData
        } else if recent.iter().all(|s| s.fc_count < detection_limit) {
            Disposition::BelowDetection
        } else {
            retained.insert(site.clone(), recent);
            Disposition::Retained
        };
        report.dispositions.insert(site.clone(), disposition);
    }
    (retained, report)
}

/// Folds dated values onto weeks and averages each week across all years.
pub fn pool_values<I>(site_id: &str, values: I, scale: Scale) -> WeeklySeries
where
    I: IntoIterator<Item = (NaiveDate, f64)>,
{
    let mut acc: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for (date, v) in values {
        let e = acc.entry(week_of(date)).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    let values = acc.into_iter().map(|(w, (sum, n))| (w, sum / n as f64)).collect();
    WeeklySeries::new(site_id, Window::FULL_YEAR, values, scale)
}

/// Weekly mean count per site (before the log transform).
pub fn pool_to_weekly(site_id: &str, samples: &[SampleRecord]) -> WeeklySeries {
    pool_values(
        site_id,
        samples.iter().map(|s| (s.date, s.fc_count)),
        Scale::RawCount,
    )
}

pub fn log_transform(series: &WeeklySeries) -> Result<WeeklySeries, PreprocessError> {
    let mut values = BTreeMap::new();
    for (&w, &v) in &series.values {
        if !(v > 0.0) {
            return Err(PreprocessError::NonPositiveValue {
                site_id: series.site_id.clone(),
                week: w,
            });
        }
        values.insert(w, v.log10());
    }
    Ok(WeeklySeries {
        values,
        scale: Scale::Log10Count,
        ..series.clone()
    })
}

/// Restricts a series to its province's analysis window.
pub fn window_subset(series: &WeeklySeries, province: Province) -> WeeklySeries {
    restrict_to_window(series, Window::for_province(province))
}

pub fn restrict_to_window(series: &WeeklySeries, window: Window) -> WeeklySeries {
    WeeklySeries {
        window,
        values: series
            .values
            .iter()
            .filter(|(w, _)| window.contains(**w))
            .map(|(w, v)| (*w, *v))
            .collect(),
        ..series.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GapDecision {
    Keep,
    Drop,
}

/// Drops a series with `max_gap` or more consecutive missing weeks inside
/// its window. Weeks outside the window are ignored.
pub fn gap_filter(series: &WeeklySeries, max_gap: u32) -> GapDecision {
    if series.longest_gap() >= max_gap {
        GapDecision::Drop
    } else {
        GapDecision::Keep
    }
}

/// Daily covariate values per location. Duplicate days are averaged.
#[derive(Debug, Clone, Default)]
pub struct DailyIndex {
    by_location: BTreeMap<String, BTreeMap<NaiveDate, f64>>,
}

impl DailyIndex {
    pub fn new(records: &[CovariateRecord]) -> Self {
        let mut acc: BTreeMap<String, BTreeMap<NaiveDate, (f64, usize)>> = BTreeMap::new();
        for r in records {
            let e = acc
                .entry(r.location_id.clone())
                .or_default()
                .entry(r.date)
                .or_insert((0.0, 0));
            e.0 += r.value;
            e.1 += 1;
        }
        let by_location = acc
            .into_iter()
            .map(|(loc, days)| {
                let days = days.into_iter().map(|(d, (s, n))| (d, s / n as f64)).collect();
                (loc, days)
            })
            .collect();
        Self { by_location }
    }

    pub fn location(&self, id: &str) -> Option<&BTreeMap<NaiveDate, f64>> {
        self.by_location.get(id)
    }

    pub fn locations(&self) -> impl Iterator<Item = &str> {
        self.by_location.keys().map(String::as_str)
    }
}

/// Antecedent precipitation for one site's samples.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativePrecip {
    /// `(sample date, sum over the preceding horizon)` per sample.
    pub per_sample: Vec<(NaiveDate, f64)>,
    /// Weekly mean of `per_sample`, raw scale.
    pub series: WeeklySeries,
    /// Days within a horizon with no record; they contributed 0.
    pub missing_days: usize,
}

/// Sums precipitation over days `d-1 ..= d-horizon_days` before each sample
/// date `d`, then pools the sums weekly.
pub fn cumulative_precip(
    site_id: &str,
    samples: &[SampleRecord],
    map: &SiteCovariateMap,
    precip: &DailyIndex,
    horizon_days: u32,
) -> Result<CumulativePrecip, PreprocessError> {
    let location = map
        .location(site_id, crate::store::CovariateKind::Precipitation)
        .ok_or_else(|| PreprocessError::UnmappedSite(site_id.to_string()))?;
    let empty = BTreeMap::new();
    let daily = precip.location(location).unwrap_or(&empty);
    let mut missing_days = 0;
    let per_sample: Vec<(NaiveDate, f64)> = samples
        .iter()
        .map(|s| {
            let mut sum = 0.0;
            for back in 1..=horizon_days {
                match daily.get(&(s.date - Duration::days(back as i64))) {
                    Some(v) => sum += v,
                    None => missing_days += 1,
                }
            }
            (s.date, sum)
        })
        .collect();
    let series = pool_values(site_id, per_sample.iter().copied(), Scale::RawCovariate);
    Ok(CumulativePrecip {
        per_sample,
        series,
        missing_days,
    })
}

/// Weekly mean flow per river location, pooled across years.
pub fn weekly_flow(records: &[CovariateRecord]) -> BTreeMap<String, WeeklySeries> {
    let mut by_loc: BTreeMap<&str, Vec<(NaiveDate, f64)>> = BTreeMap::new();
    for r in records {
        by_loc
            .entry(r.location_id.as_str())
            .or_default()
            .push((r.date, r.value));
    }
    by_loc
        .into_iter()
        .map(|(loc, vals)| (loc.to_string(), pool_values(loc, vals, Scale::RawCovariate)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub cutoff_year: i32,
    pub detection_limit: f64,
    pub max_gap: u32,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            cutoff_year: 1999,
            detection_limit: 2.0,
            max_gap: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub window: Window,
    /// Retained sites only, log10 scale, sorted by site id.
    pub series: Vec<WeeklySeries>,
    pub report: ExclusionReport,
    /// Post-cutoff samples of the sites that passed every criterion.
    pub retained_samples: BTreeMap<String, Vec<SampleRecord>>,
}

/// Resolves the common analysis window of a province selection.
pub fn common_window(provinces: &[Province]) -> Result<Window, PreprocessError> {
    let windows: BTreeSet<(u32, u32)> = provinces
        .iter()
        .map(|p| {
            let w = Window::for_province(*p);
            (w.first, w.last)
        })
        .collect();
    match windows.len() {
        0 => Ok(Window::FULL_YEAR),
        1 => {
            let (first, last) = *windows.iter().next().unwrap();
            Ok(Window::new(first, last))
        }
        _ => Err(PreprocessError::MixedWindows(
            provinces.iter().map(|p| p.code()).collect::<Vec<_>>().join(","),
        )),
    }
}

/// Runs every exclusion and transformation for the sites in `provinces`
/// (all registry provinces when `None`).
pub fn preprocess(
    samples: &[SampleRecord],
    registry: &SiteRegistry,
    provinces: Option<&[Province]>,
    cfg: &PreprocessConfig,
) -> Result<Preprocessed, PreprocessError> {
    let mut by_site = group_by_site(samples);
    for site in by_site.keys() {
        if registry.get(site).is_none() {
            return Err(PreprocessError::UnknownSite(site.clone()));
        }
    }
    let selected: Vec<Province> = match provinces {
        Some(p) => p.to_vec(),
        None => {
            let set: BTreeSet<Province> = by_site
                .keys()
                .filter_map(|s| registry.get(s).map(|i| i.province))
                .collect();
            set.into_iter().collect()
        }
    };
    let window = common_window(&selected)?;
    by_site.retain(|s, _| registry.get(s).is_some_and(|i| selected.contains(&i.province)));

    let (candidates, mut report) = apply_exclusions(&by_site, cfg.cutoff_year, cfg.detection_limit);
    let mut series = Vec::new();
    let mut retained_samples = BTreeMap::new();
    for (site, site_samples) in candidates {
        let weekly = restrict_to_window(&pool_to_weekly(&site, &site_samples), window);
        if gap_filter(&weekly, cfg.max_gap) == GapDecision::Drop {
            report.dispositions.insert(site, Disposition::GapTooLong);
            continue;
        }
        series.push(log_transform(&weekly)?);
        retained_samples.insert(site, site_samples);
    }
    Ok(Preprocessed {
        window,
        series,
        report,
        retained_samples,
    })
}

pub fn write_weekly_series<W: Write>(out: W, series: &[WeeklySeries]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["site_id", "week", "value", "scale"])?;
    for s in series {
        for (week, v) in &s.values {
            w.write_record([
                s.site_id.as_str(),
                &week.to_string(),
                &v.to_string(),
                s.scale.as_str(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads `weekly_series.csv`. The window is not stored in the file, so the
/// caller supplies it.
pub fn read_weekly_series<R: Read>(input: R, window: Window) -> Result<Vec<WeeklySeries>, PreprocessError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut out: BTreeMap<String, WeeklySeries> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| PreprocessError::Format(format!("row {}: invalid {what}", i + 1));
        let site = rec.get(0).ok_or_else(|| bad("site_id"))?;
        let week: u32 = rec
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("week"))?;
        let value: f64 = rec
            .get(2)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("value"))?;
        let scale = rec.get(3).and_then(Scale::parse).ok_or_else(|| bad("scale"))?;
        if !window.contains(week) || !value.is_finite() {
            return Err(bad("week or value"));
        }
        out.entry(site.to_string())
            .or_insert_with(|| WeeklySeries::new(site, window, BTreeMap::new(), scale))
            .values
            .insert(week, value);
    }
    Ok(out.into_values().collect())
}
