//! Config-driven end-to-end run: ingest, preprocess, fit, scores, associate,
//! export. Every artifact lands under `output_dir`; `run_log.json` echoes
//! the effective configuration and contains no timestamps, so two runs with
//! the same inputs produce byte-identical output trees.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::association::{
    extrema_groups, max_vs_fpc1, percentile_ranks, site_covariate_correlation, write_associations_csv,
    AssociationResult, ExtremaGroups,
};
use crate::export::{covariate_plot, export_geojson, fpc_plot, group_plot, mean_plot, BinnedSite};
use crate::fpca::{self, reconstruct_curve, score_table, write_scores_csv, FpcaConfig, FpcaFit, ScoreVector};
use crate::preprocess::{
    cumulative_precip, preprocess, restrict_to_window, weekly_flow, write_weekly_series, DailyIndex,
    PreprocessConfig, PreprocessError, Preprocessed, WeeklySeries,
};
use crate::store::{CovariateKind, InputPaths, LongitudinalStore, Province};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Preprocess,
    Fit,
    Scores,
    Associate,
    Export,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Ingest => "ingest",
            Stage::Preprocess => "preprocess",
            Stage::Fit => "fit",
            Stage::Scores => "scores",
            Stage::Associate => "associate",
            Stage::Export => "export",
        })
    }
}

#[derive(Debug, Error)]
#[error("[{stage}] {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: fmt::Display> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError {
            stage,
            message: e.to_string(),
        })
    }
}

/// Every tunable of a run. Unset keys take the defaults below; a TOML file
/// uses the same flat `key = value` names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub samples: PathBuf,
    pub sites: PathBuf,
    pub precipitation: Option<PathBuf>,
    pub river_flow: Option<PathBuf>,
    pub site_covariate_map: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Restrict to these provinces; all provinces present in the samples
    /// otherwise. Provinces with different windows cannot be mixed.
    pub provinces: Option<Vec<Province>>,
    pub cutoff_year: i32,
    pub detection_limit: f64,
    pub max_gap: u32,
    pub precip_horizon_days: u32,
    pub fve_threshold: f64,
    pub k_override: Option<usize>,
    pub bandwidth_candidates: Option<Vec<f64>>,
    pub mean_bandwidth: Option<f64>,
    pub cov_bandwidth: Option<f64>,
    pub cv_folds: usize,
    pub seed: u64,
    pub alpha: f64,
    pub extrema_q: f64,
    pub n_bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pre = PreprocessConfig::default();
        let fit = FpcaConfig::default();
        Self {
            samples: PathBuf::new(),
            sites: PathBuf::new(),
            precipitation: None,
            river_flow: None,
            site_covariate_map: None,
            output_dir: PathBuf::from("out"),
            provinces: None,
            cutoff_year: pre.cutoff_year,
            detection_limit: pre.detection_limit,
            max_gap: pre.max_gap,
            precip_horizon_days: 5,
            fve_threshold: fit.fve_threshold,
            k_override: None,
            bandwidth_candidates: None,
            mean_bandwidth: None,
            cov_bandwidth: None,
            cv_folds: fit.cv_folds,
            seed: fit.seed,
            alpha: 0.05,
            extrema_q: 0.10,
            n_bins: 10,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, String> {
        toml::from_str(s).map_err(|e| e.to_string())
    }

    pub fn from_toml_file(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        if let Some(base) = path.parent() {
            cfg.resolve_relative_to(base);
        }
        Ok(cfg)
    }

    /// Joins every relative path onto `base`.
    pub fn resolve_relative_to(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.samples);
        fix(&mut self.sites);
        fix(&mut self.output_dir);
        for p in [
            &mut self.precipitation,
            &mut self.river_flow,
            &mut self.site_covariate_map,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.samples.as_os_str().is_empty() {
            return Err("`samples` path is required".into());
        }
        if self.sites.as_os_str().is_empty() {
            return Err("`sites` path is required".into());
        }
        if !(self.fve_threshold > 0.0 && self.fve_threshold <= 1.0) {
            return Err(format!("fve_threshold {} outside (0, 1]", self.fve_threshold));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(format!("alpha {} outside (0, 1)", self.alpha));
        }
        if !(self.extrema_q > 0.0 && self.extrema_q <= 0.5) {
            return Err(format!("extrema_q {} outside (0, 0.5]", self.extrema_q));
        }
        if self.n_bins == 0 || self.n_bins > 10 {
            return Err(format!("n_bins {} outside 1..=10", self.n_bins));
        }
        if self.cv_folds < 2 {
            return Err("cv_folds must be at least 2".into());
        }
        if self.k_override == Some(0) {
            return Err("k_override must be at least 1".into());
        }
        if let Some(c) = &self.bandwidth_candidates {
            if c.is_empty() || c.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
                return Err("bandwidth_candidates must be non-empty and positive".into());
            }
        }
        Ok(())
    }

    pub fn preprocess_config(&self) -> PreprocessConfig {
        PreprocessConfig {
            cutoff_year: self.cutoff_year,
            detection_limit: self.detection_limit,
            max_gap: self.max_gap,
        }
    }

    pub fn fpca_config(&self) -> FpcaConfig {
        FpcaConfig {
            fve_threshold: self.fve_threshold,
            k_override: self.k_override,
            bandwidth_candidates: self.bandwidth_candidates.clone(),
            mean_bandwidth: self.mean_bandwidth,
            cov_bandwidth: self.cov_bandwidth,
            cv_folds: self.cv_folds,
            seed: self.seed,
        }
    }
}

/// What a run produced, in memory.
#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub last_stage: Option<Stage>,
    pub n_samples: usize,
    pub n_sites: usize,
    pub preprocessed: Option<Preprocessed>,
    pub fit: Option<FpcaFit>,
    pub scores: Vec<ScoreVector>,
    pub associations: Vec<AssociationResult>,
    pub groups: Option<ExtremaGroups>,
    /// Output files relative to `output_dir`, in write order.
    pub written: Vec<PathBuf>,
    pub notes: Vec<String>,
}

struct Outputs<'a> {
    root: &'a Path,
    written: Vec<PathBuf>,
}

impl Outputs<'_> {
    fn write(&mut self, rel: &str, bytes: &[u8], stage: Stage) -> Result<(), PipelineError> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).at(stage)?;
        }
        fs::write(&path, bytes).map_err(|e| PipelineError {
            stage,
            message: format!("{}: {e}", path.display()),
        })?;
        self.written.push(PathBuf::from(rel));
        Ok(())
    }
}

pub fn run_pipeline(config: &RunConfig) -> Result<RunSummary, PipelineError> {
    run_through(config, Stage::Export)
}

/// Runs every stage up to and including `last`, then writes `run_log.json`.
pub fn run_through(config: &RunConfig, last: Stage) -> Result<RunSummary, PipelineError> {
    config.validate().at(Stage::Ingest)?;
    fs::create_dir_all(&config.output_dir).at(Stage::Ingest)?;
    let mut out = Outputs {
        root: &config.output_dir,
        written: Vec::new(),
    };
    let mut summary = RunSummary::default();

    let store = LongitudinalStore::load(&InputPaths {
        samples: &config.samples,
        sites: &config.sites,
        precipitation: config.precipitation.as_deref(),
        river_flow: config.river_flow.as_deref(),
        site_covariate_map: config.site_covariate_map.as_deref(),
    })
    .at(Stage::Ingest)?;
    summary.n_samples = store.samples.len();
    summary.n_sites = store.sites.len();
    summary.last_stage = Some(Stage::Ingest);

    if last >= Stage::Preprocess {
        let pre = preprocess(
            &store.samples,
            &store.sites,
            config.provinces.as_deref(),
            &config.preprocess_config(),
        )
        .at(Stage::Preprocess)?;
        let mut buf = Vec::new();
        write_weekly_series(&mut buf, &pre.series).at(Stage::Preprocess)?;
        out.write("weekly_series.csv", &buf, Stage::Preprocess)?;
        let mut buf = Vec::new();
        pre.report.write_csv(&mut buf).at(Stage::Preprocess)?;
        out.write("exclusion_report.csv", &buf, Stage::Preprocess)?;
        summary.preprocessed = Some(pre);
        summary.last_stage = Some(Stage::Preprocess);
    }

    if last >= Stage::Fit {
        let pre = summary.preprocessed.as_ref().expect("preprocess ran");
        let fitted = fpca::fit(&pre.series, pre.window, &config.fpca_config()).at(Stage::Fit)?;
        out.write("model.json", fitted.model.to_json().as_bytes(), Stage::Fit)?;
        summary.fit = Some(fitted);
        summary.last_stage = Some(Stage::Fit);
    }

    if last >= Stage::Scores {
        let fitted = summary.fit.as_ref().expect("fit ran");
        let truncated: Vec<(String, Vec<f64>)> = fitted
            .scores
            .iter()
            .map(|(id, b)| (id.clone(), b[..fitted.model.k].to_vec()))
            .collect();
        summary.scores = score_table(&truncated, config.n_bins).at(Stage::Scores)?;
        let mut buf = Vec::new();
        write_scores_csv(&mut buf, &summary.scores).at(Stage::Scores)?;
        out.write("scores.csv", &buf, Stage::Scores)?;
        summary.last_stage = Some(Stage::Scores);
    }

    let mut covariates = CovariateCurves::default();
    if last >= Stage::Associate {
        covariates = associate(config, &store, &mut summary, &mut out)?;
        summary.last_stage = Some(Stage::Associate);
    }

    if last >= Stage::Export {
        export(&store, &covariates, &mut summary, &mut out)?;
        summary.last_stage = Some(Stage::Export);
    }

    let log = run_log(config, &summary, &out.written);
    out.write("run_log.json", log.as_bytes(), last)?;
    summary.written = out.written;
    Ok(summary)
}

/// Weekly covariate curves used by the association stage, kept for plots.
#[derive(Debug, Default)]
struct CovariateCurves {
    /// Per site, precipitation curve on the model grid.
    precipitation: BTreeMap<String, Vec<f64>>,
    /// Per river location, weekly mean flow inside the window.
    river_flow: BTreeMap<String, WeeklySeries>,
}

fn site_curve(fitted: &FpcaFit, beta: &[f64]) -> BTreeMap<u32, f64> {
    let curve = reconstruct_curve(&fitted.model, beta);
    fitted.model.window.weeks().zip(curve).collect()
}

fn associate(
    config: &RunConfig,
    store: &LongitudinalStore,
    summary: &mut RunSummary,
    out: &mut Outputs<'_>,
) -> Result<CovariateCurves, PipelineError> {
    let stage = Stage::Associate;
    let pre = summary.preprocessed.as_ref().expect("preprocess ran");
    let fitted = summary.fit.as_ref().expect("fit ran");
    let model = &fitted.model;
    let mut rows = Vec::new();
    let mut notes = Vec::new();

    match max_vs_fpc1(&pre.series, &summary.scores, config.alpha) {
        Ok(m) => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for e in &m.extremes {
                w.serialize(e).at(stage)?;
            }
            if m.extremes.is_empty() {
                w.write_record(["site_id", "max", "week_of_max", "fpc1_percentile", "group"])
                    .at(stage)?;
            }
            out.write("site_maxima.csv", &w.into_inner().at(stage)?, stage)?;
            rows.push(m.result);
        }
        Err(e) => notes.push(format!("maximum vs FPC1 skipped: {e}")),
    }

    let groups = if model.k >= 2 {
        let ids: Vec<&str> = summary.scores.iter().map(|s| s.site_id.as_str()).collect();
        let f1: Vec<f64> = summary.scores.iter().map(|s| s.beta[0]).collect();
        let f2: Vec<f64> = summary.scores.iter().map(|s| s.beta[1]).collect();
        Some(extrema_groups(&ids, &f1, &f2, config.extrema_q))
    } else {
        notes.push(format!("extrema groups need K >= 2, model has K = {}", model.k));
        None
    };
    let empty = ExtremaGroups {
        group_high: Default::default(),
        group_low: Default::default(),
        q: config.extrema_q,
    };
    let mut buf = Vec::new();
    groups.as_ref().unwrap_or(&empty).write_csv(&mut buf).at(stage)?;
    out.write("extrema_groups.csv", &buf, stage)?;

    let curves: BTreeMap<&str, BTreeMap<u32, f64>> = fitted
        .scores
        .iter()
        .map(|(id, b)| (id.as_str(), site_curve(fitted, &b[..model.k])))
        .collect();

    let mut cov = CovariateCurves::default();
    if !store.precipitation.is_empty() {
        let index = DailyIndex::new(&store.precipitation);
        let mut precip_series = Vec::new();
        let mut unmapped = 0usize;
        let mut missing_days = 0usize;
        for s in &pre.series {
            let samples = &pre.retained_samples[&s.site_id];
            match cumulative_precip(
                &s.site_id,
                samples,
                &store.covariate_map,
                &index,
                config.precip_horizon_days,
            ) {
                Ok(c) => {
                    missing_days += c.missing_days;
                    let w = restrict_to_window(&c.series, pre.window);
                    if !w.values.is_empty() {
                        precip_series.push(w);
                    }
                }
                Err(PreprocessError::UnmappedSite(_)) => unmapped += 1,
                Err(e) => return Err(e).at(stage),
            }
        }
        if unmapped > 0 {
            notes.push(format!(
                "{unmapped} sites have no precipitation station and were skipped"
            ));
        }
        if missing_days > 0 {
            notes.push(format!(
                "{missing_days} station-days inside precipitation horizons had no record and counted as 0"
            ));
        }
        let precip_fit = if precip_series.len() >= 3 {
            let mut cfg = config.fpca_config();
            cfg.k_override = None;
            match fpca::fit(&precip_series, pre.window, &cfg) {
                Ok(f) => Some(f),
                Err(e) => {
                    notes.push(format!("precipitation FPCA failed ({e}); using weekly means"));
                    None
                }
            }
        } else {
            notes.push(format!(
                "{} precipitation series; fewer than 3, using weekly means",
                precip_series.len()
            ));
            None
        };
        let mut precip_rows = Vec::new();
        for s in &precip_series {
            let curve: BTreeMap<u32, f64> = match &precip_fit {
                Some(f) => {
                    let beta = &f
                        .scores
                        .iter()
                        .find(|(id, _)| *id == s.site_id)
                        .expect("scored")
                        .1;
                    let c = site_curve(f, &beta[..f.model.k]);
                    cov.precipitation
                        .insert(s.site_id.clone(), c.values().copied().collect());
                    c
                }
                None => s.values.clone(),
            };
            let subject = format!("{}/{}", s.site_id, CovariateKind::Precipitation.as_str());
            match site_covariate_correlation(&subject, &curves[s.site_id.as_str()], &curve, config.alpha) {
                Ok(r) => precip_rows.push(r),
                Err(e) => notes.push(format!("{subject} skipped: {e}")),
            }
        }
        rows.extend(precip_rows);
    }

    if !store.river_flow.is_empty() {
        let flows: BTreeMap<String, WeeklySeries> = weekly_flow(&store.river_flow)
            .into_iter()
            .map(|(loc, s)| (loc, restrict_to_window(&s, pre.window)))
            .collect();
        for s in &pre.series {
            let Some(loc) = store.covariate_map.location(&s.site_id, CovariateKind::RiverFlow) else {
                continue;
            };
            let Some(flow) = flows.get(loc) else {
                notes.push(format!("{}: river location {loc} has no flow records", s.site_id));
                continue;
            };
            let subject = format!("{}/{}", s.site_id, CovariateKind::RiverFlow.as_str());
            match site_covariate_correlation(
                &subject,
                &curves[s.site_id.as_str()],
                &flow.values,
                config.alpha,
            ) {
                Ok(r) => {
                    rows.push(r);
                    cov.river_flow
                        .entry(loc.to_string())
                        .or_insert_with(|| flow.clone());
                }
                Err(e) => notes.push(format!("{subject} skipped: {e}")),
            }
        }
    }

    let mut buf = Vec::new();
    write_associations_csv(&mut buf, &rows).at(stage)?;
    out.write("associations.csv", &buf, stage)?;
    summary.associations = rows;
    summary.groups = groups;
    summary.notes.extend(notes);
    Ok(cov)
}

/// Significant positive precipitation correlations, binned by p-value.
fn precipitation_bins(rows: &[AssociationResult]) -> Vec<BinnedSite> {
    let suffix = format!("/{}", CovariateKind::Precipitation.as_str());
    let tested: Vec<&AssociationResult> = rows.iter().filter(|r| r.subject.ends_with(&suffix)).collect();
    let rhos: Vec<f64> = tested.iter().map(|r| r.value).collect();
    let pct = percentile_ranks(&rhos);
    tested
        .iter()
        .zip(pct)
        .filter_map(|(r, p)| {
            r.p_bin.map(|bin| BinnedSite {
                site_id: r.subject.trim_end_matches(&suffix).to_string(),
                bin,
                score: r.value,
                percentile: p,
            })
        })
        .collect()
}

fn export(
    store: &LongitudinalStore,
    cov: &CovariateCurves,
    summary: &mut RunSummary,
    out: &mut Outputs<'_>,
) -> Result<(), PipelineError> {
    let stage = Stage::Export;
    let fitted = summary.fit.as_ref().expect("fit ran");
    let model = &fitted.model;

    let text = export_geojson(&store.sites, &BinnedSite::from_scores(&summary.scores, 0)).at(stage)?;
    out.write("bins.geojson", text.as_bytes(), stage)?;
    if model.k >= 2 {
        let text = export_geojson(&store.sites, &BinnedSite::from_scores(&summary.scores, 1)).at(stage)?;
        out.write("bins_fpc2.geojson", text.as_bytes(), stage)?;
    }
    if !store.precipitation.is_empty() {
        let text = export_geojson(&store.sites, &precipitation_bins(&summary.associations)).at(stage)?;
        out.write("precipitation_pbins.geojson", text.as_bytes(), stage)?;
    }

    out.write("plots/mean.svg", mean_plot(model).render().as_bytes(), stage)?;
    out.write("plots/fpcs.svg", fpc_plot(model).render().as_bytes(), stage)?;

    let beta_of: BTreeMap<&str, &[f64]> = fitted
        .scores
        .iter()
        .map(|(id, b)| (id.as_str(), &b[..model.k]))
        .collect();
    let mut notes = Vec::new();
    if let Some(groups) = &summary.groups {
        for (name, members, color) in [
            ("high", &groups.group_high, "#b2182b"),
            ("low", &groups.group_low, "#2166ac"),
        ] {
            if members.is_empty() {
                notes.push(format!("plots/group_{name}.svg omitted: group is empty"));
                continue;
            }
            let curves: Vec<Vec<f64>> = members
                .iter()
                .map(|id| reconstruct_curve(model, beta_of[id.as_str()]))
                .collect();
            let title = format!(
                "Group {name}: top FPC1, {} FPC2 ({} sites)",
                if name == "high" { "top" } else { "bottom" },
                members.len()
            );
            let plot = group_plot(&title, "log10 level", &model.grid, &curves, color);
            out.write(
                &format!("plots/group_{name}.svg"),
                plot.render().as_bytes(),
                stage,
            )?;

            let precip: Vec<Vec<f64>> = members
                .iter()
                .filter_map(|id| cov.precipitation.get(id).cloned())
                .collect();
            if !precip.is_empty() {
                let plot = group_plot(
                    &format!("Group {name}: cumulative precipitation"),
                    "precipitation (mm)",
                    &model.grid,
                    &precip,
                    color,
                );
                out.write(
                    &format!("plots/group_{name}_precipitation.svg"),
                    plot.render().as_bytes(),
                    stage,
                )?;
            }
        }
    }
    for (loc, flow) in &cov.river_flow {
        let pts = flow.values.iter().map(|(w, v)| (*w as f64, *v)).collect();
        let plot = covariate_plot(&format!("Weekly mean flow at {loc}"), "flow", pts);
        let name: String = loc
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        out.write(&format!("plots/flow_{name}.svg"), plot.render().as_bytes(), stage)?;
    }
    summary.notes.extend(notes);
    Ok(())
}

fn run_log(config: &RunConfig, summary: &RunSummary, written: &[PathBuf]) -> String {
    let pre = summary.preprocessed.as_ref();
    let counts: BTreeMap<&str, usize> = pre
        .map(|p| {
            p.report
                .counts()
                .into_iter()
                .map(|(d, n)| (d.as_str(), n))
                .collect()
        })
        .unwrap_or_default();
    let model = summary.fit.as_ref().map(|f| &f.model);
    let doc = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "last_stage": summary.last_stage,
        "config": config,
        "conventions": {
            "week": "min(ceil(day_of_year / 7), 52)",
            "weekly_value": "log10 of the mean count per week, pooled across years",
            "detection": "site excluded when every post-cutoff count is below detection_limit",
            "gap": "series dropped when max_gap or more consecutive window weeks are empty",
            "precipitation": "sum of the precip_horizon_days days before each sample, missing days count as 0",
            "quadrature": "trapezoid weights on the window rescaled to unit length",
        },
        "input": { "samples": summary.n_samples, "sites": summary.n_sites },
        "dispositions": counts,
        "window": pre.map(|p| json!({ "first": p.window.first, "last": p.window.last })),
        "model": model.map(|m| json!({
            "n_sites": m.n_sites,
            "k": m.k,
            "fve": m.fve.get(m.k.saturating_sub(1)),
            "lambda": &m.lambda[..m.k],
            "sigma2": m.sigma2,
            "bandwidths": m.bandwidths,
        })),
        "associations": {
            "rows": summary.associations.len(),
            "significant_positive": summary.associations.iter().filter(|r| r.significant_positive).count(),
        },
        "groups": summary.groups.as_ref().map(|g| json!({
            "q": g.q,
            "high": g.group_high.len(),
            "low": g.group_low.len(),
        })),
        "notes": summary.notes,
        "outputs": written,
    });
    let mut s = serde_json::to_string_pretty(&doc).expect("json serializes");
    s.push('\n');
    s
}
