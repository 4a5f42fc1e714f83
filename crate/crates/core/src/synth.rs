//! Synthetic sparse longitudinal data drawn from a known Karhunen–Loève
//! model, and metrics comparing a fitted model with the generating truth.
//!
//! Generator: site `i` draws from `ChaCha8Rng::seed_from_u64(seed)` on
//! stream `i` (see [`GENERATOR_ID`]); the draw order per site is the `K`
//! standard-normal scores, then observation masks until one passes the gap
//! rule, then one standard-normal error per observed week. Output is
//! therefore identical for a given seed regardless of thread scheduling.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::pearson;
use crate::fpca::{grid_of, inner_product, quadrature_weights, select_k_fve, FpcaModel};
use crate::preprocess::{Scale, WeeklySeries, Window};
use crate::store::{
    write_covariates, write_samples, write_site_covariate_map, write_sites, CovariateKind, CovariateRecord,
    Province, SampleRecord, SiteCovariateMap, SiteInfo, SiteRegistry, StoreError,
};

pub const GENERATOR_ID: &str = "chacha8/seed_from_u64/stream=site_index/v1";

const MAX_MASK_ATTEMPTS: usize = 100_000;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid simulation parameters: {0}")]
    InvalidParams(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Generating model on a window: mean, eigenfunctions (orthonormal under
/// the window's quadrature weights), nonincreasing variances and noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlParams {
    pub window: Window,
    pub mu: Vec<f64>,
    pub phi: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub sigma2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlTruth {
    pub generator: String,
    pub seed: u64,
    pub window: Window,
    pub grid: Vec<f64>,
    pub quad_weights: Vec<f64>,
    pub mu_true: Vec<f64>,
    pub phi_true: Vec<Vec<f64>>,
    pub lambda_true: Vec<f64>,
    pub sigma2_true: f64,
    pub site_ids: Vec<String>,
    /// Row per site, aligned with `site_ids`.
    pub beta_true: Vec<Vec<f64>>,
}

impl KlTruth {
    /// The truth expressed as a fitted model with every component kept.
    pub fn as_model(&self) -> FpcaModel {
        let (_, fve) = select_k_fve(&self.lambda_true, 1.0, self.lambda_true.len());
        FpcaModel {
            window: self.window,
            grid: self.grid.clone(),
            mu: self.mu_true.clone(),
            lambda: self.lambda_true.clone(),
            phi: self.phi_true.clone(),
            sigma2: self.sigma2_true,
            quad_weights: self.quad_weights.clone(),
            fve,
            k: self.lambda_true.len(),
            n_sites: self.site_ids.len(),
            bandwidths: None,
        }
    }
}

/// Gram–Schmidt under the window's quadrature weights.
pub fn orthonormalize(window: Window, raw: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let w = quadrature_weights(window.len());
    let mut out: Vec<Vec<f64>> = Vec::new();
    for f in raw {
        let mut r = f.clone();
        for q in &out {
            let c = inner_product(&w, &r, q);
            r.iter_mut().zip(q).for_each(|(x, q)| *x -= c * q);
        }
        let n = inner_product(&w, &r, &r).sqrt();
        out.push(r.into_iter().map(|x| x / n).collect());
    }
    out
}

/// Yearly sinusoid shared by the standard scenario.
pub fn seasonal(week: f64) -> f64 {
    (2.0 * PI * week / 52.0).sin()
}

/// The reference recovery scenario: a 52-week grid with
/// `mu(t) = 2 + sin(2πt/52)`, `φ1 ∝ 1`, `φ2 ∝ sin(2πt/52)`,
/// `λ = (1, 0.25)` and `σ² = 0.04`.
pub fn standard_params() -> KlParams {
    let window = Window::FULL_YEAR;
    let grid = grid_of(window);
    let phi = orthonormalize(
        window,
        &[
            grid.iter().map(|_| 1.0).collect(),
            grid.iter().map(|t| seasonal(*t)).collect(),
        ],
    );
    KlParams {
        window,
        mu: grid.iter().map(|t| 2.0 + seasonal(*t)).collect(),
        phi,
        lambda: vec![1.0, 0.25],
        sigma2: 0.04,
    }
}

fn validate(params: &KlParams, observe_prob: f64, max_gap: u32) -> Result<(), SynthError> {
    let m = params.window.len();
    let bad = |s: String| Err(SynthError::InvalidParams(s));
    if !(observe_prob > 0.0 && observe_prob <= 1.0) {
        return bad(format!("observe_prob {observe_prob} not in (0, 1]"));
    }
    if max_gap == 0 {
        return bad("max_gap must be positive".into());
    }
    if params.mu.len() != m {
        return bad(format!("mu has {} points, window has {m}", params.mu.len()));
    }
    if params.phi.len() != params.lambda.len() || params.phi.iter().any(|p| p.len() != m) {
        return bad("phi/lambda dimensions disagree with the window".into());
    }
    if params.lambda.iter().any(|l| !(*l >= 0.0)) || params.lambda.windows(2).any(|w| w[1] > w[0]) {
        return bad("lambda must be nonnegative and nonincreasing".into());
    }
    if !(params.sigma2 >= 0.0) {
        return bad("sigma2 must be nonnegative".into());
    }
    let w = quadrature_weights(m);
    for (i, a) in params.phi.iter().enumerate() {
        for (j, b) in params.phi.iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            if (inner_product(&w, a, b) - target).abs() > 1e-6 {
                return bad(format!("phi_{} and phi_{} are not orthonormal", i + 1, j + 1));
            }
        }
    }
    Ok(())
}

fn longest_gap(mask: &[bool]) -> u32 {
    let mut longest = 0;
    let mut run = 0;
    for &seen in mask {
        run = if seen { 0 } else { run + 1 };
        longest = longest.max(run);
    }
    longest
}

pub fn site_id(i: usize) -> String {
    format!("SIM{:05}", i + 1)
}

/// Draws `n_sites` sparse series. Masks with `max_gap` or more consecutive
/// missing weeks are redrawn whole.
pub fn simulate_kl(
    params: &KlParams,
    n_sites: usize,
    observe_prob: f64,
    max_gap: u32,
    seed: u64,
) -> Result<(Vec<WeeklySeries>, KlTruth), SynthError> {
    validate(params, observe_prob, max_gap)?;
    let window = params.window;
    let m = window.len();
    let k = params.lambda.len();
    let sites: Vec<(WeeklySeries, Vec<f64>)> = (0..n_sites)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let beta: Vec<f64> = params
                .lambda
                .iter()
                .map(|l| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * l.sqrt()
                })
                .collect();
            let mut mask = vec![false; m];
            let mut accepted = false;
            for _ in 0..MAX_MASK_ATTEMPTS {
                mask.iter_mut()
                    .for_each(|b| *b = rng.random::<f64>() < observe_prob);
                if longest_gap(&mask) < max_gap && mask.iter().any(|b| *b) {
                    accepted = true;
                    break;
                }
            }
            if !accepted {
                return Err(SynthError::InvalidParams(format!(
                    "no admissible mask in {MAX_MASK_ATTEMPTS} draws; raise observe_prob"
                )));
            }
            let sd = params.sigma2.sqrt();
            let mut values = BTreeMap::new();
            for (j, week) in window.weeks().enumerate() {
                if !mask[j] {
                    continue;
                }
                let signal: f64 = params.mu[j]
                    + beta
                        .iter()
                        .zip(&params.phi)
                        .map(|(b, phi)| b * phi[j])
                        .sum::<f64>();
                let e: f64 = StandardNormal.sample(&mut rng);
                values.insert(week, signal + sd * e);
            }
            Ok((
                WeeklySeries::new(site_id(i), window, values, Scale::Log10Count),
                beta,
            ))
        })
        .collect::<Result<_, _>>()?;
    let (series, beta_true): (Vec<_>, Vec<_>) = sites.into_iter().unzip();
    debug_assert!(beta_true.iter().all(|b: &Vec<f64>| b.len() == k));
    let truth = KlTruth {
        generator: GENERATOR_ID.to_string(),
        seed,
        window,
        grid: grid_of(window),
        quad_weights: quadrature_weights(m),
        mu_true: params.mu.clone(),
        phi_true: params.phi.clone(),
        lambda_true: params.lambda.clone(),
        sigma2_true: params.sigma2,
        site_ids: series.iter().map(|s| s.site_id.clone()).collect(),
        beta_true,
    };
    Ok((series, truth))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRecovery {
    pub k: usize,
    /// `|<φ̂_k, φ_k>_w|`.
    pub alignment: f64,
    /// Sign that aligns the fitted component with the true one.
    pub sign: f64,
    /// Pearson correlation of sign-aligned fitted and true scores.
    pub score_correlation: f64,
    pub lambda_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub components: Vec<ComponentRecovery>,
    pub sigma2_rel_error: f64,
    pub mu_max_error: f64,
    pub k_model: usize,
    pub k_truth: usize,
    pub k_mismatch: bool,
}

fn rel_error(est: f64, truth: f64) -> f64 {
    if truth != 0.0 {
        (est - truth).abs() / truth.abs()
    } else {
        (est - truth).abs()
    }
}

/// Compares a fitted model and its scores (keyed by site id) with the truth
/// over the first `min(K_model, K_truth)` components.
pub fn recovery_report(
    model: &FpcaModel,
    scores: &[(String, Vec<f64>)],
    truth: &KlTruth,
) -> Result<RecoveryReport, SynthError> {
    if model.window != truth.window || model.mu.len() != truth.mu_true.len() {
        return Err(SynthError::DimensionMismatch(format!(
            "model window {:?} vs truth window {:?}",
            model.window, truth.window
        )));
    }
    let by_site: BTreeMap<&str, &Vec<f64>> = scores.iter().map(|(s, b)| (s.as_str(), b)).collect();
    let k_truth = truth.lambda_true.len();
    let k = model.k.min(k_truth);
    let mut components = Vec::with_capacity(k);
    for c in 0..k {
        let ip = inner_product(&truth.quad_weights, &model.phi[c], &truth.phi_true[c]);
        let sign = if ip < 0.0 { -1.0 } else { 1.0 };
        let mut fitted = Vec::with_capacity(truth.site_ids.len());
        let mut actual = Vec::with_capacity(truth.site_ids.len());
        for (id, beta) in truth.site_ids.iter().zip(&truth.beta_true) {
            let est = by_site.get(id.as_str()).and_then(|b| b.get(c)).ok_or_else(|| {
                SynthError::DimensionMismatch(format!("no component {} score for {id}", c + 1))
            })?;
            fitted.push(sign * est);
            actual.push(beta[c]);
        }
        components.push(ComponentRecovery {
            k: c + 1,
            alignment: ip.abs(),
            sign,
            score_correlation: pearson(&fitted, &actual).unwrap_or(f64::NAN),
            lambda_rel_error: rel_error(model.lambda[c], truth.lambda_true[c]),
        });
    }
    let mu_max_error = model
        .mu
        .iter()
        .zip(&truth.mu_true)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(RecoveryReport {
        components,
        sigma2_rel_error: rel_error(model.sigma2, truth.sigma2_true),
        mu_max_error,
        k_model: model.k,
        k_truth,
        k_mismatch: model.k != k_truth,
    })
}

/// First year of synthetic sampling; later years cycle over a decade.
pub const SYNTH_FIRST_YEAR: i32 = 2000;

/// Turns log10 weekly values into raw samples: one sample per observed week,
/// dated on the 4th day of that week, count `10^value`.
pub fn to_samples(series: &[WeeklySeries]) -> Vec<SampleRecord> {
    let mut out = Vec::new();
    for (i, s) in series.iter().enumerate() {
        for (week, v) in &s.values {
            let year = SYNTH_FIRST_YEAR + ((i + *week as usize) % 10) as i32;
            let doy = 7 * (week - 1) + 4;
            out.push(SampleRecord {
                site_id: s.site_id.clone(),
                date: NaiveDate::from_yo_opt(year, doy).expect("valid ordinal"),
                fc_count: 10f64.powf(*v),
                salinity: None,
                temperature: None,
            });
        }
    }
    out
}

/// Site coordinates scattered over a province-sized box.
pub fn synthetic_sites(ids: &[String], province: Province, seed: u64) -> SiteRegistry {
    let (lat, lon) = match province {
        Province::BC => ((48.3, 54.5), (-131.0, -123.0)),
        Province::QC => ((47.0, 50.5), (-70.0, -61.0)),
        Province::NB => ((45.0, 48.0), (-67.0, -64.0)),
        Province::PE => ((45.9, 47.1), (-64.4, -62.0)),
        Province::NS => ((43.4, 47.0), (-66.3, -59.8)),
        Province::NL => ((46.6, 55.0), (-59.4, -52.6)),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut reg = SiteRegistry::new();
    for id in ids {
        let info = SiteInfo {
            latitude: (rng.random_range(lat.0..lat.1) * 1e4_f64).round() / 1e4,
            longitude: (rng.random_range(lon.0..lon.1) * 1e4_f64).round() / 1e4,
            province,
        };
        reg.insert(id, info).expect("unique generated ids");
    }
    reg
}

/// Daily covariate streams and a site/location map for synthetic sites.
#[derive(Debug, Clone, Default)]
pub struct SyntheticCovariates {
    pub precipitation: Vec<CovariateRecord>,
    pub river_flow: Vec<CovariateRecord>,
    pub map: SiteCovariateMap,
}

/// Five rain gauges with a wet-winter climate and one snowmelt-fed river,
/// daily over the decade the samples span.
pub fn synthetic_covariates(ids: &[String], seed: u64) -> SyntheticCovariates {
    const STATIONS: usize = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - 1);
    let mut out = SyntheticCovariates::default();
    let start = NaiveDate::from_ymd_opt(SYNTH_FIRST_YEAR, 1, 1).unwrap();
    let end = NaiveDate::from_ymd_opt(SYNTH_FIRST_YEAR + 10, 1, 1).unwrap();
    for station in 0..STATIONS {
        let loc = format!("P{:02}", station + 1);
        let wetness = 1.0 + 0.2 * station as f64;
        for date in start.iter_days().take_while(|d| *d < end) {
            let doy = date.ordinal() as f64;
            let mean = wetness * (4.0 + 3.0 * (2.0 * PI * (doy - 15.0) / 365.0).cos());
            let v: f64 = Exp::new(1.0 / mean).unwrap().sample(&mut rng);
            out.precipitation.push(CovariateRecord {
                location_id: loc.clone(),
                date,
                value: (v * 10.0).round() / 10.0,
                kind: CovariateKind::Precipitation,
            });
        }
    }
    for date in start.iter_days().take_while(|d| *d < end) {
        let doy = date.ordinal() as f64;
        let base = 800.0 + 2400.0 * (-((doy - 170.0) / 40.0).powi(2)).exp();
        let noise: f64 = StandardNormal.sample(&mut rng);
        out.river_flow.push(CovariateRecord {
            location_id: "R01".into(),
            date,
            value: (base * (1.0 + 0.05 * noise)).max(0.0).round(),
            kind: CovariateKind::RiverFlow,
        });
    }
    for (i, id) in ids.iter().enumerate() {
        out.map.link(
            id,
            CovariateKind::Precipitation,
            &format!("P{:02}", i % STATIONS + 1),
        );
        out.map.link(id, CovariateKind::RiverFlow, "R01");
    }
    out
}

/// File names written by [`write_dataset`], relative to its directory.
pub const DATASET_FILES: [&str; 7] = [
    "samples.csv",
    "sites.csv",
    "precipitation.csv",
    "river_flow.csv",
    "site_covariate_map.csv",
    "truth.json",
    "run.toml",
];

/// Simulates the standard scenario on BC sites and writes every pipeline
/// input plus `truth.json` and a `run.toml` whose output directory is
/// `<dir>/out`. Returns the truth.
pub fn write_dataset(
    dir: &Path,
    n_sites: usize,
    observe_prob: f64,
    max_gap: u32,
    seed: u64,
) -> Result<KlTruth, DatasetError> {
    let (series, truth) = simulate_kl(&standard_params(), n_sites, observe_prob, max_gap, seed)?;
    let sites = synthetic_sites(&truth.site_ids, Province::BC, seed);
    let cov = synthetic_covariates(&truth.site_ids, seed);
    fs::create_dir_all(dir).map_err(|e| DatasetError::Io(dir.display().to_string(), e))?;
    let create = |name: &str| {
        let path = dir.join(name);
        File::create(&path)
            .map(BufWriter::new)
            .map_err(|e| DatasetError::Io(path.display().to_string(), e))
    };
    write_samples(create("samples.csv")?, &to_samples(&series))?;
    write_sites(create("sites.csv")?, &sites)?;
    write_covariates(create("precipitation.csv")?, &cov.precipitation)?;
    write_covariates(create("river_flow.csv")?, &cov.river_flow)?;
    write_site_covariate_map(create("site_covariate_map.csv")?, &cov.map)?;
    let mut truth_json = serde_json::to_string_pretty(&truth).expect("json serializes");
    truth_json.push('\n');
    create("truth.json")?
        .write_all(truth_json.as_bytes())
        .map_err(|e| DatasetError::Io("truth.json".into(), e))?;
    let config = format!(
        "samples = \"samples.csv\"\nsites = \"sites.csv\"\nprecipitation = \"precipitation.csv\"\n\
         river_flow = \"river_flow.csv\"\nsite_covariate_map = \"site_covariate_map.csv\"\n\
         output_dir = \"out\"\nseed = {seed}\n"
    );
    create("run.toml")?
        .write_all(config.as_bytes())
        .map_err(|e| DatasetError::Io("run.toml".into(), e))?;
    Ok(truth)
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_params_are_orthonormal() {
        let p = standard_params();
        validate(&p, 0.6, 4).unwrap();
        assert_eq!(p.mu.len(), 52);
    }

    #[test]
    fn zero_scores_and_noise_reproduce_mean() {
        let mut p = standard_params();
        p.lambda = vec![0.0, 0.0];
        p.sigma2 = 0.0;
        let (series, truth) = simulate_kl(&p, 20, 0.5, 4, 9).unwrap();
        for s in &series {
            for (w, v) in &s.values {
                assert_eq!(*v, p.mu[(*w - 1) as usize]);
            }
        }
        assert!(truth.beta_true.iter().flatten().all(|b| *b == 0.0));
    }

    #[test]
    fn masks_respect_gap_rule() {
        let (series, _) = simulate_kl(&standard_params(), 200, 0.3, 4, 5).unwrap();
        assert!(series.iter().all(|s| s.longest_gap() < 4));
    }

    #[test]
    fn same_seed_same_data() {
        let a = simulate_kl(&standard_params(), 30, 0.6, 4, 77).unwrap();
        let b = simulate_kl(&standard_params(), 30, 0.6, 4, 77).unwrap();
        assert_eq!(a, b);
        let c = simulate_kl(&standard_params(), 30, 0.6, 4, 78).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn invalid_params_rejected() {
        let p = standard_params();
        assert!(matches!(
            simulate_kl(&p, 5, 0.0, 4, 1),
            Err(SynthError::InvalidParams(_))
        ));
        assert!(matches!(
            simulate_kl(&p, 5, 1.5, 4, 1),
            Err(SynthError::InvalidParams(_))
        ));
        let mut q = p.clone();
        q.phi[1] = q.phi[0].clone();
        assert!(matches!(
            simulate_kl(&q, 5, 0.6, 4, 1),
            Err(SynthError::InvalidParams(_))
        ));
        let mut r = p;
        r.lambda = vec![0.25, 1.0];
        assert!(matches!(
            simulate_kl(&r, 5, 0.6, 4, 1),
            Err(SynthError::InvalidParams(_))
        ));
    }

    #[test]
    fn injected_truth_recovers_perfectly() {
        let (_, truth) = simulate_kl(&standard_params(), 50, 0.6, 4, 3).unwrap();
        let scores: Vec<(String, Vec<f64>)> = truth
            .site_ids
            .iter()
            .cloned()
            .zip(truth.beta_true.iter().cloned())
            .collect();
        let report = recovery_report(&truth.as_model(), &scores, &truth).unwrap();
        assert!(!report.k_mismatch);
        for c in &report.components {
            assert!((c.alignment - 1.0).abs() < 1e-12);
            assert!((c.score_correlation - 1.0).abs() < 1e-12);
            assert_eq!(c.lambda_rel_error, 0.0);
        }
        assert_eq!(report.sigma2_rel_error, 0.0);
        assert_eq!(report.mu_max_error, 0.0);
    }

    #[test]
    fn component_count_mismatch_is_flagged() {
        let mut p = standard_params();
        p.phi.truncate(1);
        p.lambda.truncate(1);
        let (_, truth) = simulate_kl(&p, 10, 0.6, 4, 3).unwrap();
        let (_, two) = simulate_kl(&standard_params(), 10, 0.6, 4, 3).unwrap();
        let model = two.as_model();
        let scores: Vec<(String, Vec<f64>)> = two
            .site_ids
            .iter()
            .cloned()
            .zip(two.beta_true.iter().cloned())
            .collect();
        let report = recovery_report(&model, &scores, &truth).unwrap();
        assert_eq!(report.components.len(), 1);
        assert!(report.k_mismatch);
        assert_eq!((report.k_model, report.k_truth), (2, 1));
    }

    #[test]
    fn samples_round_trip_through_weekly_pooling() {
        let (series, _) = simulate_kl(&standard_params(), 5, 0.6, 4, 3).unwrap();
        let samples = to_samples(&series);
        let by_site = crate::preprocess::group_by_site(&samples);
        for s in &series {
            let pooled = crate::preprocess::pool_to_weekly(&s.site_id, &by_site[&s.site_id]);
            let logged = crate::preprocess::log_transform(&pooled).unwrap();
            for (w, v) in &s.values {
                assert!((logged.values[w] - v).abs() < 1e-12);
            }
        }
    }
}
