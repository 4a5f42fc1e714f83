//! Sparse functional principal component analysis by conditional
//! expectation.
//!
//! The fit pools every site's sparse weekly series into:
//!
//! 1. a mean curve, by local-linear smoothing of the pooled scatter;
//! 2. a covariance surface, by local-plane smoothing of the off-diagonal
//!    raw covariances `(X(j) - mu(j)) (X(l) - mu(l))`, `j != l`;
//! 3. a measurement-error variance, from the smoothed diagonal raw
//!    covariances minus the diagonal of the surface;
//! 4. eigenpairs of the covariance operator under trapezoidal quadrature.
//!
//! Scores of a sparsely observed site are the best linear predictor
//! `beta = Λ Φᵀ Σ⁻¹ (y - mu)` with `Σ = Φ Λ Φᵀ + σ² I`, which is the
//! conditional expectation when scores and errors are jointly Gaussian.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{decile_bins, percentile_ranks, AssociationError};
use crate::preprocess::{WeeklySeries, Window};
use crate::smooth::{
    default_candidates, local_linear_1d, local_linear_2d, select_bandwidth_cv, select_bandwidth_cv_2d,
    Bandwidth, ScatterPoint1D, ScatterPoint2D, SmoothError,
};

#[derive(Debug, Error)]
pub enum FpcaError {
    #[error(transparent)]
    Smooth(#[from] SmoothError),
    #[error("covariance surface has no positive eigenvalues")]
    NoPositiveEigenvalues,
    #[error("site `{0}` has no observations")]
    EmptySeries(String),
    #[error("site `{0}` is not observed at every grid point")]
    NotDense(String),
    #[error("site `{site_id}`: week {week} is outside the model grid")]
    WeekOutsideGrid { site_id: String, week: u32 },
    #[error("need at least 3 sites to fit, got {0}")]
    InsufficientSites(usize),
    #[error("no off-diagonal covariance pairs: every site has a single observation")]
    NoCovariancePairs,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Association(#[from] AssociationError),
    #[error("model file: {0}")]
    Format(String),
}

/// Tuning for [`fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpcaConfig {
    pub fve_threshold: f64,
    pub k_override: Option<usize>,
    /// Candidate bandwidths in weeks; `None` uses [`default_candidates`].
    pub bandwidth_candidates: Option<Vec<f64>>,
    pub mean_bandwidth: Option<f64>,
    pub cov_bandwidth: Option<f64>,
    pub cv_folds: usize,
    pub seed: u64,
}

impl Default for FpcaConfig {
    fn default() -> Self {
        Self {
            fve_threshold: 0.95,
            k_override: None,
            bandwidth_candidates: None,
            mean_bandwidth: None,
            cov_bandwidth: None,
            cv_folds: 5,
            seed: 20_240_101,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitBandwidths {
    pub mean: f64,
    pub covariance: f64,
    pub diagonal: f64,
}

/// A fitted model. `lambda`, `phi` and `fve` hold every positive eigenpair;
/// the first `k` of them define the reconstruction and the scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpcaModel {
    pub window: Window,
    /// Week numbers of the grid.
    pub grid: Vec<f64>,
    pub mu: Vec<f64>,
    pub lambda: Vec<f64>,
    pub phi: Vec<Vec<f64>>,
    pub sigma2: f64,
    pub quad_weights: Vec<f64>,
    pub fve: Vec<f64>,
    pub k: usize,
    pub n_sites: usize,
    pub bandwidths: Option<FitBandwidths>,
}

impl FpcaModel {
    pub fn grid_index(&self, week: u32) -> Option<usize> {
        self.window
            .contains(week)
            .then(|| (week - self.window.first) as usize)
    }

    pub fn components(&self) -> usize {
        self.k
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, FpcaError> {
        serde_json::from_str(s).map_err(|e| FpcaError::Format(e.to_string()))
    }
}

/// Trapezoidal weights over the window, with the window measured as an
/// interval of unit length.
pub fn quadrature_weights(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![1.0],
        _ => {
            let h = 1.0 / (n - 1) as f64;
            (0..n)
                .map(|i| if i == 0 || i == n - 1 { 0.5 * h } else { h })
                .collect()
        }
    }
}

pub fn grid_of(window: Window) -> Vec<f64> {
    window.weeks().map(f64::from).collect()
}

pub fn inner_product(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    w.iter().zip(a).zip(b).map(|((w, a), b)| w * a * b).sum()
}

fn pooled_scatter(series: &[WeeklySeries]) -> Vec<ScatterPoint1D> {
    series
        .iter()
        .flat_map(|s| {
            s.values
                .iter()
                .map(|(w, v)| ScatterPoint1D::new(f64::from(*w), *v))
        })
        .collect()
}

/// Mean curve on `grid` from the pooled scatter of every site.
pub fn estimate_mean(series: &[WeeklySeries], grid: &[f64], h: Bandwidth) -> Result<Vec<f64>, FpcaError> {
    Ok(local_linear_1d(&pooled_scatter(series), h, grid)?)
}

#[derive(Debug, Clone, Default)]
pub struct RawCovariances {
    pub off_diag: Vec<ScatterPoint2D>,
    pub diag: Vec<ScatterPoint1D>,
}

/// Centered products of every ordered pair of observed weeks within each
/// site. `mu` is indexed by week offset from `window.first`.
pub fn raw_covariances(series: &[WeeklySeries], mu: &[f64], window: Window) -> RawCovariances {
    let per_site: Vec<RawCovariances> = series
        .par_iter()
        .map(|s| {
            let obs: Vec<(f64, f64)> = s
                .values
                .iter()
                .filter(|(w, _)| window.contains(**w))
                .map(|(w, v)| (f64::from(*w), v - mu[(w - window.first) as usize]))
                .collect();
            let mut out = RawCovariances::default();
            for &(tj, cj) in &obs {
                for &(tl, cl) in &obs {
                    if tj == tl {
                        out.diag.push(ScatterPoint1D::new(tj, cj * cl));
                    } else {
                        out.off_diag.push(ScatterPoint2D::new(tj, tl, cj * cl));
                    }
                }
            }
            out
        })
        .collect();
    let mut all = RawCovariances::default();
    for r in per_site {
        all.off_diag.extend(r.off_diag);
        all.diag.extend(r.diag);
    }
    all
}

/// Symmetric smoothed covariance surface from the off-diagonal raw
/// covariances only.
pub fn estimate_covariance_surface(
    off_diag: &[ScatterPoint2D],
    grid: &[f64],
    h: Bandwidth,
) -> Result<DMatrix<f64>, FpcaError> {
    if off_diag.is_empty() {
        return Err(FpcaError::NoCovariancePairs);
    }
    Ok(local_linear_2d(off_diag, (h, h), grid, grid, true)?)
}

/// Indices of the middle half of a grid of length `m`.
fn middle_half(m: usize) -> std::ops::RangeInclusive<usize> {
    let span = (m.max(1) - 1) as f64;
    let lo = (0.25 * span).ceil() as usize;
    let hi = (0.75 * span).floor() as usize;
    lo..=hi.max(lo)
}

/// `max(0, mean over the middle half of the grid of V(t) - G(t, t))`, with
/// `V` the smoothed diagonal raw covariances.
pub fn estimate_error_variance(
    diag: &[ScatterPoint1D],
    g: &DMatrix<f64>,
    grid: &[f64],
    h: Bandwidth,
) -> Result<f64, FpcaError> {
    let v = local_linear_1d(diag, h, grid)?;
    let range = middle_half(grid.len());
    let n = range.clone().count() as f64;
    let mean = range.map(|i| v[i] - g[(i, i)]).sum::<f64>() / n;
    Ok(mean.max(0.0))
}

/// Eigenpairs of the covariance operator with kernel `g` under quadrature
/// weights `w`, sorted by decreasing eigenvalue.
///
/// Only eigenvalues above `1e-10` times the largest are kept. Each `phi_k`
/// has unit weighted norm; its sign makes `Σ w φ_k` nonnegative, falling
/// back to `φ_k(first) >= 0` when that sum vanishes.
pub fn eigen_decompose(g: &DMatrix<f64>, w: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>), FpcaError> {
    let m = w.len();
    if g.nrows() != m || g.ncols() != m {
        return Err(FpcaError::DimensionMismatch(format!(
            "surface {}x{} vs {m} weights",
            g.nrows(),
            g.ncols()
        )));
    }
    let sw: Vec<f64> = w.iter().map(|x| x.sqrt()).collect();
    let a = DMatrix::from_fn(m, m, |i, j| sw[i] * 0.5 * (g[(i, j)] + g[(j, i)]) * sw[j]);
    let eig = SymmetricEigen::new(a);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let top = order.first().map(|&i| eig.eigenvalues[i]).unwrap_or(0.0);
    // roundoff leaves tiny positive values in negative-definite surfaces
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, l| a.max(l.abs()));
    if !(top > 1e-10 * scale) {
        return Err(FpcaError::NoPositiveEigenvalues);
    }
    let mut lambda = Vec::new();
    let mut phi = Vec::new();
    for i in order {
        let l = eig.eigenvalues[i];
        if !(l > 1e-10 * top) {
            break;
        }
        let u = eig.eigenvectors.column(i);
        let mut f: Vec<f64> = (0..m).map(|j| u[j] / sw[j]).collect();
        let norm = inner_product(w, &f, &f).sqrt();
        f.iter_mut().for_each(|x| *x /= norm);
        let integral: f64 = w.iter().zip(&f).map(|(w, f)| w * f).sum();
        let flip = if integral.abs() > 1e-12 {
            integral < 0.0
        } else {
            f[0] < 0.0
        };
        if flip {
            f.iter_mut().for_each(|x| *x = -*x);
        }
        lambda.push(l);
        phi.push(f);
    }
    Ok((lambda, phi))
}

/// Cumulative fraction of variance explained and the smallest `K` reaching
/// `threshold`, clamped to `k_cap`. A slack of `1e-12` absorbs rounding in
/// the cumulative sums.
pub fn select_k_fve(lambda: &[f64], threshold: f64, k_cap: usize) -> (usize, Vec<f64>) {
    let total: f64 = lambda.iter().sum();
    let mut acc = 0.0;
    let fve: Vec<f64> = lambda
        .iter()
        .map(|l| {
            acc += l;
            (acc / total).min(1.0)
        })
        .collect();
    let k = fve
        .iter()
        .position(|f| *f >= threshold - 1e-12)
        .map(|i| i + 1)
        .unwrap_or(fve.len());
    (k.min(k_cap).min(lambda.len()), fve)
}

fn observed(series: &WeeklySeries, model: &FpcaModel) -> Result<Vec<(usize, f64)>, FpcaError> {
    if series.values.is_empty() {
        return Err(FpcaError::EmptySeries(series.site_id.clone()));
    }
    series
        .values
        .iter()
        .map(|(w, v)| {
            model
                .grid_index(*w)
                .map(|j| (j, *v))
                .ok_or_else(|| FpcaError::WeekOutsideGrid {
                    site_id: series.site_id.clone(),
                    week: *w,
                })
        })
        .collect()
}

fn solve_spd(sigma: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let n = sigma.nrows();
    let chol = sigma.clone().cholesky()?;
    let scale = sigma.trace() / n as f64;
    let l = chol.l_dirty();
    if (0..n).any(|i| l[(i, i)] * l[(i, i)] <= 1e-12 * scale) {
        return None;
    }
    Some(chol.solve(rhs))
}

/// Conditional-expectation scores of one sparsely observed site.
pub fn pace_scores(series: &WeeklySeries, model: &FpcaModel) -> Result<Vec<f64>, FpcaError> {
    let obs = observed(series, model)?;
    let k = model.k;
    let n = obs.len();
    let phi = DMatrix::from_fn(n, k, |r, c| model.phi[c][obs[r].0]);
    let lam = DMatrix::from_diagonal(&DVector::from_iterator(k, model.lambda[..k].iter().copied()));
    let y = DVector::from_iterator(n, obs.iter().map(|(j, v)| v - model.mu[*j]));
    let mut sigma = &phi * &lam * phi.transpose();
    for i in 0..n {
        sigma[(i, i)] += model.sigma2;
    }
    let alpha = match solve_spd(&sigma, &y) {
        Some(a) => a,
        None => {
            let ridge = 1e-8 * sigma.trace() / n as f64;
            for i in 0..n {
                sigma[(i, i)] += ridge;
            }
            match sigma.clone().cholesky() {
                Some(c) => c.solve(&y),
                None => sigma
                    .lu()
                    .solve(&y)
                    .ok_or_else(|| FpcaError::DimensionMismatch("singular score system".into()))?,
            }
        }
    };
    let beta = lam * phi.transpose() * alpha;
    Ok(beta.iter().copied().collect())
}

/// Quadrature scores `Σ_j w_j (X(j) - mu(j)) φ_k(j)` of a fully observed
/// site.
pub fn integral_scores(series: &WeeklySeries, model: &FpcaModel) -> Result<Vec<f64>, FpcaError> {
    let m = model.grid.len();
    let mut x = vec![f64::NAN; m];
    for (j, v) in observed(series, model)? {
        x[j] = v;
    }
    if x.iter().any(|v| v.is_nan()) {
        return Err(FpcaError::NotDense(series.site_id.clone()));
    }
    let centered: Vec<f64> = x.iter().zip(&model.mu).map(|(x, mu)| x - mu).collect();
    Ok(model.phi[..model.k]
        .iter()
        .map(|phi| inner_product(&model.quad_weights, &centered, phi))
        .collect())
}

/// `mu(j) + Σ_k beta_k φ_k(j)` at the requested weeks; weeks outside the
/// grid yield NaN.
pub fn reconstruct(model: &FpcaModel, beta: &[f64], weeks: &[u32]) -> Vec<f64> {
    weeks
        .iter()
        .map(|w| match model.grid_index(*w) {
            Some(j) => {
                model.mu[j]
                    + beta
                        .iter()
                        .zip(&model.phi)
                        .map(|(b, phi)| b * phi[j])
                        .sum::<f64>()
            }
            None => f64::NAN,
        })
        .collect()
}

/// Full-grid reconstruction.
pub fn reconstruct_curve(model: &FpcaModel, beta: &[f64]) -> Vec<f64> {
    let weeks: Vec<u32> = model.window.weeks().collect();
    reconstruct(model, beta, &weeks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub site_id: String,
    pub beta: Vec<f64>,
    /// Per component, midrank percentile of `beta` among all scored sites.
    pub percentile: Vec<f64>,
    pub decile_bin: Vec<u32>,
}

/// Attaches percentiles and decile bins to raw scores.
pub fn score_table(raw: &[(String, Vec<f64>)], n_bins: usize) -> Result<Vec<ScoreVector>, FpcaError> {
    let k = raw.first().map(|(_, b)| b.len()).unwrap_or(0);
    let ids: Vec<&str> = raw.iter().map(|(s, _)| s.as_str()).collect();
    let mut out: Vec<ScoreVector> = raw
        .iter()
        .map(|(s, b)| ScoreVector {
            site_id: s.clone(),
            beta: b.clone(),
            percentile: Vec::with_capacity(k),
            decile_bin: Vec::with_capacity(k),
        })
        .collect();
    for c in 0..k {
        let col: Vec<f64> = raw.iter().map(|(_, b)| b[c]).collect();
        let pct = percentile_ranks(&col);
        let bins = if raw.len() >= n_bins {
            decile_bins(&col, &ids, n_bins)?
        } else {
            vec![0; raw.len()]
        };
        for (i, sv) in out.iter_mut().enumerate() {
            sv.percentile.push(pct[i]);
            sv.decile_bin.push(bins[i]);
        }
    }
    Ok(out)
}

pub fn write_scores_csv<W: Write>(out: W, scores: &[ScoreVector]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["site_id", "k", "beta", "percentile", "decile_bin"])?;
    for s in scores {
        for c in 0..s.beta.len() {
            w.write_record([
                s.site_id.clone(),
                (c + 1).to_string(),
                s.beta[c].to_string(),
                s.percentile[c].to_string(),
                s.decile_bin[c].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores_csv<R: Read>(input: R) -> Result<Vec<ScoreVector>, FpcaError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut out: Vec<ScoreVector> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| FpcaError::Format(e.to_string()))?;
        let bad = || FpcaError::Format(format!("scores row {}", i + 1));
        let site = rec.get(0).ok_or_else(bad)?.to_string();
        let k: usize = rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let beta: f64 = rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let pct: f64 = rec.get(3).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let bin: u32 = rec.get(4).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        if out.last().map(|s| s.site_id != site).unwrap_or(true) {
            out.push(ScoreVector {
                site_id: site,
                beta: Vec::new(),
                percentile: Vec::new(),
                decile_bin: Vec::new(),
            });
        }
        let sv = out.last_mut().unwrap();
        if k != sv.beta.len() + 1 {
            return Err(bad());
        }
        sv.beta.push(beta);
        sv.percentile.push(pct);
        sv.decile_bin.push(bin);
    }
    Ok(out)
}

/// A fitted model together with the raw scores of the sites it was fit on.
#[derive(Debug, Clone)]
pub struct FpcaFit {
    pub model: FpcaModel,
    pub scores: Vec<(String, Vec<f64>)>,
}

fn choose_bandwidth_1d(
    points: &[ScatterPoint1D],
    fixed: Option<f64>,
    candidates: &[f64],
    grid: &[f64],
    cfg: &FpcaConfig,
) -> Result<Bandwidth, FpcaError> {
    match fixed {
        Some(h) => Ok(Bandwidth::new(h)?),
        None => Ok(select_bandwidth_cv(
            points,
            candidates,
            grid,
            cfg.cv_folds,
            cfg.seed,
        )?),
    }
}

/// Fits the model on series restricted to `window`.
pub fn fit(series: &[WeeklySeries], window: Window, cfg: &FpcaConfig) -> Result<FpcaFit, FpcaError> {
    let n = series.len();
    if n < 3 {
        return Err(FpcaError::InsufficientSites(n));
    }
    if let Some(s) = series.iter().find(|s| s.values.is_empty()) {
        return Err(FpcaError::EmptySeries(s.site_id.clone()));
    }
    for s in series {
        if let Some(w) = s.values.keys().find(|w| !window.contains(**w)) {
            return Err(FpcaError::WeekOutsideGrid {
                site_id: s.site_id.clone(),
                week: *w,
            });
        }
    }
    let grid = grid_of(window);
    let quad_weights = quadrature_weights(grid.len());
    let candidates = cfg
        .bandwidth_candidates
        .clone()
        .unwrap_or_else(|| default_candidates(&grid));

    let pooled = pooled_scatter(series);
    let h_mean = choose_bandwidth_1d(&pooled, cfg.mean_bandwidth, &candidates, &grid, cfg)?;
    let mu = local_linear_1d(&pooled, h_mean, &grid)?;

    let raw = raw_covariances(series, &mu, window);
    if raw.off_diag.is_empty() {
        return Err(FpcaError::NoCovariancePairs);
    }
    let h_cov = match cfg.cov_bandwidth {
        Some(h) => Bandwidth::new(h)?,
        None => select_bandwidth_cv_2d(&raw.off_diag, &candidates, &grid, cfg.cv_folds, cfg.seed)?,
    };
    let g = estimate_covariance_surface(&raw.off_diag, &grid, h_cov)?;
    let h_diag = choose_bandwidth_1d(&raw.diag, None, &candidates, &grid, cfg)?;
    let sigma2 = estimate_error_variance(&raw.diag, &g, &grid, h_diag)?;

    let (lambda, phi) = eigen_decompose(&g, &quad_weights)?;
    let k_cap = n - 2;
    let (k_fve, fve) = select_k_fve(&lambda, cfg.fve_threshold, k_cap);
    let k = match cfg.k_override {
        Some(k) => k.max(1).min(k_cap).min(lambda.len()),
        None => k_fve,
    };
    let model = FpcaModel {
        window,
        grid,
        mu,
        lambda,
        phi,
        sigma2,
        quad_weights,
        fve,
        k,
        n_sites: n,
        bandwidths: Some(FitBandwidths {
            mean: h_mean.get(),
            covariance: h_cov.get(),
            diagonal: h_diag.get(),
        }),
    };
    let scores = series
        .par_iter()
        .map(|s| pace_scores(s, &model).map(|b| (s.site_id.clone(), b)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FpcaFit { model, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::Scale;
    use std::collections::BTreeMap;

    fn orthonormal_pair(w: &[f64], grid: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let c: Vec<f64> = grid.iter().map(|_| 1.0).collect();
        let n1 = inner_product(w, &c, &c).sqrt();
        let p1: Vec<f64> = c.iter().map(|x| x / n1).collect();
        let s: Vec<f64> = grid
            .iter()
            .map(|t| (2.0 * std::f64::consts::PI * t / 52.0).sin())
            .collect();
        let proj = inner_product(w, &s, &p1);
        let r: Vec<f64> = s.iter().zip(&p1).map(|(s, p)| s - proj * p).collect();
        let n2 = inner_product(w, &r, &r).sqrt();
        (p1, r.iter().map(|x| x / n2).collect())
    }

    fn model_with(lambda: Vec<f64>, phi: Vec<Vec<f64>>, sigma2: f64) -> FpcaModel {
        let window = Window::FULL_YEAR;
        let grid = grid_of(window);
        let w = quadrature_weights(grid.len());
        let (k, fve) = select_k_fve(&lambda, 0.95, 50);
        FpcaModel {
            window,
            mu: grid.iter().map(|t| 2.0 + 0.01 * t).collect(),
            grid,
            lambda,
            phi,
            sigma2,
            quad_weights: w,
            fve,
            k,
            n_sites: 52,
            bandwidths: None,
        }
    }

    fn dense(site: &str, values: &[f64]) -> WeeklySeries {
        let v: BTreeMap<u32, f64> = values
            .iter()
            .enumerate()
            .map(|(i, v)| (i as u32 + 1, *v))
            .collect();
        WeeklySeries::new(site, Window::FULL_YEAR, v, Scale::Log10Count)
    }

    #[test]
    fn weights_cover_unit_interval() {
        let w = quadrature_weights(52);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert_eq!(w[0], w[51]);
        assert_eq!(w[1], 2.0 * w[0]);
    }

    #[test]
    fn fve_arithmetic() {
        assert_eq!(select_k_fve(&[4.0, 1.0], 0.95, 10), (2, vec![0.8, 1.0]));
        assert_eq!(select_k_fve(&[4.0, 1.0], 0.75, 10).0, 1);
        let (k, fve) = select_k_fve(&[0.74, 0.21, 0.03, 0.02], 0.95, 10);
        assert_eq!(k, 2);
        assert!((fve[1] - 0.95).abs() < 1e-12);
        assert_eq!(select_k_fve(&[0.5, 0.2, 0.1, 0.1, 0.1], 0.99, 3).0, 3);
    }

    #[test]
    fn rank_one_eigenpair() {
        let grid = grid_of(Window::FULL_YEAR);
        let w = quadrature_weights(grid.len());
        let (v, _) = orthonormal_pair(&w, &grid);
        let g = DMatrix::from_fn(52, 52, |i, j| 2.0 * v[i] * v[j]);
        let (lambda, phi) = eigen_decompose(&g, &w).unwrap();
        assert_eq!(lambda.len(), 1);
        assert!((lambda[0] - 2.0).abs() < 1e-10);
        for (a, b) in phi[0].iter().zip(&v) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn negative_mode_is_discarded() {
        let grid = grid_of(Window::FULL_YEAR);
        let w = quadrature_weights(grid.len());
        let (a, b) = orthonormal_pair(&w, &grid);
        let g = DMatrix::from_fn(52, 52, |i, j| 1.0 * a[i] * a[j] - 0.01 * b[i] * b[j]);
        let (lambda, phi) = eigen_decompose(&g, &w).unwrap();
        assert_eq!(lambda.len(), 1);
        assert_eq!(phi.len(), 1);
        let neg = DMatrix::from_fn(52, 52, |i, j| -0.01 * b[i] * b[j]);
        assert!(matches!(
            eigen_decompose(&neg, &w),
            Err(FpcaError::NoPositiveEigenvalues)
        ));
    }

    #[test]
    fn sign_convention_tie_break_on_first_value() {
        // zero-integral eigenfunction: the first grid value decides
        let w = vec![0.25, 0.5, 0.25];
        let v = [1.0, 0.0, -1.0];
        let norm = (0.25f64 + 0.25).sqrt();
        let u: Vec<f64> = v.iter().map(|x| -x / norm).collect();
        let g = DMatrix::from_fn(3, 3, |i, j| u[i] * u[j]);
        let (_, phi) = eigen_decompose(&g, &w).unwrap();
        assert!(phi[0][0] > 0.0);
    }

    #[test]
    fn exact_interpolation_scores() {
        let grid = grid_of(Window::FULL_YEAR);
        let w = quadrature_weights(grid.len());
        let (p1, p2) = orthonormal_pair(&w, &grid);
        let model = model_with(vec![1.0, 0.25], vec![p1.clone(), p2], 0.0);
        let x: Vec<f64> = model.mu.iter().zip(&p1).map(|(m, p)| m + 2.0 * p).collect();
        let beta = pace_scores(&dense("S", &x), &model).unwrap();
        assert!((beta[0] - 2.0).abs() < 1e-8, "{beta:?}");
        assert!(beta[1].abs() < 1e-8);
    }

    #[test]
    fn huge_noise_shrinks_scores_to_zero() {
        let grid = grid_of(Window::FULL_YEAR);
        let w = quadrature_weights(grid.len());
        let (p1, p2) = orthonormal_pair(&w, &grid);
        let model = model_with(vec![1.0, 0.25], vec![p1, p2], 1e6);
        let x: Vec<f64> = model.mu.iter().map(|m| m + 3.0).collect();
        let beta = pace_scores(&dense("S", &x), &model).unwrap();
        assert!(beta.iter().all(|b| b.abs() <= 1e-3));
    }

    #[test]
    fn three_observation_hand_solve() {
        let grid = grid_of(Window::FULL_YEAR);
        let w = quadrature_weights(grid.len());
        let (_, p2) = orthonormal_pair(&w, &grid);
        let mut model = model_with(vec![0.7], vec![p2.clone()], 0.3);
        model.k = 1;
        let weeks = [5u32, 20, 41];
        let ys = [2.5, 1.1, 3.4];
        let mut v = BTreeMap::new();
        for (w, y) in weeks.iter().zip(ys) {
            v.insert(*w, y);
        }
        let beta = pace_scores(
            &WeeklySeries::new("S", Window::FULL_YEAR, v, Scale::Log10Count),
            &model,
        )
        .unwrap();

        // beta = λ φᵀ (λ φ φᵀ + σ² I)⁻¹ y, solved by Cramer's rule
        let f: Vec<f64> = weeks.iter().map(|w| p2[*w as usize - 1]).collect();
        let y: Vec<f64> = weeks
            .iter()
            .zip(ys)
            .map(|(w, y)| y - model.mu[*w as usize - 1])
            .collect();
        let a = |i: usize, j: usize| 0.7 * f[i] * f[j] + if i == j { 0.3 } else { 0.0 };
        let det3 = |m: [[f64; 3]; 3]| {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        };
        let mat = [
            [a(0, 0), a(0, 1), a(0, 2)],
            [a(1, 0), a(1, 1), a(1, 2)],
            [a(2, 0), a(2, 1), a(2, 2)],
        ];
        let d = det3(mat);
        let mut x = [0.0; 3];
        for c in 0..3 {
            let mut mc = mat;
            for r in 0..3 {
                mc[r][c] = y[r];
            }
            x[c] = det3(mc) / d;
        }
        let expected = 0.7 * (f[0] * x[0] + f[1] * x[1] + f[2] * x[2]);
        assert!((beta[0] - expected).abs() < 1e-10);
    }

    #[test]
    fn integral_scores_recover_coordinates() {
        let grid = grid_of(Window::FULL_YEAR);
        let w = quadrature_weights(grid.len());
        let (p1, p2) = orthonormal_pair(&w, &grid);
        let model = model_with(vec![1.0, 0.25], vec![p1, p2.clone()], 0.04);
        let zero = integral_scores(&dense("S", &model.mu), &model).unwrap();
        assert!(zero.iter().all(|b| b.abs() < 1e-12));
        let x: Vec<f64> = model.mu.iter().zip(&p2).map(|(m, p)| m + 3.0 * p).collect();
        let b = integral_scores(&dense("S", &x), &model).unwrap();
        assert!(b[0].abs() < 1e-8 && (b[1] - 3.0).abs() < 1e-8);

        let mut sparse = dense("S", &x);
        sparse.values.remove(&10);
        assert!(matches!(
            integral_scores(&sparse, &model),
            Err(FpcaError::NotDense(_))
        ));
    }

    #[test]
    fn reconstruction_is_structural() {
        let grid = grid_of(Window::FULL_YEAR);
        let w = quadrature_weights(grid.len());
        let (p1, p2) = orthonormal_pair(&w, &grid);
        let model = model_with(vec![1.0, 0.25], vec![p1.clone(), p2.clone()], 0.04);
        let weeks: Vec<u32> = (1..=52).collect();
        assert_eq!(reconstruct(&model, &[0.0, 0.0], &weeks), model.mu);
        let r = reconstruct(&model, &[0.5, -1.5], &[3, 40]);
        assert!((r[0] - (model.mu[2] + 0.5 * p1[2] - 1.5 * p2[2])).abs() < 1e-14);
        assert!((r[1] - (model.mu[39] + 0.5 * p1[39] - 1.5 * p2[39])).abs() < 1e-14);
    }

    #[test]
    fn raw_covariance_combinatorics() {
        let mut v = BTreeMap::new();
        v.insert(3, 1.0);
        v.insert(7, 2.0);
        let s = WeeklySeries::new("S", Window::FULL_YEAR, v, Scale::Log10Count);
        let raw = raw_covariances(&[s], &[0.0; 52], Window::FULL_YEAR);
        assert_eq!(raw.off_diag.len(), 2);
        assert_eq!(raw.diag.len(), 2);
        let p = raw.off_diag.iter().find(|p| p.s == 3.0 && p.t == 7.0).unwrap();
        assert_eq!(p.y, 2.0);
        assert!(raw.off_diag.iter().any(|p| p.s == 7.0 && p.t == 3.0));
    }

    #[test]
    fn zero_products_give_zero_surface() {
        let grid: Vec<f64> = (1..=10).map(f64::from).collect();
        let mut pts = Vec::new();
        for s in 1..=10 {
            for t in 1..=10 {
                if s != t {
                    pts.push(ScatterPoint2D::new(s as f64, t as f64, 0.0));
                }
            }
        }
        let g = estimate_covariance_surface(&pts, &grid, Bandwidth::new(2.5).unwrap()).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn error_variance_shifts_with_diagonal() {
        let grid: Vec<f64> = (1..=20).map(f64::from).collect();
        let g = DMatrix::from_fn(20, 20, |i, j| if i == j { 1.0 } else { 0.5 });
        let diag: Vec<ScatterPoint1D> = grid.iter().map(|t| ScatterPoint1D::new(*t, 1.3)).collect();
        let h = Bandwidth::new(3.0).unwrap();
        let s0 = estimate_error_variance(&diag, &g, &grid, h).unwrap();
        assert!((s0 - 0.3).abs() < 1e-10);
        let shifted: Vec<_> = diag
            .iter()
            .map(|p| ScatterPoint1D::new(p.t, p.y + 0.25))
            .collect();
        let s1 = estimate_error_variance(&shifted, &g, &grid, h).unwrap();
        assert!((s1 - s0 - 0.25).abs() < 1e-6);
        let below: Vec<_> = diag.iter().map(|p| ScatterPoint1D::new(p.t, 0.2)).collect();
        assert_eq!(estimate_error_variance(&below, &g, &grid, h).unwrap(), 0.0);
    }

    #[test]
    fn model_json_round_trip() {
        let grid = grid_of(Window::FULL_YEAR);
        let w = quadrature_weights(grid.len());
        let (p1, p2) = orthonormal_pair(&w, &grid);
        let model = model_with(vec![1.0, 0.25], vec![p1, p2], 0.04);
        assert_eq!(FpcaModel::from_json(&model.to_json()).unwrap(), model);
    }

    #[test]
    fn too_few_sites() {
        let s = dense("A", &[1.0; 52]);
        assert!(matches!(
            fit(&[s.clone(), s], Window::FULL_YEAR, &FpcaConfig::default()),
            Err(FpcaError::InsufficientSites(2))
        ));
    }
}
