//! Local-linear kernel smoothers in one and two dimensions, with k-fold
//! cross-validated bandwidth selection.
//!
//! All smoothers use the Epanechnikov kernel `K(u) = 0.75 (1 - u^2)` on
//! `|u| < 1`. Points sharing identical coordinates are merged into a single
//! point carrying the summed weight and the weighted mean response before any
//! fit; this leaves the local least-squares sums unchanged and makes the fit
//! independent of input order.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmoothError {
    #[error("degenerate local design at evaluation point {index}; widen the bandwidth")]
    DegenerateLocalDesign { index: usize },
    #[error("every candidate bandwidth produced a degenerate local design")]
    AllCandidatesDegenerate,
    #[error("invalid smoother input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint1D {
    pub t: f64,
    pub y: f64,
    /// Multiplicity weight, > 0.
    pub w: f64,
}

impl ScatterPoint1D {
    pub fn new(t: f64, y: f64) -> Self {
        Self { t, y, w: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint2D {
    pub s: f64,
    pub t: f64,
    pub y: f64,
    pub w: f64,
}

impl ScatterPoint2D {
    pub fn new(s: f64, t: f64, y: f64) -> Self {
        Self { s, t, y, w: 1.0 }
    }
}

/// Half-width of the kernel window, in grid units (weeks).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Bandwidth(f64);

impl Bandwidth {
    pub fn new(h: f64) -> Result<Self, SmoothError> {
        if h.is_finite() && h > 0.0 {
            Ok(Self(h))
        } else {
            Err(SmoothError::InvalidInput(format!(
                "bandwidth must be positive, got {h}"
            )))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

#[inline]
pub fn epanechnikov(u: f64) -> f64 {
    if u.abs() < 1.0 {
        0.75 * (1.0 - u * u)
    } else {
        0.0
    }
}

const DEGENERACY_TOL: f64 = 1e-10;

fn total_order(a: f64, b: f64) -> Ordering {
    a.total_cmp(&b)
}

/// Geometric ladder of `n` bandwidths from `lo` to `hi` inclusive.
pub fn geometric_candidates(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi >= lo && n >= 1);
    if n == 1 {
        return vec![lo];
    }
    let ratio = (hi / lo).powf(1.0 / (n - 1) as f64);
    (0..n).map(|i| lo * ratio.powi(i as i32)).collect()
}

/// Default candidate set: 10 geometric steps from the grid spacing to half
/// the domain width.
pub fn default_candidates(grid: &[f64]) -> Vec<f64> {
    let spacing = grid.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let width = grid.last().copied().unwrap_or(0.0) - grid.first().copied().unwrap_or(0.0);
    let spacing = if spacing.is_finite() && spacing > 0.0 {
        spacing
    } else {
        1.0
    };
    geometric_candidates(spacing, (width / 2.0).max(spacing), 10)
}

/// Points merged by identical abscissa, sorted by `t`.
#[derive(Debug, Clone)]
struct Design1 {
    t: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
}

impl Design1 {
    fn new(points: &[ScatterPoint1D]) -> Self {
        let mut sorted: Vec<ScatterPoint1D> = points.to_vec();
        sorted.sort_by(|a, b| {
            total_order(a.t, b.t)
                .then(total_order(a.y, b.y))
                .then(total_order(a.w, b.w))
        });
        let mut d = Design1 {
            t: Vec::new(),
            y: Vec::new(),
            w: Vec::new(),
        };
        let mut i = 0;
        while i < sorted.len() {
            let t = sorted[i].t;
            let (mut sw, mut swy) = (0.0, 0.0);
            while i < sorted.len() && sorted[i].t == t {
                sw += sorted[i].w;
                swy += sorted[i].w * sorted[i].y;
                i += 1;
            }
            d.t.push(t);
            d.w.push(sw);
            d.y.push(swy / sw);
        }
        d
    }

    fn fit_at(&self, t0: f64, h: f64) -> Option<f64> {
        let lo = self.t.partition_point(|&t| t <= t0 - h);
        let hi = self.t.partition_point(|&t| t < t0 + h);
        let mut sw = 0.0;
        let mut sd = 0.0;
        let mut sy = 0.0;
        let mut kw = Vec::with_capacity(hi.saturating_sub(lo));
        for i in lo..hi {
            let d = self.t[i] - t0;
            let k = epanechnikov(d / h) * self.w[i];
            kw.push(k);
            sw += k;
            sd += k * d;
            sy += k * self.y[i];
        }
        if sw <= 0.0 {
            return None;
        }
        let dbar = sd / sw;
        let ybar = sy / sw;
        let mut sdd = 0.0;
        let mut sdy = 0.0;
        for (j, i) in (lo..hi).enumerate() {
            let dc = self.t[i] - t0 - dbar;
            sdd += kw[j] * dc * dc;
            sdy += kw[j] * dc * (self.y[i] - ybar);
        }
        if sdd <= DEGENERACY_TOL * sw * h * h {
            return None;
        }
        let slope = sdy / sdd;
        Some(ybar - slope * dbar)
    }
}

fn validate_1d(points: &[ScatterPoint1D]) -> Result<(), SmoothError> {
    if let Some(p) = points
        .iter()
        .find(|p| !(p.w > 0.0) || !p.t.is_finite() || !p.y.is_finite() || !p.w.is_finite())
    {
        return Err(SmoothError::InvalidInput(format!("bad scatter point {p:?}")));
    }
    Ok(())
}

/// Local-linear fit of `points` evaluated at each entry of `eval`.
pub fn local_linear_1d(
    points: &[ScatterPoint1D],
    h: Bandwidth,
    eval: &[f64],
) -> Result<Vec<f64>, SmoothError> {
    validate_1d(points)?;
    let design = Design1::new(points);
    eval.par_iter()
        .enumerate()
        .map(|(index, &t0)| {
            design
                .fit_at(t0, h.get())
                .ok_or(SmoothError::DegenerateLocalDesign { index })
        })
        .collect()
}

#[derive(Debug, Clone)]
struct Design2 {
    s: Vec<f64>,
    t: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
}

impl Design2 {
    fn new(points: &[ScatterPoint2D]) -> Self {
        let mut sorted: Vec<ScatterPoint2D> = points.to_vec();
        sorted.sort_by(|a, b| {
            total_order(a.s, b.s)
                .then(total_order(a.t, b.t))
                .then(total_order(a.y, b.y))
                .then(total_order(a.w, b.w))
        });
        let mut d = Design2 {
            s: Vec::new(),
            t: Vec::new(),
            y: Vec::new(),
            w: Vec::new(),
        };
        let mut i = 0;
        while i < sorted.len() {
            let (s, t) = (sorted[i].s, sorted[i].t);
            let (mut sw, mut swy) = (0.0, 0.0);
            while i < sorted.len() && sorted[i].s == s && sorted[i].t == t {
                sw += sorted[i].w;
                swy += sorted[i].w * sorted[i].y;
                i += 1;
            }
            d.s.push(s);
            d.t.push(t);
            d.w.push(sw);
            d.y.push(swy / sw);
        }
        d
    }

    fn fit_at(&self, s0: f64, t0: f64, hs: f64, ht: f64) -> Option<f64> {
        let lo = self.s.partition_point(|&s| s <= s0 - hs);
        let hi = self.s.partition_point(|&s| s < s0 + hs);
        let mut idx = Vec::new();
        let mut kw = Vec::new();
        let (mut sw, mut ss, mut st, mut sy) = (0.0, 0.0, 0.0, 0.0);
        for i in lo..hi {
            let dt = self.t[i] - t0;
            if dt.abs() >= ht {
                continue;
            }
            let ds = self.s[i] - s0;
            let k = epanechnikov(ds / hs) * epanechnikov(dt / ht) * self.w[i];
            if k <= 0.0 {
                continue;
            }
            idx.push(i);
            kw.push(k);
            sw += k;
            ss += k * ds;
            st += k * dt;
            sy += k * self.y[i];
        }
        if sw <= 0.0 {
            return None;
        }
        let (sbar, tbar, ybar) = (ss / sw, st / sw, sy / sw);
        let (mut mss, mut mst, mut mtt, mut ys, mut yt) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&i, &k) in idx.iter().zip(&kw) {
            let ds = self.s[i] - s0 - sbar;
            let dt = self.t[i] - t0 - tbar;
            let dy = self.y[i] - ybar;
            mss += k * ds * ds;
            mst += k * ds * dt;
            mtt += k * dt * dt;
            ys += k * ds * dy;
            yt += k * dt * dy;
        }
        let det = mss * mtt - mst * mst;
        if mss <= DEGENERACY_TOL * sw * hs * hs
            || mtt <= DEGENERACY_TOL * sw * ht * ht
            || det <= DEGENERACY_TOL * mss * mtt
        {
            return None;
        }
        let b = (ys * mtt - yt * mst) / det;
        let c = (yt * mss - ys * mst) / det;
        Some(ybar - b * sbar - c * tbar)
    }
}

fn validate_2d(points: &[ScatterPoint2D]) -> Result<(), SmoothError> {
    if let Some(p) = points.iter().find(|p| {
        !(p.w > 0.0) || !p.s.is_finite() || !p.t.is_finite() || !p.y.is_finite() || !p.w.is_finite()
    }) {
        return Err(SmoothError::InvalidInput(format!("bad scatter point {p:?}")));
    }
    Ok(())
}

/// Local-plane fit evaluated on `grid_s × grid_t`. Row `i`, column `j` holds
/// the fit at `(grid_s[i], grid_t[j])`. With `symmetric` set (square grids
/// only) the result is replaced by `(S + Sᵀ) / 2`.
pub fn local_linear_2d(
    points: &[ScatterPoint2D],
    h: (Bandwidth, Bandwidth),
    grid_s: &[f64],
    grid_t: &[f64],
    symmetric: bool,
) -> Result<DMatrix<f64>, SmoothError> {
    validate_2d(points)?;
    if symmetric && grid_s != grid_t {
        return Err(SmoothError::InvalidInput(
            "symmetric mode needs identical grids".into(),
        ));
    }
    let design = Design2::new(points);
    let (hs, ht) = (h.0.get(), h.1.get());
    let m = grid_t.len();
    let values: Vec<f64> = (0..grid_s.len() * m)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / m, k % m);
            design
                .fit_at(grid_s[i], grid_t[j], hs, ht)
                .ok_or(SmoothError::DegenerateLocalDesign { index: k })
        })
        .collect::<Result<_, _>>()?;
    let mut g = DMatrix::from_row_slice(grid_s.len(), m, &values);
    if symmetric {
        g = (&g + g.transpose()) * 0.5;
    }
    Ok(g)
}

fn fold_labels(n: usize, folds: usize, seed: u64) -> (usize, Vec<usize>) {
    let k = folds.min(n).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut label = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        label[i] = pos % k;
    }
    (k, label)
}

/// Picks the candidate with the smallest error; near-equal errors go to the
/// larger bandwidth.
fn pick_best(scored: &[(f64, Option<f64>)], scale: f64) -> Result<f64, SmoothError> {
    let floor = 1e-20 * (1.0 + scale);
    let mut best: Option<(f64, f64)> = None;
    for &(h, err) in scored {
        let Some(err) = err else { continue };
        let err = if err < floor { 0.0 } else { err };
        best = match best {
            None => Some((h, err)),
            Some((bh, be)) => {
                let tol = 1e-9 * be.max(err);
                if err < be - tol || ((err - be).abs() <= tol && h > bh) {
                    Some((h, err))
                } else {
                    Some((bh, be))
                }
            }
        };
    }
    best.map(|(h, _)| h).ok_or(SmoothError::AllCandidatesDegenerate)
}

fn mean_sq(ys: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (mut sw, mut s) = (0.0, 0.0);
    for (y, w) in ys {
        sw += w;
        s += w * y * y;
    }
    if sw > 0.0 {
        s / sw
    } else {
        0.0
    }
}

/// Mean out-of-fold weighted squared prediction error per candidate
/// (`None` where some fold had a degenerate local design).
pub fn cv_errors_1d(
    points: &[ScatterPoint1D],
    candidates: &[f64],
    folds: usize,
    seed: u64,
) -> Result<Vec<(f64, Option<f64>)>, SmoothError> {
    validate_1d(points)?;
    let (k, label) = fold_labels(points.len(), folds, seed);
    let mut sse = vec![Some(0.0); candidates.len()];
    let mut total_w = 0.0;
    for fold in 0..k {
        let train: Vec<ScatterPoint1D> = points
            .iter()
            .zip(&label)
            .filter(|(_, l)| **l != fold)
            .map(|(p, _)| *p)
            .collect();
        let test: Vec<ScatterPoint1D> = points
            .iter()
            .zip(&label)
            .filter(|(_, l)| **l == fold)
            .map(|(p, _)| *p)
            .collect();
        total_w += test.iter().map(|p| p.w).sum::<f64>();
        let design = Design1::new(&train);
        let errs: Vec<Option<f64>> = candidates
            .par_iter()
            .map(|&h| {
                let mut e = 0.0;
                for p in &test {
                    let fit = design.fit_at(p.t, h)?;
                    e += p.w * (p.y - fit).powi(2);
                }
                Some(e)
            })
            .collect();
        for (acc, e) in sse.iter_mut().zip(errs) {
            *acc = match (*acc, e) {
                (Some(a), Some(e)) => Some(a + e),
                _ => None,
            };
        }
    }
    Ok(candidates
        .iter()
        .zip(sse)
        .map(|(&h, e)| (h, e.map(|e| e / total_w)))
        .collect())
}

/// k-fold cross-validated bandwidth for [`local_linear_1d`]. Folds are
/// clamped to the number of points; ties go to the larger bandwidth. A
/// candidate whose full-data fit is degenerate at any point of `eval` is
/// infeasible; pass an empty slice to skip that check.
pub fn select_bandwidth_cv(
    points: &[ScatterPoint1D],
    candidates: &[f64],
    eval: &[f64],
    folds: usize,
    seed: u64,
) -> Result<Bandwidth, SmoothError> {
    if candidates.is_empty() {
        return Err(SmoothError::InvalidInput("no candidate bandwidths".into()));
    }
    if points.len() < 2 {
        return Err(SmoothError::AllCandidatesDegenerate);
    }
    let mut scored = cv_errors_1d(points, candidates, folds, seed)?;
    let full = Design1::new(points);
    for (h, err) in scored.iter_mut() {
        if err.is_some() && !eval.par_iter().all(|&t| full.fit_at(t, *h).is_some()) {
            *err = None;
        }
    }
    let scale = mean_sq(points.iter().map(|p| (p.y, p.w)));
    Bandwidth::new(pick_best(&scored, scale)?)
}

/// k-fold cross-validated isotropic bandwidth for [`local_linear_2d`],
/// feasible on the square grid `eval × eval`.
pub fn select_bandwidth_cv_2d(
    points: &[ScatterPoint2D],
    candidates: &[f64],
    eval: &[f64],
    folds: usize,
    seed: u64,
) -> Result<Bandwidth, SmoothError> {
    validate_2d(points)?;
    if candidates.is_empty() {
        return Err(SmoothError::InvalidInput("no candidate bandwidths".into()));
    }
    if points.len() < 2 {
        return Err(SmoothError::AllCandidatesDegenerate);
    }
    let (k, label) = fold_labels(points.len(), folds, seed);
    let mut sse = vec![Some(0.0); candidates.len()];
    let mut total_w = 0.0;
    for fold in 0..k {
        let train: Vec<ScatterPoint2D> = points
            .iter()
            .zip(&label)
            .filter(|(_, l)| **l != fold)
            .map(|(p, _)| *p)
            .collect();
        // test points merged by location: sum of w (y - fit)^2 only needs
        // Σw, Σwy and Σwy² per location
        let mut test: BTreeMap<(u64, u64), (f64, f64, f64, f64, f64)> = BTreeMap::new();
        for (p, _) in points.iter().zip(&label).filter(|(_, l)| **l == fold) {
            let e = test
                .entry((p.s.to_bits(), p.t.to_bits()))
                .or_insert((p.s, p.t, 0.0, 0.0, 0.0));
            e.2 += p.w;
            e.3 += p.w * p.y;
            e.4 += p.w * p.y * p.y;
            total_w += p.w;
        }
        let test: Vec<_> = test.into_values().collect();
        let design = Design2::new(&train);
        let errs: Vec<Option<f64>> = candidates
            .par_iter()
            .map(|&h| {
                let mut e = 0.0;
                for &(s, t, sw, swy, swyy) in &test {
                    let f = design.fit_at(s, t, h, h)?;
                    e += swyy - 2.0 * f * swy + f * f * sw;
                }
                Some(e)
            })
            .collect();
        for (acc, e) in sse.iter_mut().zip(errs) {
            *acc = match (*acc, e) {
                (Some(a), Some(e)) => Some(a + e),
                _ => None,
            };
        }
    }
    let full = Design2::new(points);
    let m = eval.len();
    let scored: Vec<(f64, Option<f64>)> = candidates
        .iter()
        .zip(sse)
        .map(|(&h, e)| {
            let feasible = e.is_some()
                && (0..m * m)
                    .into_par_iter()
                    .all(|k| full.fit_at(eval[k / m], eval[k % m], h, h).is_some());
            (h, e.filter(|_| feasible).map(|e| (e / total_w).max(0.0)))
        })
        .collect();
    let scale = mean_sq(points.iter().map(|p| (p.y, p.w)));
    Bandwidth::new(pick_best(&scored, scale)?)
}
