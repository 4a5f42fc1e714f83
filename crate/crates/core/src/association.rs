//! Rank correlation, simple regression and the binning/grouping of sites by
//! their component scores.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::fpca::ScoreVector;
use crate::preprocess::WeeklySeries;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssociationError {
    #[error("need at least 3 complete pairs, got {0}")]
    InsufficientData(usize),
    #[error("one variable has zero variance (all values tied)")]
    ZeroVariance,
    #[error("predictor is constant")]
    ConstantPredictor,
    #[error("need at least {bins} sites to bin, got {n}")]
    TooFewSites { n: usize, bins: usize },
    #[error("site `{site_id}`: only {n} common weeks with the covariate")]
    InsufficientOverlap { site_id: String, n: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("site `{0}` has no score or no series")]
    MissingSite(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    SpearmanRho,
    RSquared,
}

impl Statistic {
    pub fn as_str(self) -> &'static str {
        match self {
            Statistic::SpearmanRho => "spearman_rho",
            Statistic::RSquared => "r_squared",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationResult {
    /// A site id, `global`, or `<site_id>/<covariate>`.
    pub subject: String,
    pub statistic: Statistic,
    pub value: f64,
    pub p_value: f64,
    pub n: usize,
    pub significant_positive: bool,
    pub p_bin: Option<u32>,
}

/// Average ranks (1-based); tied values share the mean of their positions.
pub fn midranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Two-sided p-value of a correlation `r` on `n` pairs via
/// `t = r sqrt((n-2)/(1-r²))` with `n-2` degrees of freedom.
pub fn correlation_p_value(r: f64, n: usize) -> f64 {
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = r * (df / (1.0 - r * r)).sqrt();
    student_two_sided(t, df)
}

fn student_two_sided(t: f64, df: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)
}

fn complete_pairs(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    x.iter()
        .zip(y)
        .filter(|(a, b)| a.is_finite() && b.is_finite())
        .map(|(a, b)| (*a, *b))
        .unzip()
}

/// Spearman's rho (Pearson correlation of midranks) and its two-sided
/// p-value. Non-finite entries mark missing values; such pairs are dropped.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<(f64, f64), AssociationError> {
    if x.len() != y.len() {
        return Err(AssociationError::LengthMismatch(x.len(), y.len()));
    }
    let (x, y) = complete_pairs(x, y);
    let n = x.len();
    if n < 3 {
        return Err(AssociationError::InsufficientData(n));
    }
    let rho = pearson(&midranks(&x), &midranks(&y)).ok_or(AssociationError::ZeroVariance)?;
    Ok((rho, correlation_p_value(rho, n)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Two-sided t-test of a zero slope.
    pub p_value: f64,
    pub n: usize,
}

/// Ordinary least squares of `y` on `x`. A constant response gives
/// `r_squared = 0`.
pub fn linreg_r2(x: &[f64], y: &[f64]) -> Result<LinearFit, AssociationError> {
    if x.len() != y.len() {
        return Err(AssociationError::LengthMismatch(x.len(), y.len()));
    }
    let (x, y) = complete_pairs(x, y);
    let n = x.len();
    if n < 3 {
        return Err(AssociationError::InsufficientData(n));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(&y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 {
        return Err(AssociationError::ConstantPredictor);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(&y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let r_squared = if syy > 0.0 {
        (1.0 - sse / syy).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let df = nf - 2.0;
    let p_value = if syy <= 0.0 {
        1.0
    } else if sse <= 1e-28 * syy {
        0.0
    } else {
        let se = (sse / df / sxx).sqrt();
        student_two_sided(slope / se, df)
    };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
        p_value,
        n,
    })
}

/// Midrank percentile in `[0, 100]`: `100 (rank - 1) / (n - 1)`.
pub fn percentile_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n == 1 {
        return vec![50.0];
    }
    midranks(values)
        .into_iter()
        .map(|r| 100.0 * (r - 1.0) / (n - 1) as f64)
        .collect()
}

/// Ascending order of `(score, id)`.
fn ranked(scores: &[f64], ids: &[&str]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then_with(|| ids[a].cmp(ids[b])));
    order
}

/// Equal-size bins `1..=n_bins` of increasing score. Ties are ordered by id;
/// when `n` is not a multiple of `n_bins` the extra sites go to the highest
/// bins.
pub fn decile_bins(scores: &[f64], ids: &[&str], n_bins: usize) -> Result<Vec<u32>, AssociationError> {
    let n = scores.len();
    if ids.len() != n {
        return Err(AssociationError::LengthMismatch(n, ids.len()));
    }
    if n < n_bins || n_bins == 0 {
        return Err(AssociationError::TooFewSites { n, bins: n_bins });
    }
    let base = n / n_bins;
    let extra = n % n_bins;
    let mut labels = vec![0; n];
    let mut pos = 0;
    let order = ranked(scores, ids);
    for b in 1..=n_bins {
        let size = base + usize::from(b > n_bins - extra);
        for &i in &order[pos..pos + size] {
            labels[i] = b as u32;
        }
        pos += size;
    }
    Ok(labels)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExtremaGroups {
    /// Top-q by FPC1 and top-q by FPC2.
    pub group_high: BTreeSet<String>,
    /// Top-q by FPC1 and bottom-q by FPC2.
    pub group_low: BTreeSet<String>,
    pub q: f64,
}

impl ExtremaGroups {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["site_id", "group"])?;
        for s in &self.group_high {
            w.write_record([s.as_str(), "high"])?;
        }
        for s in &self.group_low {
            w.write_record([s.as_str(), "low"])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `round(q n)` lowest and highest sites of a score column.
fn tails(scores: &[f64], ids: &[&str], q: f64) -> (BTreeSet<String>, BTreeSet<String>) {
    let order = ranked(scores, ids);
    let m = ((q * scores.len() as f64).round() as usize).min(scores.len());
    let bottom = order[..m].iter().map(|&i| ids[i].to_string()).collect();
    let top = order[order.len() - m..]
        .iter()
        .map(|&i| ids[i].to_string())
        .collect();
    (bottom, top)
}

/// Sites in the top `q` fraction of FPC1 that are also in the top (high
/// group) or bottom (low group) `q` fraction of FPC2, both taken over the
/// whole population.
pub fn extrema_groups(ids: &[&str], fpc1: &[f64], fpc2: &[f64], q: f64) -> ExtremaGroups {
    let (_, top1) = tails(fpc1, ids, q);
    let (bottom2, top2) = tails(fpc2, ids, q);
    ExtremaGroups {
        group_high: top1.intersection(&top2).cloned().collect(),
        group_low: top1.intersection(&bottom2).cloned().collect(),
        q,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteMaximum {
    pub site_id: String,
    pub max: f64,
    pub week_of_max: u32,
    pub fpc1_percentile: f64,
    /// `top` or `bottom` FPC1 decile.
    pub group: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxVsFpc1 {
    pub fit: LinearFit,
    pub result: AssociationResult,
    /// Maxima of the sites in the lowest and highest FPC1 deciles.
    pub extremes: Vec<SiteMaximum>,
}

/// Regresses each site's largest weekly value on its FPC1 percentile.
/// The result is significant positive when the slope is positive and the
/// slope test gives `p < alpha`.
pub fn max_vs_fpc1(
    series: &[WeeklySeries],
    scores: &[ScoreVector],
    alpha: f64,
) -> Result<MaxVsFpc1, AssociationError> {
    let by_site: BTreeMap<&str, &WeeklySeries> = series.iter().map(|s| (s.site_id.as_str(), s)).collect();
    let mut x = Vec::with_capacity(scores.len());
    let mut y = Vec::with_capacity(scores.len());
    let mut extremes = Vec::new();
    for sv in scores {
        let s = by_site
            .get(sv.site_id.as_str())
            .ok_or_else(|| AssociationError::MissingSite(sv.site_id.clone()))?;
        let (week, max) = s
            .values
            .iter()
            .fold(None, |acc: Option<(u32, f64)>, (w, v)| match acc {
                Some((_, m)) if m >= *v => acc,
                _ => Some((*w, *v)),
            })
            .ok_or_else(|| AssociationError::MissingSite(sv.site_id.clone()))?;
        let pct = *sv
            .percentile
            .first()
            .ok_or_else(|| AssociationError::MissingSite(sv.site_id.clone()))?;
        x.push(pct);
        y.push(max);
        let group = match sv.decile_bin.first() {
            Some(10) => Some("top"),
            Some(1) => Some("bottom"),
            _ => None,
        };
        if let Some(g) = group {
            extremes.push(SiteMaximum {
                site_id: sv.site_id.clone(),
                max,
                week_of_max: week,
                fpc1_percentile: pct,
                group: g.to_string(),
            });
        }
    }
    let fit = linreg_r2(&x, &y)?;
    let significant_positive = fit.slope > 0.0 && fit.p_value < alpha;
    Ok(MaxVsFpc1 {
        result: AssociationResult {
            subject: "global".into(),
            statistic: Statistic::RSquared,
            value: fit.r_squared,
            p_value: fit.p_value,
            n: fit.n,
            significant_positive,
            p_bin: if significant_positive {
                p_value_bin(fit.p_value, alpha)
            } else {
                None
            },
        },
        fit,
        extremes,
    })
}

/// Bin of a significant p-value: `[1e-10, alpha)` is split into ten
/// log10-equal bins numbered 1 (weakest) to 10, and every `p < 1e-10` lands
/// in bin 10. Non-significant p-values have no bin.
pub fn p_value_bin(p: f64, alpha: f64) -> Option<u32> {
    const FLOOR: f64 = 1e-10;
    if !(p < alpha) {
        return None;
    }
    if p < FLOOR || alpha <= FLOOR {
        return Some(10);
    }
    let x = (alpha.log10() - p.log10()) / (alpha.log10() - FLOOR.log10());
    Some((1 + (10.0 * x).floor() as u32).clamp(1, 10))
}

/// Spearman correlation of one site's curve with a covariate curve over
/// their common weeks.
pub fn site_covariate_correlation(
    subject: &str,
    curve: &BTreeMap<u32, f64>,
    covariate: &BTreeMap<u32, f64>,
    alpha: f64,
) -> Result<AssociationResult, AssociationError> {
    let (x, y): (Vec<f64>, Vec<f64>) = curve
        .iter()
        .filter_map(|(w, v)| covariate.get(w).map(|c| (*v, *c)))
        .filter(|(a, b)| a.is_finite() && b.is_finite())
        .unzip();
    if x.len() < 3 {
        return Err(AssociationError::InsufficientOverlap {
            site_id: subject.to_string(),
            n: x.len(),
        });
    }
    let (rho, p) = spearman(&x, &y)?;
    let significant_positive = rho > 0.0 && p < alpha;
    Ok(AssociationResult {
        subject: subject.to_string(),
        statistic: Statistic::SpearmanRho,
        value: rho,
        p_value: p,
        n: x.len(),
        significant_positive,
        p_bin: if significant_positive {
            p_value_bin(p, alpha)
        } else {
            None
        },
    })
}

pub fn write_associations_csv<W: Write>(out: W, rows: &[AssociationResult]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "subject",
        "statistic",
        "value",
        "p_value",
        "n",
        "significant_positive",
        "p_bin",
    ])?;
    for r in rows {
        w.write_record([
            r.subject.clone(),
            r.statistic.as_str().to_string(),
            r.value.to_string(),
            format!("{:?}", r.p_value),
            r.n.to_string(),
            r.significant_positive.to_string(),
            r.p_bin.map(|b| b.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
