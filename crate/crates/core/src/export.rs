//! Result writers: GeoJSON decile maps and SVG curve plots.
//!
//! Sites are coloured by bin with a fixed ten-step sequential palette running
//! from blue (bin 1, lowest scores) to red (bin 10, highest scores):
//!
//! | bin | colour    | bin | colour    |
//! |-----|-----------|-----|-----------|
//! | 1   | `#053061` | 6   | `#fddbc7` |
//! | 2   | `#2166ac` | 7   | `#f4a582` |
//! | 3   | `#4393c3` | 8   | `#d6604d` |
//! | 4   | `#92c5de` | 9   | `#b2182b` |
//! | 5   | `#d1e5f0` | 10  | `#67001f` |

use std::fmt::Write as _;

use serde_json::{json, Value};
use thiserror::Error;

use crate::fpca::{FpcaModel, ScoreVector};
use crate::store::SiteRegistry;

pub const PALETTE: [&str; 10] = [
    "#053061", "#2166ac", "#4393c3", "#92c5de", "#d1e5f0", "#fddbc7", "#f4a582", "#d6604d", "#b2182b",
    "#67001f",
];

#[derive(Debug, Error, PartialEq)]
pub enum ExportError {
    #[error("no coordinates for sites: {0:?}")]
    MissingCoordinates(Vec<String>),
    #[error("bin {0} outside 1..=10")]
    BinOutOfRange(u32),
}

pub fn palette_color(bin: u32) -> Result<&'static str, ExportError> {
    match bin {
        1..=10 => Ok(PALETTE[bin as usize - 1]),
        b => Err(ExportError::BinOutOfRange(b)),
    }
}

/// One mapped site.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedSite {
    pub site_id: String,
    pub bin: u32,
    pub score: f64,
    pub percentile: f64,
}

impl BinnedSite {
    /// Bins of component `k` (0-based) from a score table.
    pub fn from_scores(scores: &[ScoreVector], k: usize) -> Vec<BinnedSite> {
        scores
            .iter()
            .filter(|s| s.beta.len() > k)
            .map(|s| BinnedSite {
                site_id: s.site_id.clone(),
                bin: s.decile_bin[k],
                score: s.beta[k],
                percentile: s.percentile[k],
            })
            .collect()
    }
}

/// A FeatureCollection of Point features, coordinates ordered
/// `[longitude, latitude]`.
pub fn export_geojson(registry: &SiteRegistry, sites: &[BinnedSite]) -> Result<String, ExportError> {
    let missing: Vec<String> = sites
        .iter()
        .filter(|s| registry.get(&s.site_id).is_none())
        .map(|s| s.site_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(ExportError::MissingCoordinates(missing));
    }
    let features = sites
        .iter()
        .map(|s| {
            let info = registry.get(&s.site_id).expect("checked above");
            Ok(json!({
                "type": "Feature",
                "geometry": {
                    "type": "Point",
                    "coordinates": [info.longitude, info.latitude],
                },
                "properties": {
                    "site_id": s.site_id,
                    "bin": s.bin,
                    "color": palette_color(s.bin)?,
                    "score": s.score,
                    "percentile": s.percentile,
                },
            }))
        })
        .collect::<Result<Vec<Value>, ExportError>>()?;
    let doc = json!({ "type": "FeatureCollection", "features": features });
    Ok(serde_json::to_string_pretty(&doc).expect("json serializes"))
}

/// Structural check of a decile map: a FeatureCollection whose features are
/// Points with in-range `[lon, lat]` and the expected properties.
pub fn validate_decile_geojson(text: &str) -> Result<usize, String> {
    let doc: Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if doc["type"] != "FeatureCollection" {
        return Err("top-level type is not FeatureCollection".into());
    }
    let features = doc["features"].as_array().ok_or("features is not an array")?;
    for (i, f) in features.iter().enumerate() {
        let err = |m: &str| format!("feature {i}: {m}");
        if f["type"] != "Feature" {
            return Err(err("type is not Feature"));
        }
        if f["geometry"]["type"] != "Point" {
            return Err(err("geometry is not a Point"));
        }
        let c = f["geometry"]["coordinates"]
            .as_array()
            .ok_or_else(|| err("coordinates missing"))?;
        let nums: Vec<f64> = c.iter().filter_map(Value::as_f64).collect();
        if nums.len() != 2 || c.len() != 2 {
            return Err(err("coordinates must be [lon, lat]"));
        }
        if !(-180.0..=180.0).contains(&nums[0]) || !(-90.0..=90.0).contains(&nums[1]) {
            return Err(err("coordinates out of range"));
        }
        let p = &f["properties"];
        let bin = p["bin"].as_u64().ok_or_else(|| err("bin missing"))?;
        if !(1..=10).contains(&bin) {
            return Err(err("bin out of range"));
        }
        if p["color"].as_str() != Some(PALETTE[bin as usize - 1]) {
            return Err(err("color does not match bin"));
        }
        if p["site_id"].as_str().is_none()
            || p["score"].as_f64().is_none()
            || p["percentile"].as_f64().is_none()
        {
            return Err(err("properties incomplete"));
        }
    }
    Ok(features.len())
}

#[derive(Debug, Clone)]
pub struct PlotSeries {
    pub label: Option<String>,
    pub points: Vec<(f64, f64)>,
    pub color: String,
    pub dashed: bool,
    /// `class` attribute of the polyline, used to tell curve roles apart.
    pub class: &'static str,
}

#[derive(Debug, Clone)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<PlotSeries>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 170.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;

impl LinePlot {
    pub fn render(&self) -> String {
        let pts = self
            .series
            .iter()
            .flat_map(|s| s.points.iter())
            .filter(|(x, y)| x.is_finite() && y.is_finite());
        let (mut x0, mut x1, mut y0, mut y1) =
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in pts {
            x0 = x0.min(*x);
            x1 = x1.max(*x);
            y0 = y0.min(*y);
            y1 = y1.max(*y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 == x0 {
            x1 = x0 + 1.0;
        }
        if y1 == y0 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let pad = 0.05 * (y1 - y0);
        let (y0, y1) = (y0 - pad, y1 + pad);
        let pw = WIDTH - MARGIN_L - MARGIN_R;
        let ph = HEIGHT - MARGIN_T - MARGIN_B;
        let sx = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| MARGIN_T + (1.0 - (y - y0) / (y1 - y0)) * ph;

        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            MARGIN_L + pw / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            out,
            r#"<rect class="frame" x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            let _ = writeln!(
                out,
                r#"<text class="tick" x="{:.1}" y="{:.1}" text-anchor="middle">{:.0}</text>"#,
                sx(xv),
                MARGIN_T + ph + 16.0,
                xv
            );
            let _ = writeln!(
                out,
                r#"<text class="tick" x="{:.1}" y="{:.1}" text-anchor="end">{:.2}</text>"#,
                MARGIN_L - 6.0,
                sy(yv) + 4.0,
                yv
            );
        }
        let _ = writeln!(
            out,
            r#"<text class="x-label" x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            MARGIN_L + pw / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text class="y-label" transform="translate(18 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
            MARGIN_T + ph / 2.0,
            escape(&self.y_label)
        );
        let mut legend_y = MARGIN_T + 10.0;
        for s in &self.series {
            let coords: Vec<String> = s
                .points
                .iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
                .collect();
            let dash = if s.dashed {
                r#" stroke-dasharray="6 4""#
            } else {
                ""
            };
            let _ = writeln!(
                out,
                r#"<polyline class="{}" fill="none" stroke="{}" stroke-width="1.6"{dash} points="{}"/>"#,
                s.class,
                s.color,
                coords.join(" ")
            );
            if let Some(label) = &s.label {
                let lx = WIDTH - MARGIN_R + 12.0;
                let _ = writeln!(
                    out,
                    r#"<g class="legend-entry"><line x1="{lx}" y1="{legend_y}" x2="{}" y2="{legend_y}" stroke="{}" stroke-width="2"{dash}/><text x="{}" y="{}">{}</text></g>"#,
                    lx + 22.0,
                    s.color,
                    lx + 28.0,
                    legend_y + 4.0,
                    escape(label)
                );
                legend_y += 18.0;
            }
        }
        out.push_str("</svg>\n");
        out
    }
}

const COMPONENT_COLORS: [&str; 6] = ["#000000", "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#8c564b"];

pub fn mean_plot(model: &FpcaModel) -> LinePlot {
    LinePlot {
        title: "Mean function".into(),
        x_label: "week".into(),
        y_label: "log10 level".into(),
        series: vec![PlotSeries {
            label: Some("mean".into()),
            points: model.grid.iter().copied().zip(model.mu.iter().copied()).collect(),
            color: "#000000".into(),
            dashed: false,
            class: "mean",
        }],
    }
}

/// The first `K` eigenfunctions with their share of variance in the legend.
pub fn fpc_plot(model: &FpcaModel) -> LinePlot {
    let total: f64 = model.lambda.iter().sum();
    let series = (0..model.k)
        .map(|c| PlotSeries {
            label: Some(format!("FPC{} ({:.1}%)", c + 1, 100.0 * model.lambda[c] / total)),
            points: model
                .grid
                .iter()
                .copied()
                .zip(model.phi[c].iter().copied())
                .collect(),
            color: COMPONENT_COLORS[c % COMPONENT_COLORS.len()].into(),
            dashed: false,
            class: "component",
        })
        .collect();
    LinePlot {
        title: format!(
            "Functional principal components (cumulative FVE {:.1}%)",
            100.0 * model.fve.get(model.k.saturating_sub(1)).copied().unwrap_or(0.0)
        ),
        x_label: "week".into(),
        y_label: "eigenfunction value".into(),
        series,
    }
}

/// Reconstructed site curves in `color` with the group mean dashed black.
pub fn group_plot(title: &str, y_label: &str, grid: &[f64], curves: &[Vec<f64>], color: &str) -> LinePlot {
    let mut series: Vec<PlotSeries> = curves
        .iter()
        .map(|c| PlotSeries {
            label: None,
            points: grid.iter().copied().zip(c.iter().copied()).collect(),
            color: color.into(),
            dashed: false,
            class: "site",
        })
        .collect();
    if !curves.is_empty() {
        let mean: Vec<f64> = (0..grid.len())
            .map(|j| curves.iter().map(|c| c[j]).sum::<f64>() / curves.len() as f64)
            .collect();
        series.push(PlotSeries {
            label: Some(format!("mean of {} sites", curves.len())),
            points: grid.iter().copied().zip(mean).collect(),
            color: "#000000".into(),
            dashed: true,
            class: "group-mean",
        });
    }
    LinePlot {
        title: title.into(),
        x_label: "week".into(),
        y_label: y_label.into(),
        series,
    }
}

/// A single weekly covariate curve, e.g. river discharge.
pub fn covariate_plot(title: &str, y_label: &str, points: Vec<(f64, f64)>) -> LinePlot {
    LinePlot {
        title: title.into(),
        x_label: "week".into(),
        y_label: y_label.into(),
        series: vec![PlotSeries {
            label: None,
            points,
            color: "#1f77b4".into(),
            dashed: false,
            class: "covariate",
        }],
    }
}
