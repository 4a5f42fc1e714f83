//! Raw monitoring data: fecal-coliform samples, site coordinates and
//! covariate streams (precipitation, river flow).
//!
//! All inputs are flat UTF-8 CSV files with a mandatory header row:
//!
//! | file                     | columns                                          |
//! |--------------------------|--------------------------------------------------|
//! | `samples.csv`            | `site_id,date,fc_count,salinity,temperature`     |
//! | `sites.csv`              | `site_id,latitude,longitude,province`            |
//! | covariate file           | `location_id,date,value`                         |
//! | `site_covariate_map.csv` | `site_id,location_id,kind`                       |
//!
//! Dates are ISO-8601 calendar dates. Once loaded, a [`LongitudinalStore`]
//! is never mutated and can be shared freely between threads.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SAMPLE_COLUMNS: [&str; 5] = ["site_id", "date", "fc_count", "salinity", "temperature"];
pub const SITE_COLUMNS: [&str; 4] = ["site_id", "latitude", "longitude", "province"];
pub const COVARIATE_COLUMNS: [&str; 3] = ["location_id", "date", "value"];
pub const SITE_COVARIATE_MAP_COLUMNS: [&str; 3] = ["site_id", "location_id", "kind"];

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("missing column `{0}` in header")]
    MissingColumn(String),
    #[error("duplicate site id `{0}`")]
    DuplicateSiteId(String),
    #[error("site `{site_id}`: coordinate out of range (latitude {latitude}, longitude {longitude})")]
    CoordinateOutOfRange {
        site_id: String,
        latitude: f64,
        longitude: f64,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// A row that failed validation, with its 1-based data-row number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowRejection {
    pub row: usize,
    pub reason: String,
}

impl From<RowRejection> for StoreError {
    fn from(r: RowRejection) -> Self {
        StoreError::MalformedRow {
            row: r.row,
            reason: r.reason,
        }
    }
}

/// Outcome of a lenient parse: every accepted record plus every rejected row.
#[derive(Debug, Clone)]
pub struct ParseOutcome<T> {
    pub records: Vec<T>,
    pub rejected: Vec<RowRejection>,
}

impl<T> ParseOutcome<T> {
    /// Fails with the first rejection, if any.
    pub fn into_strict(self) -> Result<Vec<T>, StoreError> {
        match self.rejected.into_iter().next() {
            Some(r) => Err(r.into()),
            None => Ok(self.records),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub site_id: String,
    pub date: NaiveDate,
    /// Bacteria per 100 mL.
    pub fc_count: f64,
    /// Per mille.
    pub salinity: Option<f64>,
    /// Degrees Celsius.
    pub temperature: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Province {
    BC,
    QC,
    NB,
    PE,
    NS,
    NL,
}

impl Province {
    pub const ALL: [Province; 6] = [
        Province::BC,
        Province::QC,
        Province::NB,
        Province::PE,
        Province::NS,
        Province::NL,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Province::BC => "BC",
            Province::QC => "QC",
            Province::NB => "NB",
            Province::PE => "PE",
            Province::NS => "NS",
            Province::NL => "NL",
        }
    }
}

impl fmt::Display for Province {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Province {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Province::ALL
            .into_iter()
            .find(|p| p.code().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown province `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteInfo {
    pub latitude: f64,
    pub longitude: f64,
    pub province: Province,
}

/// Site coordinates keyed by site id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SiteRegistry {
    sites: BTreeMap<String, SiteInfo>,
}

impl SiteRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, site_id: &str, info: SiteInfo) -> Result<(), StoreError> {
        if !(-90.0..=90.0).contains(&info.latitude) || !(-180.0..=180.0).contains(&info.longitude) {
            return Err(StoreError::CoordinateOutOfRange {
                site_id: site_id.to_string(),
                latitude: info.latitude,
                longitude: info.longitude,
            });
        }
        if self.sites.contains_key(site_id) {
            return Err(StoreError::DuplicateSiteId(site_id.to_string()));
        }
        self.sites.insert(site_id.to_string(), info);
        Ok(())
    }

    pub fn get(&self, site_id: &str) -> Option<&SiteInfo> {
        self.sites.get(site_id)
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    /// Iterates in site-id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &SiteInfo)> {
        self.sites.iter().map(|(k, v)| (k.as_str(), v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    /// Daily precipitation, mm.
    Precipitation,
    /// Daily mean discharge, m³/s.
    RiverFlow,
}

impl CovariateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CovariateKind::Precipitation => "precipitation",
            CovariateKind::RiverFlow => "river_flow",
        }
    }
}

impl fmt::Display for CovariateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CovariateKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "precipitation" => Ok(CovariateKind::Precipitation),
            "river_flow" | "flow" => Ok(CovariateKind::RiverFlow),
            other => Err(format!("unknown covariate kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateRecord {
    pub location_id: String,
    pub date: NaiveDate,
    pub value: f64,
    pub kind: CovariateKind,
}

/// Links monitoring sites to the covariate locations (weather stations,
/// river gauges) that describe them. At most one location per kind per site.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SiteCovariateMap {
    links: BTreeMap<(String, CovariateKind), String>,
}

impl SiteCovariateMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn link(&mut self, site_id: &str, kind: CovariateKind, location_id: &str) {
        self.links
            .insert((site_id.to_string(), kind), location_id.to_string());
    }

    pub fn location(&self, site_id: &str, kind: CovariateKind) -> Option<&str> {
        self.links.get(&(site_id.to_string(), kind)).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, CovariateKind, &str)> {
        self.links
            .iter()
            .map(|((site, kind), loc)| (site.as_str(), *kind, loc.as_str()))
    }
}

/// Immutable in-memory view of every input stream.
#[derive(Debug, Clone, Default)]
pub struct LongitudinalStore {
    pub samples: Vec<SampleRecord>,
    pub sites: SiteRegistry,
    pub precipitation: Vec<CovariateRecord>,
    pub river_flow: Vec<CovariateRecord>,
    pub covariate_map: SiteCovariateMap,
}

fn column_index(headers: &csv::StringRecord, expected: &[&str]) -> Result<Vec<usize>, StoreError> {
    expected
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h.trim() == *name)
                .ok_or_else(|| StoreError::MissingColumn((*name).to_string()))
        })
        .collect()
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input)
}

fn field(rec: &csv::StringRecord, idx: usize) -> &str {
    rec.get(idx).unwrap_or("")
}

fn parse_date(s: &str) -> Result<NaiveDate, String> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|e| format!("invalid date `{s}`: {e}"))
}

fn parse_real(name: &str, s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("invalid {name} `{s}`"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("non-finite {name} `{s}`"))
    }
}

fn parse_optional_real(name: &str, s: &str) -> Result<Option<f64>, String> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_real(name, s).map(Some)
    }
}

/// Parses `samples.csv`, collecting every rejected row.
pub fn parse_samples_lenient<R: Read>(input: R) -> Result<ParseOutcome<SampleRecord>, StoreError> {
    let mut rdr = reader(input);
    let cols = column_index(rdr.headers()?, &SAMPLE_COLUMNS)?;
    let mut out = ParseOutcome {
        records: Vec::new(),
        rejected: Vec::new(),
    };
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                out.rejected.push(RowRejection {
                    row,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let parsed = (|| -> Result<SampleRecord, String> {
            let site_id = field(&rec, cols[0]);
            if site_id.is_empty() {
                return Err("empty site_id".into());
            }
            let date = parse_date(field(&rec, cols[1]))?;
            let fc_count = parse_real("fc_count", field(&rec, cols[2]))?;
            if fc_count < 0.0 {
                return Err(format!("negative fc_count {fc_count}"));
            }
            Ok(SampleRecord {
                site_id: site_id.to_string(),
                date,
                fc_count,
                salinity: parse_optional_real("salinity", field(&rec, cols[3]))?,
                temperature: parse_optional_real("temperature", field(&rec, cols[4]))?,
            })
        })();
        match parsed {
            Ok(r) => out.records.push(r),
            Err(reason) => out.rejected.push(RowRejection { row, reason }),
        }
    }
    Ok(out)
}

/// Parses `samples.csv`; the first malformed row aborts.
pub fn parse_samples<R: Read>(input: R) -> Result<Vec<SampleRecord>, StoreError> {
    parse_samples_lenient(input)?.into_strict()
}

pub fn parse_sites<R: Read>(input: R) -> Result<SiteRegistry, StoreError> {
    let mut rdr = reader(input);
    let cols = column_index(rdr.headers()?, &SITE_COLUMNS)?;
    let mut registry = SiteRegistry::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let malformed = |reason: String| StoreError::MalformedRow { row, reason };
        let site_id = field(&rec, cols[0]);
        if site_id.is_empty() {
            return Err(malformed("empty site_id".into()));
        }
        let latitude = parse_real("latitude", field(&rec, cols[1])).map_err(malformed)?;
        let longitude = parse_real("longitude", field(&rec, cols[2])).map_err(malformed)?;
        let province: Province = field(&rec, cols[3]).parse().map_err(malformed)?;
        registry.insert(
            site_id,
            SiteInfo {
                latitude,
                longitude,
                province,
            },
        )?;
    }
    Ok(registry)
}

pub fn parse_covariates_lenient<R: Read>(
    input: R,
    kind: CovariateKind,
) -> Result<ParseOutcome<CovariateRecord>, StoreError> {
    let mut rdr = reader(input);
    let cols = column_index(rdr.headers()?, &COVARIATE_COLUMNS)?;
    let mut out = ParseOutcome {
        records: Vec::new(),
        rejected: Vec::new(),
    };
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let parsed = rec.map_err(|e| e.to_string()).and_then(|rec| {
            let location_id = field(&rec, cols[0]);
            if location_id.is_empty() {
                return Err("empty location_id".to_string());
            }
            let date = parse_date(field(&rec, cols[1]))?;
            let value = parse_real("value", field(&rec, cols[2]))?;
            if value < 0.0 {
                return Err(format!("negative {kind} value {value}"));
            }
            Ok(CovariateRecord {
                location_id: location_id.to_string(),
                date,
                value,
                kind,
            })
        });
        match parsed {
            Ok(r) => out.records.push(r),
            Err(reason) => out.rejected.push(RowRejection { row, reason }),
        }
    }
    Ok(out)
}

pub fn parse_covariates<R: Read>(input: R, kind: CovariateKind) -> Result<Vec<CovariateRecord>, StoreError> {
    parse_covariates_lenient(input, kind)?.into_strict()
}

pub fn parse_site_covariate_map<R: Read>(input: R) -> Result<SiteCovariateMap, StoreError> {
    let mut rdr = reader(input);
    let cols = column_index(rdr.headers()?, &SITE_COVARIATE_MAP_COLUMNS)?;
    let mut map = SiteCovariateMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let site = field(&rec, cols[0]);
        let loc = field(&rec, cols[1]);
        if site.is_empty() || loc.is_empty() {
            return Err(StoreError::MalformedRow {
                row,
                reason: "empty site_id or location_id".into(),
            });
        }
        let kind: CovariateKind = field(&rec, cols[2])
            .parse()
            .map_err(|reason| StoreError::MalformedRow { row, reason })?;
        map.link(site, kind, loc);
    }
    Ok(map)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_samples<W: Write>(out: W, samples: &[SampleRecord]) -> Result<(), StoreError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SAMPLE_COLUMNS)?;
    for s in samples {
        w.write_record([
            s.site_id.clone(),
            s.date.format("%Y-%m-%d").to_string(),
            s.fc_count.to_string(),
            fmt_opt(s.salinity),
            fmt_opt(s.temperature),
        ])?;
    }
    w.flush().map_err(|source| StoreError::Io {
        path: "<samples>".into(),
        source,
    })?;
    Ok(())
}

pub fn write_sites<W: Write>(out: W, registry: &SiteRegistry) -> Result<(), StoreError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SITE_COLUMNS)?;
    for (id, info) in registry.iter() {
        w.write_record([
            id.to_string(),
            info.latitude.to_string(),
            info.longitude.to_string(),
            info.province.to_string(),
        ])?;
    }
    w.flush().map_err(|source| StoreError::Io {
        path: "<sites>".into(),
        source,
    })?;
    Ok(())
}

pub fn write_covariates<W: Write>(out: W, records: &[CovariateRecord]) -> Result<(), StoreError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COVARIATE_COLUMNS)?;
    for r in records {
        w.write_record([
            r.location_id.clone(),
            r.date.format("%Y-%m-%d").to_string(),
            r.value.to_string(),
        ])?;
    }
    w.flush().map_err(|source| StoreError::Io {
        path: "<covariates>".into(),
        source,
    })?;
    Ok(())
}

pub fn write_site_covariate_map<W: Write>(out: W, map: &SiteCovariateMap) -> Result<(), StoreError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SITE_COVARIATE_MAP_COLUMNS)?;
    for (site, kind, loc) in map.iter() {
        w.write_record([site, loc, kind.as_str()])?;
    }
    w.flush().map_err(|source| StoreError::Io {
        path: "<site_covariate_map>".into(),
        source,
    })?;
    Ok(())
}

pub(crate) fn open(path: &Path) -> Result<std::fs::File, StoreError> {
    std::fs::File::open(path).map_err(|source| StoreError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Input file locations. Covariate files are optional.
#[derive(Debug, Clone)]
pub struct InputPaths<'a> {
    pub samples: &'a Path,
    pub sites: &'a Path,
    pub precipitation: Option<&'a Path>,
    pub river_flow: Option<&'a Path>,
    pub site_covariate_map: Option<&'a Path>,
}

impl LongitudinalStore {
    pub fn load(paths: &InputPaths<'_>) -> Result<Self, StoreError> {
        let samples = parse_samples(open(paths.samples)?)?;
        let sites = parse_sites(open(paths.sites)?)?;
        let precipitation = match paths.precipitation {
            Some(p) => parse_covariates(open(p)?, CovariateKind::Precipitation)?,
            None => Vec::new(),
        };
        let river_flow = match paths.river_flow {
            Some(p) => parse_covariates(open(p)?, CovariateKind::RiverFlow)?,
            None => Vec::new(),
        };
        let covariate_map = match paths.site_covariate_map {
            Some(p) => parse_site_covariate_map(open(p)?)?,
            None => SiteCovariateMap::new(),
        };
        Ok(Self {
            samples,
            sites,
            precipitation,
            river_flow,
            covariate_map,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "site_id,date,fc_count,salinity,temperature\n";

    #[test]
    fn sample_row_maps_fields() {
        let csv = format!("{HEADER}S1,2005-06-03,120,28.1,\n");
        let recs = parse_samples(csv.as_bytes()).unwrap();
        assert_eq!(
            recs,
            vec![SampleRecord {
                site_id: "S1".into(),
                date: NaiveDate::from_ymd_opt(2005, 6, 3).unwrap(),
                fc_count: 120.0,
                salinity: Some(28.1),
                temperature: None,
            }]
        );
    }

    #[test]
    fn negative_count_is_malformed() {
        let csv = format!("{HEADER}S1,2005-06-03,-4,,\n");
        match parse_samples(csv.as_bytes()) {
            Err(StoreError::MalformedRow { row, reason }) => {
                assert_eq!(row, 1);
                assert!(reason.contains("negative"));
            }
            other => panic!("expected MalformedRow, got {other:?}"),
        }
    }

    #[test]
    fn empty_body_gives_empty_list() {
        assert!(parse_samples(HEADER.as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn missing_column_detected() {
        let csv = "site_id,date,fc_count,salinity\nS1,2005-06-03,1,\n";
        assert!(matches!(
            parse_samples(csv.as_bytes()),
            Err(StoreError::MissingColumn(c)) if c == "temperature"
        ));
    }

    #[test]
    fn lenient_parse_enumerates_every_rejection() {
        let csv =
            format!("{HEADER}S1,2005-06-03,1,,\nS1,2005-13-03,1,,\nS2,2005-06-03,abc,,\nS3,2006-01-01,5,,\n");
        let out = parse_samples_lenient(csv.as_bytes()).unwrap();
        assert_eq!(out.records.len(), 2);
        let rows: Vec<usize> = out.rejected.iter().map(|r| r.row).collect();
        assert_eq!(rows, vec![2, 3]);
    }

    #[test]
    fn site_rows() {
        let csv = "site_id,latitude,longitude,province\nS1,48.42,-123.36,BC\n";
        let reg = parse_sites(csv.as_bytes()).unwrap();
        assert_eq!(
            reg.get("S1"),
            Some(&SiteInfo {
                latitude: 48.42,
                longitude: -123.36,
                province: Province::BC
            })
        );

        let dup = "site_id,latitude,longitude,province\nS1,48,-123,BC\nS1,49,-124,BC\n";
        assert!(matches!(
            parse_sites(dup.as_bytes()),
            Err(StoreError::DuplicateSiteId(s)) if s == "S1"
        ));

        let bad = "site_id,latitude,longitude,province\nS1,95,-123,BC\n";
        assert!(matches!(
            parse_sites(bad.as_bytes()),
            Err(StoreError::CoordinateOutOfRange { .. })
        ));
    }

    #[test]
    fn covariate_rows() {
        let p = "location_id,date,value\nP1,2005-06-01,12.5\n";
        let recs = parse_covariates(p.as_bytes(), CovariateKind::Precipitation).unwrap();
        assert_eq!(recs[0].value, 12.5);
        assert_eq!(recs[0].kind, CovariateKind::Precipitation);

        let neg = "location_id,date,value\nP1,2005-06-01,-1\n";
        assert!(matches!(
            parse_covariates(neg.as_bytes(), CovariateKind::Precipitation),
            Err(StoreError::MalformedRow { row: 1, .. })
        ));

        let f = "location_id,date,value\nR1,2005-06-01,830\n";
        let recs = parse_covariates(f.as_bytes(), CovariateKind::RiverFlow).unwrap();
        assert_eq!(recs[0].value, 830.0);
        assert_eq!(recs[0].kind, CovariateKind::RiverFlow);
    }

    #[test]
    fn covariate_map_rows() {
        let csv = "site_id,location_id,kind\nS1,P1,precipitation\nS1,R1,river_flow\n";
        let map = parse_site_covariate_map(csv.as_bytes()).unwrap();
        assert_eq!(map.location("S1", CovariateKind::Precipitation), Some("P1"));
        assert_eq!(map.location("S1", CovariateKind::RiverFlow), Some("R1"));
        assert_eq!(map.location("S2", CovariateKind::RiverFlow), None);
    }
}
