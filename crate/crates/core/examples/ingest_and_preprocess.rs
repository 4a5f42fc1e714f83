//! Loads a tiny hand-written dataset and shows what each exclusion rule does.
//!
//! ```text
//! cargo run --example ingest_and_preprocess
//! ```

use std::fs;

use coliform_fpca::preprocess::{preprocess, PreprocessConfig};
use coliform_fpca::store::{InputPaths, LongitudinalStore};

const SITES: &str = "\
site_id,latitude,longitude,province
NS-clean,44.65,-63.57,NS
NS-old,44.70,-63.60,NS
NS-low,44.80,-63.70,NS
NS-gappy,44.90,-63.80,NS
";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let mut samples = String::from("site_id,date,fc_count,salinity,temperature\n");
    // Weekly samples across the Atlantic window (weeks 19-45) in two years.
    for year in [2001, 2002] {
        for week in 19..=45u32 {
            let date = chrono::NaiveDate::from_yo_opt(year, 7 * (week - 1) + 3).unwrap();
            let count = 10.0 + f64::from(week - 19) * 4.0 + f64::from(year - 2001) * 6.0;
            samples.push_str(&format!("NS-clean,{date},{count},30.1,14.5\n"));
            samples.push_str(&format!("NS-low,{date},1.5,,\n"));
            if !(30..=34).contains(&week) {
                samples.push_str(&format!("NS-gappy,{date},{count},,\n"));
            }
        }
    }
    samples.push_str("NS-old,1996-07-02,240,,\nNS-old,1998-08-11,35,,\n");
    fs::write(dir.path().join("samples.csv"), samples)?;
    fs::write(dir.path().join("sites.csv"), SITES)?;

    let samples_path = dir.path().join("samples.csv");
    let sites_path = dir.path().join("sites.csv");
    let store = LongitudinalStore::load(&InputPaths {
        samples: &samples_path,
        sites: &sites_path,
        precipitation: None,
        river_flow: None,
        site_covariate_map: None,
    })?;
    println!(
        "loaded {} samples at {} sites",
        store.samples.len(),
        store.sites.len()
    );

    let out = preprocess(&store.samples, &store.sites, None, &PreprocessConfig::default())?;
    println!("window: weeks {}..={}", out.window.first, out.window.last);
    for (site, d) in &out.report.dispositions {
        println!("{site:>10}  {}", d.as_str());
    }
    for s in &out.series {
        let first: Vec<String> = s
            .values
            .iter()
            .take(4)
            .map(|(w, v)| format!("w{w}={v:.3}"))
            .collect();
        println!(
            "{}: {} weeks, log10 means {} ...",
            s.site_id,
            s.len(),
            first.join(" ")
        );
    }
    Ok(())
}
