//! Bins FPC1 scores into deciles and writes them as a GeoJSON point map.
//!
//! ```text
//! cargo run --release --example decile_map_geojson > fpc1.geojson
//! ```

use coliform_fpca::export::{export_geojson, palette_color, validate_decile_geojson, BinnedSite};
use coliform_fpca::fpca::{fit, score_table, FpcaConfig};
use coliform_fpca::store::Province;
use coliform_fpca::synth::{simulate_kl, standard_params, synthetic_sites};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (series, truth) = simulate_kl(&standard_params(), 150, 0.6, 4, 11)?;
    let fitted = fit(&series, truth.window, &FpcaConfig::default())?;
    let scores = score_table(&fitted.scores, 10)?;
    let registry = synthetic_sites(&truth.site_ids, Province::BC, 11);

    let sites = BinnedSite::from_scores(&scores, 0);
    let text = export_geojson(&registry, &sites)?;
    let n = validate_decile_geojson(&text)?;
    for bin in 1..=10 {
        let count = sites.iter().filter(|s| s.bin == bin).count();
        eprintln!("bin {bin:>2} {}  {count} sites", palette_color(bin)?);
    }
    eprintln!("{n} features");
    println!("{text}");
    Ok(())
}
