//! Writes a synthetic dataset with covariates, runs every stage and lists
//! the outputs.
//!
//! ```text
//! cargo run --release --example full_pipeline [output-dir]
//! ```

use std::path::PathBuf;

use coliform_fpca::pipeline::{run_pipeline, RunConfig};
use coliform_fpca::synth::write_dataset;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tmp = tempfile::tempdir()?;
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| tmp.path().to_path_buf());
    let truth = write_dataset(&dir, 200, 0.6, 4, 20240531)?;
    println!("simulated {} sites into {}", truth.site_ids.len(), dir.display());

    let config = RunConfig::from_toml_file(&dir.join("run.toml"))?;
    let summary = run_pipeline(&config)?;
    let model = &summary.fit.as_ref().expect("fit ran").model;
    println!("K = {}, FVE = {:.3}", model.k, model.fve[model.k - 1]);
    let significant = summary
        .associations
        .iter()
        .filter(|r| r.significant_positive)
        .count();
    println!(
        "{} associations, {significant} significant positive",
        summary.associations.len()
    );
    for note in &summary.notes {
        println!("note: {note}");
    }
    for w in &summary.written {
        println!("  {}", config.output_dir.join(w).display());
    }
    Ok(())
}
