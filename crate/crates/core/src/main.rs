use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use coliform_fpca::pipeline::{run_through, RunConfig, RunSummary, Stage};
use coliform_fpca::store::Province;
use coliform_fpca::synth;

/// Seasonal FPCA of sparse fecal-coliform monitoring data.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate the input tables.
    Ingest(RunArgs),
    /// Apply exclusions and write weekly series and the exclusion report.
    Preprocess(RunArgs),
    /// Fit the sparse FPCA model and write model.json.
    Fit(RunArgs),
    /// Write per-site scores, percentiles and decile bins.
    Scores(RunArgs),
    /// Compute correlations, regressions and extrema groups.
    Associate(RunArgs),
    /// Write GeoJSON maps and SVG plots.
    Export(RunArgs),
    /// Every stage end to end.
    Run(RunArgs),
    /// Write a synthetic dataset with known truth.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML file with flat `key = value` settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sample table: site_id, date, fc_count, salinity, temperature.
    #[arg(long)]
    samples: Option<PathBuf>,
    /// Site table: site_id, latitude, longitude, province.
    #[arg(long)]
    sites: Option<PathBuf>,
    /// Daily precipitation: location_id, date, value.
    #[arg(long)]
    precipitation: Option<PathBuf>,
    /// Daily river flow: location_id, date, value.
    #[arg(long, alias = "river_flow")]
    river_flow: Option<PathBuf>,
    /// Site to covariate location links: site_id, location_id, kind.
    #[arg(long, alias = "site_covariate_map")]
    site_covariate_map: Option<PathBuf>,
    /// Directory for every output [default: out].
    #[arg(long, alias = "output_dir", short = 'o')]
    output_dir: Option<PathBuf>,
    /// Comma-separated province codes, e.g. `NS,PE`.
    #[arg(long, value_delimiter = ',')]
    provinces: Option<Vec<Province>>,
    /// Sites need a sample in or after this year [default: 1999].
    #[arg(long, alias = "cutoff_year")]
    cutoff_year: Option<i32>,
    /// Sites whose every recent count is below this are dropped [default: 2].
    #[arg(long, alias = "detection_limit")]
    detection_limit: Option<f64>,
    /// Consecutive missing weeks in the window that drop a site [default: 4].
    #[arg(long, alias = "max_gap")]
    max_gap: Option<u32>,
    /// Days summed before each sample for antecedent precipitation [default: 5].
    #[arg(long, alias = "precip_horizon_days")]
    precip_horizon_days: Option<u32>,
    /// Smallest K reaching this fraction of variance explained [default: 0.95].
    #[arg(long, alias = "fve_threshold")]
    fve_threshold: Option<f64>,
    /// Fixed number of components instead of the FVE rule.
    #[arg(long, alias = "k_override")]
    k_override: Option<usize>,
    /// Comma-separated candidate bandwidths in weeks for cross-validation.
    #[arg(long, alias = "bandwidth_candidates", value_delimiter = ',')]
    bandwidth_candidates: Option<Vec<f64>>,
    /// Fixed mean bandwidth in weeks (skips cross-validation).
    #[arg(long, alias = "mean_bandwidth")]
    mean_bandwidth: Option<f64>,
    /// Fixed covariance bandwidth in weeks (skips cross-validation).
    #[arg(long, alias = "cov_bandwidth")]
    cov_bandwidth: Option<f64>,
    /// Cross-validation folds [default: 5].
    #[arg(long, alias = "cv_folds")]
    cv_folds: Option<usize>,
    /// Seed for the cross-validation fold split.
    #[arg(long)]
    seed: Option<u64>,
    /// Significance level [default: 0.05].
    #[arg(long)]
    alpha: Option<f64>,
    /// Tail fraction for the extrema groups [default: 0.1].
    #[arg(long, alias = "extrema_q")]
    extrema_q: Option<f64>,
    /// Number of score bins [default: 10].
    #[arg(long, alias = "n_bins")]
    n_bins: Option<usize>,
}

macro_rules! overlay {
    ($cfg:ident, $args:ident; $($field:ident),*) => {
        $(if let Some(v) = $args.$field { $cfg.$field = v; })*
    };
    ($cfg:ident, $args:ident; opt $($field:ident),*) => {
        $(if $args.$field.is_some() { $cfg.$field = $args.$field; })*
    };
}

impl RunArgs {
    fn into_config(self) -> Result<RunConfig, String> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_toml_file(path)?,
            None => RunConfig::default(),
        };
        let a = self;
        overlay!(cfg, a; samples, sites, output_dir, cutoff_year, detection_limit, max_gap,
            precip_horizon_days, fve_threshold, cv_folds, seed, alpha, extrema_q, n_bins);
        overlay!(cfg, a; opt precipitation, river_flow, site_covariate_map, provinces, k_override,
            bandwidth_candidates, mean_bandwidth, cov_bandwidth);
        Ok(cfg)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, short = 'o')]
    out: PathBuf,
    #[arg(long, alias = "n_sites", default_value_t = 400)]
    n_sites: usize,
    #[arg(long, alias = "observe_prob", default_value_t = 0.6)]
    observe_prob: f64,
    #[arg(long, alias = "max_gap", default_value_t = 4)]
    max_gap: u32,
    #[arg(long, default_value_t = 20240531)]
    seed: u64,
}

/// Prints the run summary. A closed stdout (e.g. piped into `head`) is not
/// an error.
fn report(s: &RunSummary) -> io::Result<()> {
    let mut out = io::stdout().lock();
    writeln!(out, "samples: {}  sites: {}", s.n_samples, s.n_sites)?;
    if let Some(p) = &s.preprocessed {
        writeln!(
            out,
            "window: weeks {}..={}  retained series: {}",
            p.window.first,
            p.window.last,
            p.series.len()
        )?;
    }
    if let Some(f) = &s.fit {
        let m = &f.model;
        writeln!(
            out,
            "K = {}  FVE = {:.3}  sigma2 = {:.4}",
            m.k,
            m.fve[m.k - 1],
            m.sigma2
        )?;
    }
    if !s.associations.is_empty() {
        let sig = s.associations.iter().filter(|r| r.significant_positive).count();
        writeln!(
            out,
            "associations: {}  significant positive: {sig}",
            s.associations.len()
        )?;
    }
    for n in &s.notes {
        writeln!(out, "note: {n}")?;
    }
    for w in &s.written {
        writeln!(out, "wrote {}", w.display())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, stage) = match cli.command {
        Command::Ingest(a) => (a, Stage::Ingest),
        Command::Preprocess(a) => (a, Stage::Preprocess),
        Command::Fit(a) => (a, Stage::Fit),
        Command::Scores(a) => (a, Stage::Scores),
        Command::Associate(a) => (a, Stage::Associate),
        Command::Export(a) | Command::Run(a) => (a, Stage::Export),
        Command::Simulate(a) => {
            return match synth::write_dataset(&a.out, a.n_sites, a.observe_prob, a.max_gap, a.seed) {
                Ok(truth) => {
                    println!("wrote {} sites to {}", truth.site_ids.len(), a.out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: [simulate] {e}");
                    ExitCode::FAILURE
                }
            };
        }
    };
    let config = match args.into_config() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: [config] {e}");
            return ExitCode::from(2);
        }
    };
    match run_through(&config, stage) {
        Ok(summary) => {
            let _ = report(&summary);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
