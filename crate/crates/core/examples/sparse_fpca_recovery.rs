//! Simulates sparse sites from a known two-component model, fits the
//! functional PCA and reports how well the truth is recovered.
//!
//! ```text
//! cargo run --release --example sparse_fpca_recovery
//! ```

use coliform_fpca::fpca::{fit, FpcaConfig};
use coliform_fpca::synth::{recovery_report, simulate_kl, standard_params};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (series, truth) = simulate_kl(&standard_params(), 400, 0.6, 4, 20240531)?;
    let mean_obs = series.iter().map(|s| s.len()).sum::<usize>() as f64 / series.len() as f64;
    println!(
        "{} sites, {mean_obs:.1} observed weeks per site on average",
        series.len()
    );

    let fitted = fit(&series, truth.window, &FpcaConfig::default())?;
    let m = &fitted.model;
    if let Some(b) = m.bandwidths {
        println!(
            "bandwidths: mean {:.2}, covariance {:.2}, diagonal {:.2}",
            b.mean, b.covariance, b.diagonal
        );
    }
    println!(
        "K = {}  sigma2 = {:.4} (true {})",
        m.k, m.sigma2, truth.sigma2_true
    );
    for (k, (l, f)) in m.lambda.iter().zip(&m.fve).take(4).enumerate() {
        println!("  lambda_{} = {l:.4}  cumulative FVE = {f:.4}", k + 1);
    }

    let report = recovery_report(m, &fitted.scores, &truth)?;
    println!("max |mu - mu_true| = {:.4}", report.mu_max_error);
    for c in &report.components {
        println!(
            "  FPC{}: |<phi, phi_true>| = {:.4}, score correlation = {:.4}, lambda rel. error = {:.3}",
            c.k, c.alignment, c.score_correlation, c.lambda_rel_error
        );
    }
    Ok(())
}
