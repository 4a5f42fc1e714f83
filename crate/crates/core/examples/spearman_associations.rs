//! Rank correlations, the maximum-vs-FPC1 regression and the extrema groups
//! on a simulated fit.
//!
//! ```text
//! cargo run --release --example spearman_associations
//! ```

use std::collections::BTreeMap;

use coliform_fpca::association::{extrema_groups, max_vs_fpc1, site_covariate_correlation, spearman};
use coliform_fpca::fpca::{fit, score_table, FpcaConfig};
use coliform_fpca::synth::{seasonal, simulate_kl, standard_params};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (rho, p) = spearman(&[1.0, 2.0, 2.0, 3.0, 5.0], &[2.0, 1.0, 4.0, 3.0, 6.0])?;
    println!("toy data: rho = {rho:.4}, p = {p:.4}");

    let (series, truth) = simulate_kl(&standard_params(), 200, 0.6, 4, 7)?;
    let fitted = fit(&series, truth.window, &FpcaConfig::default())?;
    let scores = score_table(&fitted.scores, 10)?;

    let m = max_vs_fpc1(&series, &scores, 0.05)?;
    println!(
        "max vs FPC1: slope {:.3}, R^2 {:.3}, p {:.2e}, significant positive: {}",
        m.fit.slope, m.fit.r_squared, m.fit.p_value, m.result.significant_positive
    );
    for e in m.extremes.iter().take(3) {
        println!(
            "  {} ({} decile): max {:.2} in week {}",
            e.site_id, e.group, e.max, e.week_of_max
        );
    }

    if fitted.model.k >= 2 {
        let ids: Vec<&str> = scores.iter().map(|s| s.site_id.as_str()).collect();
        let f1: Vec<f64> = scores.iter().map(|s| s.beta[0]).collect();
        let f2: Vec<f64> = scores.iter().map(|s| s.beta[1]).collect();
        let g = extrema_groups(&ids, &f1, &f2, 0.10);
        println!("extrema groups: high {:?}, low {:?}", g.group_high, g.group_low);
    }

    // A covariate that peaks with the seasonal cycle.
    let covariate: BTreeMap<u32, f64> = (1..=52)
        .map(|w| (w, 10.0 + 5.0 * seasonal(f64::from(w))))
        .collect();
    let site = &series[0];
    let r = site_covariate_correlation(
        &format!("{}/precipitation", site.site_id),
        &site.values,
        &covariate,
        0.05,
    )?;
    println!(
        "{}: rho {:.3}, p {:.3}, n {}, bin {:?}",
        r.subject, r.value, r.p_value, r.n, r.p_bin
    );
    Ok(())
}
