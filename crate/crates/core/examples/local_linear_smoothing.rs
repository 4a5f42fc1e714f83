//! Smooths a noisy seasonal curve with a cross-validated bandwidth and
//! compares it with an undersmoothed and an oversmoothed fit.
//!
//! ```text
//! cargo run --example local_linear_smoothing
//! ```

use std::f64::consts::PI;

use coliform_fpca::smooth::{
    cv_errors_1d, geometric_candidates, local_linear_1d, select_bandwidth_cv, Bandwidth, ScatterPoint1D,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let truth = |t: f64| 2.0 + (2.0 * PI * t / 52.0).sin();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let points: Vec<ScatterPoint1D> = (0..300)
        .map(|_| {
            let t = f64::from(rng.random_range(1..=52u32));
            let e: f64 = rng.sample(StandardNormal);
            ScatterPoint1D::new(t, truth(t) + 0.3 * e)
        })
        .collect();
    let grid: Vec<f64> = (1..=52).map(f64::from).collect();
    let candidates = geometric_candidates(1.5, 26.0, 12);

    println!("{:>8}  {:>10}", "h", "cv error");
    for (h, e) in cv_errors_1d(&points, &candidates, 5, 7)? {
        match e {
            Some(e) => println!("{h:>8.3}  {e:>10.5}"),
            None => println!("{h:>8.3}  {:>10}", "degenerate"),
        }
    }
    let h = select_bandwidth_cv(&points, &candidates, &grid, 5, 7)?;
    println!("chosen h = {:.3} weeks", h.get());

    for (label, bw) in [
        ("cv", h.get()),
        ("h/4", (h.get() / 4.0).max(1.5)),
        ("4h", 4.0 * h.get()),
    ] {
        let fit = local_linear_1d(&points, Bandwidth::new(bw)?, &grid)?;
        let ise = fit
            .iter()
            .zip(&grid)
            .map(|(f, t)| (f - truth(*t)).powi(2))
            .sum::<f64>()
            / 52.0;
        println!("{label:>4} (h = {bw:6.3}): mean squared error vs truth {ise:.5}");
    }
    Ok(())
}
