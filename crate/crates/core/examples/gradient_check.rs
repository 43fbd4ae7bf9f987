//! Compare analytic gradients with central differences over random models,
//! at two step sizes, and show that a corrupted gradient is caught.
//!
//! cargo run --release --example gradient_check

use xnn::cli::FD_TOLERANCE;
use xnn::diff::fd_check_suite;

fn main() -> xnn::Result<()> {
    for eps in [1e-5, 1e-6] {
        let r = fd_check_suite(0, 24, eps, false)?;
        let verdict = if r.max_rel_err <= FD_TOLERANCE { "pass" } else { "FAIL" };
        println!("eps {eps:e}: max relative error {:.2e} over {} configurations: {verdict}", r.max_rel_err, r.errors.len());
    }
    let bad = fd_check_suite(0, 24, 1e-6, true)?;
    let smallest = bad.errors.iter().copied().fold(f64::INFINITY, f64::min);
    println!("corrupted gradient: smallest per-configuration error {smallest:.2e} (every configuration flagged: {})", smallest > FD_TOLERANCE);
    Ok(())
}
