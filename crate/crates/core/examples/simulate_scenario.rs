//! Generate a simulation scenario, write it as CSV with a manifest, and
//! check the feature correlation mechanism.
//!
//! cargo run --release --example simulate_scenario -- S2 5000 3 /tmp/xnn-sim

use std::path::PathBuf;

use xnn::data::{gen_features, scenario, Manifest, ScenarioId, ScenarioSpec};
use xnn::rng::{seeded, Role};

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn main() -> xnn::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let id: ScenarioId = args.first().map(|s| s.parse()).transpose()?.unwrap_or(ScenarioId::S1);
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let dir = PathBuf::from(args.get(3).map_or("xnn-sim", String::as_str));

    for t in [0.0, 1.0] {
        let x = gen_features(n, 10, t, &mut seeded(seed, Role::Check));
        let mut r = Vec::new();
        for a in 0..10 {
            for b in a + 1..10 {
                r.push(correlation(x.column(a).as_slice(), x.column(b).as_slice()));
            }
        }
        let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        println!("t = {t}: pairwise correlations in [{lo:.3}, {hi:.3}], expected {}", t * t / (1.0 + t * t));
    }

    let spec = ScenarioSpec::new(id);
    let ds = scenario(&spec, n, &mut seeded(seed, Role::TrainData))?;
    let var = ds.y.variance();
    println!("{id}: n = {n}, mean y = {:.4}, var y = {var:.4} (noise variance 1)", ds.y.mean());

    std::fs::create_dir_all(&dir)?;
    let stem = format!("{id}_n{n}_seed{seed}");
    ds.write_csv(&dir.join(format!("{stem}.csv")))?;
    let mut columns = ds.feature_names.clone();
    columns.push("y".into());
    let manifest = Manifest { scenario: id, n, seed, train_frac: 0.8, val_frac: 0.2, noise_sd: spec.noise_sd, columns };
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&manifest)?)?;
    println!("wrote {}", dir.join(format!("{stem}.csv")).display());
    Ok(())
}
