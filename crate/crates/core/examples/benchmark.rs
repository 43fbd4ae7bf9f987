//! Repeated fits on fresh scenario data, summarized as mean and standard
//! deviation of test MSE per cell.
//!
//! cargo run --release --example benchmark -- S1,S6 2000 3 /tmp/xnn-bench

use std::path::PathBuf;

use xnn::bench::{run_benchmark, summarize, write_summary_csv, BenchConfig};
use xnn::data::ScenarioId;

fn main() -> xnn::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let scenarios = args
        .first()
        .map_or("S1", String::as_str)
        .split(',')
        .map(str::parse)
        .collect::<xnn::Result<Vec<ScenarioId>>>()?;
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let reps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let dir = PathBuf::from(args.get(3).map_or("xnn-bench", String::as_str));

    let cfg = BenchConfig { scenarios, sizes: vec![n], repetitions: reps, ..BenchConfig::default() };
    let records = run_benchmark(&cfg)?;
    for r in &records {
        match (&r.error, r.test_mse) {
            (None, Some(mse)) => println!("{} n={} rep {}: test MSE {mse:.4}, kept {}, {:.1}s", r.scenario, r.n, r.repetition, r.kept, r.seconds),
            (e, _) => println!("{} n={} rep {}: failed: {e:?}", r.scenario, r.n, r.repetition),
        }
    }
    let cells = summarize(&records);
    for c in &cells {
        println!("{} n={}: mean {:.4} sd {:.4} ({} failures)", c.scenario, c.n, c.mean_mse, c.std_mse, c.failures);
    }
    std::fs::create_dir_all(&dir)?;
    write_summary_csv(&dir.join("benchmark.csv"), &cells)?;
    Ok(())
}
