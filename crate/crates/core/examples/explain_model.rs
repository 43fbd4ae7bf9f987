//! Fit S1, then write the explanation report and one SVG per retained
//! ridge function.
//!
//! cargo run --release --example explain_model -- 4000 /tmp/xnn-explain

use std::path::PathBuf;

use xnn::data::{scenario, split, ScenarioId, ScenarioSpec, SplitLabel};
use xnn::report::ExplainReport;
use xnn::rng::{seeded, Role};
use xnn::train::{fit_pipeline, Hyperparams};

fn main() -> xnn::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(4000);
    let dir = PathBuf::from(args.get(1).map_or("xnn-explain", String::as_str));

    let ds = scenario(&ScenarioSpec::new(ScenarioId::S1), n, &mut seeded(1, Role::TrainData))?;
    let ds = split(ds, 0.8, 0.2, &mut seeded(1, Role::Split))?;
    let hp = Hyperparams { lambda1: 1e-2, lambda2: 1e-2, ..Hyperparams::for_features(ds.p()) };
    let fit = fit_pipeline(&ds, &hp, &mut seeded(1, Role::Fit))?;

    let (xt, _) = ds.part(SplitLabel::Train);
    let report = ExplainReport::build(&fit.model, &xt, &ds.feature_names)?;
    std::fs::create_dir_all(&dir)?;
    report.save(&dir.join("report.json"))?;
    let plots = report.write_svgs(&dir.join("plots"))?;

    println!("mu = {:.4}", report.mu);
    for c in &report.components {
        let w: Vec<String> = c.projection.iter().map(|v| format!("{v:+.2}")).collect();
        println!("subnetwork {:2}  IR {:5.1}%  w = [{}]", c.index, 100.0 * c.importance_ratio, w.join(" "));
    }
    println!("wrote {} and {} plots", dir.join("report.json").display(), plots.len());
    Ok(())
}
