//! Repeated simulation benchmarks: for each scenario, size and repetition,
//! fit the pipeline on fresh data and score it on a fresh test set.

use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{scenario, split, ScenarioId, ScenarioSpec, SplitLabel};
use crate::error::{Result, XnnError};
use crate::rng::{stream, Role};
use crate::train::{evaluate, fit_pipeline, grid_search, FitOutcome, Hyperparams, LAMBDA_GRID};

pub const TEST_ROWS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub scenarios: Vec<ScenarioId>,
    pub sizes: Vec<usize>,
    pub repetitions: usize,
    pub seed: u64,
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_rows: usize,
    /// Tune `(lambda1, lambda2)` per repetition instead of using `hp` as is.
    pub grid_search: bool,
    pub jobs: usize,
    pub hp: Hyperparams,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            scenarios: vec![ScenarioId::S1],
            sizes: vec![1000, 10_000],
            repetitions: 10,
            seed: 0,
            train_frac: 0.8,
            val_frac: 0.2,
            test_rows: TEST_ROWS,
            grid_search: false,
            jobs: 1,
            hp: Hyperparams::default(),
        }
    }
}

/// Result of one repetition. `error` is set instead of the metrics when the
/// run failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scenario: ScenarioId,
    pub n: usize,
    pub repetition: usize,
    pub test_mse: Option<f64>,
    pub test_mse_unpruned: Option<f64>,
    pub kept: usize,
    pub epochs: usize,
    pub max_ortho_residual: f64,
    /// Per true direction, the |cosine| with its greedily matched retained
    /// projection index. Empty for scenarios without known directions.
    pub recovery: Vec<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub scenario: ScenarioId,
    pub n: usize,
    pub runs: usize,
    pub failures: usize,
    pub mean_mse: f64,
    /// Sample standard deviation over successful runs, 0 for a single run.
    pub std_mse: f64,
}

/// Greedy one-to-one matching of true directions (columns of `truth`) to
/// the columns `kept` of `w`: repeatedly pairs the largest remaining
/// |cosine|. Returns the matched |cosine| per true direction, 0 when
/// nothing was left to match.
pub fn recovery_cosines(truth: &DMatrix<f64>, w: &DMatrix<f64>, kept: &[usize]) -> Vec<f64> {
    let m = truth.ncols();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(m * kept.len());
    for a in 0..m {
        let t = truth.column(a);
        for &b in kept {
            let c = w.column(b);
            let denom = t.norm() * c.norm();
            let cos = if denom > 0.0 { (t.dot(&c) / denom).abs() } else { 0.0 };
            pairs.push((cos, a, b));
        }
    }
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut out = vec![0.0; m];
    let mut used_true = vec![false; m];
    let mut used_fit: Vec<usize> = Vec::new();
    for (cos, a, b) in pairs {
        if !used_true[a] && !used_fit.contains(&b) {
            out[a] = cos;
            used_true[a] = true;
            used_fit.push(b);
        }
    }
    out
}

/// A fitted repetition with its test-set scores.
#[derive(Debug, Clone)]
pub struct Repetition {
    pub fit: FitOutcome,
    pub record: RunRecord,
}

/// Runs one `(scenario, n, repetition)` cell. Data, split, test set and fit
/// each draw from their own stream, so any cell can be rerun alone.
pub fn run_repetition(cfg: &BenchConfig, id: ScenarioId, n: usize, rep: usize) -> Result<Repetition> {
    let clock = Instant::now();
    let spec = ScenarioSpec::new(id);
    let (s, r) = (id.index(), rep as u64);
    let ds = scenario(&spec, n, &mut stream(cfg.seed, s, r, Role::TrainData))?;
    let ds = split(ds, cfg.train_frac, cfg.val_frac, &mut stream(cfg.seed, s, r, Role::Split))?;
    let test = scenario(&spec, cfg.test_rows, &mut stream(cfg.seed, s, r, Role::TestData))?;
    let hp = Hyperparams { k: cfg.hp.k.min(ds.p()), ..cfg.hp.clone() };
    let fit_rng = stream(cfg.seed, s, r, Role::Fit);
    let fit = if cfg.grid_search {
        grid_search(&ds, &hp, &LAMBDA_GRID, &LAMBDA_GRID, &fit_rng, 1)?.0
    } else {
        fit_pipeline(&ds, &hp, &mut fit_rng.clone())?
    };
    let (xt, yt) = test.part(SplitLabel::Train);
    let after = evaluate(&fit.model, &xt, &yt, test.task)?;
    let before = evaluate(&fit.unpruned, &xt, &yt, test.task)?;
    let recovery = spec.true_directions().map_or_else(Vec::new, |t| recovery_cosines(&t, &fit.model.w, &fit.kept));
    let record = RunRecord {
        scenario: id,
        n,
        repetition: rep,
        test_mse: after.mse,
        test_mse_unpruned: before.mse,
        kept: fit.kept.len(),
        epochs: fit.fit_history.len(),
        max_ortho_residual: fit.max_ortho_residual(),
        recovery,
        lambda1: fit.hp.lambda1,
        lambda2: fit.hp.lambda2,
        seconds: clock.elapsed().as_secs_f64(),
        error: None,
    };
    Ok(Repetition { fit, record })
}

fn failed(id: ScenarioId, n: usize, rep: usize, e: XnnError) -> RunRecord {
    RunRecord {
        scenario: id,
        n,
        repetition: rep,
        test_mse: None,
        test_mse_unpruned: None,
        kept: 0,
        epochs: 0,
        max_ortho_residual: f64::NAN,
        recovery: Vec::new(),
        lambda1: f64::NAN,
        lambda2: f64::NAN,
        seconds: 0.0,
        error: Some(e.to_string()),
    }
}

/// Runs every cell of `cfg`, up to `cfg.jobs` at a time. Failed runs are
/// recorded and do not stop the others. Records come back in
/// `(scenario, n, repetition)` order.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<Vec<RunRecord>> {
    if cfg.repetitions == 0 || cfg.scenarios.is_empty() || cfg.sizes.is_empty() {
        return Err(XnnError::Config("benchmark needs at least one scenario, size and repetition".into()));
    }
    cfg.hp.validate()?;
    let cells: Vec<(ScenarioId, usize, usize)> = cfg
        .scenarios
        .iter()
        .flat_map(|&id| cfg.sizes.iter().flat_map(move |&n| (0..cfg.repetitions).map(move |r| (id, n, r))))
        .collect();
    let run = |&(id, n, rep): &(ScenarioId, usize, usize)| {
        run_repetition(cfg, id, n, rep).map_or_else(|e| failed(id, n, rep, e), |r| r.record)
    };
    if cfg.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| XnnError::Config(format!("thread pool: {e}")))?;
        Ok(pool.install(|| cells.par_iter().map(run).collect()))
    } else {
        Ok(cells.iter().map(run).collect())
    }
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One summary per `(scenario, n)`, in first-seen order.
pub fn summarize(records: &[RunRecord]) -> Vec<CellSummary> {
    let mut keys: Vec<(ScenarioId, usize)> = Vec::new();
    for r in records {
        if !keys.contains(&(r.scenario, r.n)) {
            keys.push((r.scenario, r.n));
        }
    }
    keys.into_iter()
        .map(|(id, n)| {
            let cell: Vec<&RunRecord> = records.iter().filter(|r| r.scenario == id && r.n == n).collect();
            let mses: Vec<f64> = cell.iter().filter_map(|r| r.test_mse).collect();
            let (mean_mse, std_mse) = mean_std(&mses);
            CellSummary { scenario: id, n, runs: cell.len(), failures: cell.len() - mses.len(), mean_mse, std_mse }
        })
        .collect()
}

pub fn write_summary_csv(path: &Path, cells: &[CellSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scenario", "n", "runs", "failures", "mean_mse", "std_mse"])?;
    for c in cells {
        w.write_record([
            c.scenario.to_string(),
            c.n.to_string(),
            c.runs.to_string(),
            c.failures.to_string(),
            c.mean_mse.to_string(),
            c.std_mse.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_runs_csv(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "scenario", "n", "repetition", "test_mse", "test_mse_unpruned", "kept", "epochs", "max_ortho_residual",
        "min_recovery", "lambda1", "lambda2", "seconds", "error",
    ])?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    for r in records {
        let min_rec = r.recovery.iter().copied().reduce(f64::min);
        w.write_record([
            r.scenario.to_string(),
            r.n.to_string(),
            r.repetition.to_string(),
            opt(r.test_mse),
            opt(r.test_mse_unpruned),
            r.kept.to_string(),
            r.epochs.to_string(),
            r.max_ortho_residual.to_string(),
            opt(min_rec),
            r.lambda1.to_string(),
            r.lambda2.to_string(),
            format!("{:.3}", r.seconds),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_matching_is_one_to_one() {
        let truth = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
        let w = DMatrix::from_column_slice(3, 3, &[0.0, -1.0, 0.0, 0.8, 0.6, 0.0, 0.0, 0.0, 1.0]);
        let c = recovery_cosines(&truth, &w, &[0, 1, 2]);
        assert_eq!(c, vec![0.8, 1.0]);
        let c = recovery_cosines(&truth, &w, &[0]);
        assert_eq!(c, vec![0.0, 1.0]);
    }

    #[test]
    fn mean_and_sample_std() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn failures_are_recorded_and_summarized() {
        let cfg = BenchConfig {
            sizes: vec![3],
            repetitions: 2,
            test_rows: 50,
            hp: Hyperparams { max_epochs: 2, finetune_epochs: 1, ..Hyperparams::default() },
            ..BenchConfig::default()
        };
        let records = run_benchmark(&cfg).unwrap();
        assert_eq!(records.len(), 2);
        assert!(records.iter().all(|r| r.error.is_some() && r.test_mse.is_none()));
        let s = summarize(&records);
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].runs, s[0].failures), (2, 2));
    }

    #[test]
    fn single_repetition_is_deterministic() {
        let cfg = BenchConfig {
            sizes: vec![200],
            repetitions: 1,
            test_rows: 200,
            hp: Hyperparams { max_epochs: 3, finetune_epochs: 2, ..Hyperparams::default() },
            ..BenchConfig::default()
        };
        let a = run_benchmark(&cfg).unwrap();
        let b = run_benchmark(&cfg).unwrap();
        assert!(a[0].error.is_none(), "{:?}", a[0].error);
        assert_eq!(a[0].test_mse, b[0].test_mse);
        assert_eq!(a[0].recovery.len(), 4);
    }
}
