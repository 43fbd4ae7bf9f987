//! The SOS-BP training loop, pruning, fine-tuning and evaluation.
//!
//! Each mini-batch step computes the penalized loss and its gradients with
//! batch normalization moments, moves `W` by a Cayley step along its
//! gradient, moves every other parameter by Adam, and stores the batch
//! moments in the model (momentum zero). After every epoch the moments are
//! recomputed on the full training set and the validation score decides
//! early stopping.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitLabel, Task};
use crate::diff::batch_eval;
use crate::error::{Result, XnnError};
use crate::model::{
    init_model, orthogonality_residual, sigmoid, ActivationKind, LinkKind, NormState, XnnModel, NORM_EPSILON,
};
use crate::optim::{AdamState, CayleyStepper};
use crate::rng::XnnRng;

/// Every tunable of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    /// Number of subnetworks.
    pub k: usize,
    /// Sparsity of projection weights.
    pub lambda1: f64,
    /// Sparsity of subnetwork scales.
    pub lambda2: f64,
    /// Smoothness of ridge functions.
    pub lambda3: f64,
    /// Adam learning rate.
    pub eta: f64,
    /// Cayley step size.
    pub tau: f64,
    /// `None` means `min(1000, floor(0.2 n_train))`.
    pub batch_size: Option<usize>,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    /// Hidden widths of every subnetwork.
    pub hidden: Vec<usize>,
    pub activation: ActivationKind,
    /// Cumulative importance ratio kept by pruning.
    pub prune_threshold: f64,
    pub finetune_epochs: usize,
    pub seed: u64,
    /// Freeze `W` to the identity (additive model on raw features).
    pub gam_mode: bool,
    /// Debug: update `W` with Adam instead of Cayley steps, dropping orthogonality.
    pub naive: bool,
    /// Cayley steps between QR re-orthonormalizations.
    pub reortho_every: usize,
    /// Backpropagate through batch normalization moments. Off treats them
    /// as per-step constants.
    pub batch_stat_grads: bool,
    /// Regression only: `fit_pipeline` trains on the response centered and
    /// scaled by its training mean and std, then folds the scale back into
    /// `mu` and `beta`. Training histories are then in standardized units.
    pub standardize_response: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            k: 10,
            lambda1: 1e-3,
            lambda2: 1e-3,
            lambda3: 1e-6,
            eta: 1e-3,
            tau: 0.1,
            batch_size: None,
            max_epochs: 500,
            patience: 40,
            min_delta: 1e-5,
            hidden: vec![10, 6],
            activation: ActivationKind::Tanh,
            prune_threshold: 0.95,
            finetune_epochs: 100,
            seed: 0,
            gam_mode: false,
            naive: false,
            reortho_every: 100,
            batch_stat_grads: true,
            standardize_response: true,
        }
    }
}

impl Hyperparams {
    /// Defaults for `p` features: `k = min(p, 10)`, or `k = p` in GAM mode.
    pub fn for_features(p: usize) -> Self {
        Self { k: p.min(10), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(XnnError::Config(m));
        if self.k < 1 {
            return bad("k must be at least 1".into());
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a finite nonnegative number, got {v}"));
            }
        }
        if !(self.eta > 0.0) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.batch_size == Some(0) {
            return bad("batch size must be at least 1".into());
        }
        if !(self.prune_threshold > 0.0 && self.prune_threshold <= 1.0) {
            return bad(format!("prune threshold must lie in (0, 1], got {}", self.prune_threshold));
        }
        if self.hidden.iter().any(|w| *w == 0) {
            return bad("hidden layer widths must be positive".into());
        }
        if !(self.min_delta >= 0.0) {
            return bad("min_delta must be nonnegative".into());
        }
        Ok(())
    }

    pub fn batch_size_for(&self, n_train: usize) -> usize {
        let default = 1000.min((0.2 * n_train as f64).floor() as usize);
        self.batch_size.unwrap_or(default).clamp(1, n_train.max(1))
    }
}

/// One row per executed epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean penalized batch loss over the epoch.
    pub train_loss: f64,
    pub val_score: f64,
    /// Largest `||W'W - I||_F` seen during the epoch.
    pub ortho_residual: f64,
    /// Wall time since the run started.
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were returned; 0 means the start point.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn max_ortho_residual(&self) -> f64 {
        self.epochs.iter().map(|e| e.ortho_residual).fold(0.0, f64::max)
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_loss", "val_score", "ortho_residual", "seconds"])?;
        for e in &self.epochs {
            w.write_record(&[
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.val_score.to_string(),
                e.ortho_residual.to_string(),
                format!("{:.3}", e.seconds),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Replaces each normalization state by the population moments of the raw
/// subnetwork outputs over `x_train`.
pub fn finalize_norm(mut model: XnnModel, x_train: &DMatrix<f64>) -> Result<XnnModel> {
    let h = model.ridge_outputs(x_train)?;
    for (j, ns) in model.norm.iter_mut().enumerate() {
        *ns = NormState::from_values(h.column(j).as_slice(), NORM_EPSILON);
    }
    Ok(model)
}

/// Mean data-fit loss (squared error or cross-entropy) under stored moments.
pub fn data_loss(model: &XnnModel, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    if x.nrows() != y.len() {
        return Err(XnnError::Shape(format!("{} rows but {} responses", x.nrows(), y.len())));
    }
    if y.is_empty() {
        return Err(XnnError::Data("cannot score an empty set".into()));
    }
    let eta = model.forward(x)?;
    let n = y.len() as f64;
    let total: f64 = match model.link {
        LinkKind::Identity => eta.iter().zip(y.iter()).map(|(e, t)| (e - t).powi(2)).sum(),
        LinkKind::Logit => eta
            .iter()
            .zip(y.iter())
            .map(|(&e, &t)| e.max(0.0) + (-e.abs()).exp().ln_1p() - t * e)
            .sum(),
    };
    Ok(total / n)
}

struct LoopSpec<'a> {
    hp: Hyperparams,
    epochs: usize,
    update_w: bool,
    /// Parameters (by theta index) held fixed.
    frozen_theta: Option<Vec<bool>>,
    /// Treat the starting model as a candidate for the best epoch.
    start_is_candidate: bool,
    x_train: &'a DMatrix<f64>,
    y_train: &'a DVector<f64>,
    x_val: &'a DMatrix<f64>,
    y_val: &'a DVector<f64>,
}

fn train_loop<R: Rng + ?Sized>(start: XnnModel, spec: LoopSpec<'_>, rng: &mut R) -> Result<(XnnModel, TrainHistory)> {
    let hp = &spec.hp;
    let n_train = spec.x_train.nrows();
    let nb = hp.batch_size_for(n_train);
    let n_batches = n_train / nb;
    let clock = Instant::now();
    let mut model = start;
    let mut adam = AdamState::new(model.n_theta());
    let mut w_adam = AdamState::new(model.w.len());
    let mut stepper = CayleyStepper::new(hp.tau, hp.reortho_every);
    let mut history = TrainHistory::default();

    let (mut best_model, mut best_val) = if spec.start_is_candidate {
        let m = finalize_norm(model.clone(), spec.x_train)?;
        let v = data_loss(&m, spec.x_val, spec.y_val)?;
        (Some(m), v)
    } else {
        (None, f64::INFINITY)
    };
    let mut reference = best_val;
    let mut stale = 0usize;
    let mut order: Vec<usize> = (0..n_train).collect();

    for epoch in 1..=spec.epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut ortho = orthogonality_residual(&model.w);
        for b in 0..n_batches {
            let idx = &order[b * nb..(b + 1) * nb];
            let xb = spec.x_train.select_rows(idx.iter());
            let yb: Vec<f64> = idx.iter().map(|&i| spec.y_train[i]).collect();
            let eval = batch_eval(&model, &xb, &yb, hp, None).map_err(|e| match e {
                XnnError::Numeric(m) => XnnError::Numeric(format!("epoch {epoch}, batch {}: {m}", b + 1)),
                other => other,
            })?;
            if spec.update_w {
                if hp.naive {
                    w_adam.step(model.w.as_mut_slice(), eval.grads.g_w.as_slice(), hp.eta)?;
                } else {
                    stepper.step(&mut model.w, &eval.grads.g_w)?;
                }
            }
            let mut theta = model.theta();
            let mut g = eval.grads.theta();
            if let Some(mask) = &spec.frozen_theta {
                for (gi, frozen) in g.iter_mut().zip(mask) {
                    if *frozen {
                        *gi = 0.0;
                    }
                }
            }
            adam.step(&mut theta, &g, hp.eta)?;
            model.set_theta(&theta);
            model.norm = eval.stats;
            ortho = ortho.max(orthogonality_residual(&model.w));
            loss_sum += eval.loss.total;
        }
        model = finalize_norm(model, spec.x_train)?;
        let val = data_loss(&model, spec.x_val, spec.y_val)?;
        if !val.is_finite() {
            return Err(XnnError::Numeric(format!("epoch {epoch}: validation score is {val}")));
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n_batches.max(1) as f64,
            val_score: val,
            ortho_residual: ortho,
            seconds: clock.elapsed().as_secs_f64(),
        });
        if val < best_val {
            best_val = val;
            best_model = Some(model.clone());
            history.best_epoch = epoch;
        }
        if val < reference - hp.min_delta {
            reference = val;
            stale = 0;
        } else {
            stale += 1;
            if stale >= hp.patience {
                break;
            }
        }
    }
    Ok((best_model.unwrap_or(model), history))
}

fn train_val(ds: &Dataset) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>, DVector<f64>)> {
    let (xt, yt) = ds.part(SplitLabel::Train);
    let (xv, yv) = ds.part(SplitLabel::Validation);
    if yt.is_empty() {
        return Err(XnnError::Config("training split is empty".into()));
    }
    if yv.is_empty() {
        return Err(XnnError::Config("validation split is empty".into()));
    }
    Ok((xt, yt, xv, yv))
}

/// Intercept of the constant model: the response mean, or its log-odds
/// for classification (clamped away from 0 and 1).
pub fn starting_intercept(y: &DVector<f64>, task: Task) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let m = y.mean();
    match task {
        Task::Regression => m,
        Task::Classification => {
            let q = m.clamp(1e-6, 1.0 - 1e-6);
            (q / (1.0 - q)).ln()
        }
    }
}

/// Fits an xNN with SOS-BP and returns the best-validation parameters.
pub fn sosbp_fit<R: Rng + ?Sized>(ds: &Dataset, hp: &Hyperparams, rng: &mut R) -> Result<(XnnModel, TrainHistory)> {
    hp.validate()?;
    let (xt, yt, xv, yv) = train_val(ds)?;
    let mut model = init_model(ds.p(), hp, rng)?;
    model.link = ds.task.link();
    model.mu = starting_intercept(&yt, ds.task);
    if hp.max_epochs == 0 {
        return Ok((model, TrainHistory::default()));
    }
    let spec = LoopSpec {
        hp: hp.clone(),
        epochs: hp.max_epochs,
        update_w: !hp.gam_mode,
        frozen_theta: None,
        start_is_candidate: false,
        x_train: &xt,
        y_train: &yt,
        x_val: &xv,
        y_val: &yv,
    };
    train_loop(model, spec, rng)
}

/// Indices of subnetworks kept at `threshold`, most important first.
///
/// A single pass keeps the shortest prefix of the importance ranking whose
/// cumulative ratio reaches `threshold`. Removing mass renormalizes the
/// survivors, so the pass is repeated until the kept set is stable.
pub fn kept_subnetworks(beta: &[f64], threshold: f64) -> Result<Vec<usize>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(XnnError::Config(format!("prune threshold must lie in (0, 1], got {threshold}")));
    }
    let mut kept: Vec<usize> = (0..beta.len()).collect();
    loop {
        let sub: Vec<f64> = kept.iter().map(|&j| beta[j]).collect();
        let ir = crate::model::importance_ratios(&sub)?;
        let mut order: Vec<usize> = (0..kept.len()).collect();
        order.sort_by(|&a, &b| ir[b].total_cmp(&ir[a]).then(a.cmp(&b)));
        let mut cum = 0.0;
        let mut next = Vec::new();
        for &o in &order {
            if ir[o] == 0.0 {
                break;
            }
            cum += ir[o];
            next.push(kept[o]);
            if cum >= threshold - 1e-12 {
                break;
            }
        }
        if next.len() == kept.len() {
            return Ok(next);
        }
        kept = next;
        kept.sort_unstable();
    }
}

/// Zeroes `beta_j` for every subnetwork outside [`kept_subnetworks`].
pub fn prune(mut model: XnnModel, threshold: f64) -> Result<XnnModel> {
    let kept = kept_subnetworks(model.beta.as_slice(), threshold)?;
    for j in 0..model.k() {
        if !kept.contains(&j) {
            model.beta[j] = 0.0;
        }
    }
    Ok(model)
}

/// Refits a pruned model with the projection layer frozen and no sparsity
/// penalties. Pruned subnetworks stay inactive. The start point is a
/// candidate, so the validation score never gets worse.
pub fn fine_tune<R: Rng + ?Sized>(
    model: XnnModel,
    ds: &Dataset,
    hp: &Hyperparams,
    rng: &mut R,
) -> Result<(XnnModel, TrainHistory)> {
    hp.validate()?;
    if hp.finetune_epochs == 0 {
        return Ok((model, TrainHistory::default()));
    }
    let (xt, yt, xv, yv) = train_val(ds)?;
    let mut frozen = vec![false; model.n_theta()];
    for j in 0..model.k() {
        if model.beta[j] == 0.0 {
            frozen[1 + j] = true;
            for i in model.subnet_theta_range(j) {
                frozen[i] = true;
            }
        }
    }
    let spec = LoopSpec {
        hp: Hyperparams { lambda1: 0.0, lambda2: 0.0, ..hp.clone() },
        epochs: hp.finetune_epochs,
        update_w: false,
        frozen_theta: Some(frozen),
        start_is_candidate: true,
        x_train: &xt,
        y_train: &yt,
        x_val: &xv,
        y_val: &yv,
    };
    train_loop(model, spec, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cross_entropy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
}

/// Area under the ROC curve via the rank-sum statistic (ties share ranks).
/// `None` when one class is absent.
pub fn auc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let n1 = labels.iter().filter(|l| **l == 1.0).count();
    let n0 = labels.len() - n1;
    if n1 == 0 || n0 == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &r in &idx[i..=j] {
            ranks[r] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = labels.iter().zip(&ranks).filter(|(l, _)| **l == 1.0).map(|(_, r)| r).sum();
    let (n1, n0) = (n1 as f64, n0 as f64);
    Some((rank_sum - n1 * (n1 + 1.0) / 2.0) / (n1 * n0))
}

/// Test metrics: MSE for regression, cross-entropy and AUC for classification.
pub fn evaluate(model: &XnnModel, x: &DMatrix<f64>, y: &DVector<f64>, task: Task) -> Result<Metrics> {
    if task.link() != model.link {
        return Err(XnnError::Config(format!("{task:?} data does not match a model with {:?} link", model.link)));
    }
    let loss = data_loss(model, x, y)?;
    Ok(match task {
        Task::Regression => Metrics { n: y.len(), mse: Some(loss), cross_entropy: None, auc: None },
        Task::Classification => {
            let eta = model.forward(x)?;
            let p: Vec<f64> = eta.iter().map(|e| sigmoid(*e)).collect();
            Metrics { n: y.len(), mse: None, cross_entropy: Some(loss), auc: auc(&p, y.as_slice()) }
        }
    })
}

/// Output of the full fit, prune, fine-tune pipeline.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: XnnModel,
    /// Best-validation model before pruning (normalization finalized).
    pub unpruned: XnnModel,
    pub fit_history: TrainHistory,
    pub finetune_history: TrainHistory,
    pub kept: Vec<usize>,
    pub val_score: f64,
    pub hp: Hyperparams,
}

impl FitOutcome {
    pub fn max_ortho_residual(&self) -> f64 {
        self.fit_history
            .max_ortho_residual()
            .max(self.finetune_history.max_ortho_residual())
            .max(orthogonality_residual(&self.model.w))
    }
}

/// Training-split mean and std of a regression response, the std replaced
/// by 1 when the response is (numerically) constant.
pub fn response_scale(ds: &Dataset) -> (f64, f64) {
    let y: Vec<f64> = ds.indices(SplitLabel::Train).iter().map(|&i| ds.y[i]).collect();
    if y.is_empty() {
        return (0.0, 1.0);
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let std = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    (mean, if std > 1e-12 * mean.abs().max(1.0) { std } else { 1.0 })
}

/// Maps a model fitted to `(y - shift) / scale` back to `y`.
fn unstandardize(mut model: XnnModel, shift: f64, scale: f64) -> XnnModel {
    model.mu = shift + scale * model.mu;
    model.beta *= scale;
    model
}

/// `sosbp_fit`, `prune`, `fine_tune`, then sign canonicalization. With
/// `hp.standardize_response` a regression response is standardized for
/// training; the returned models predict on the original scale.
pub fn fit_pipeline<R: Rng + ?Sized>(ds: &Dataset, hp: &Hyperparams, rng: &mut R) -> Result<FitOutcome> {
    let (shift, scale) = if hp.standardize_response && ds.task == Task::Regression {
        response_scale(ds)
    } else {
        (0.0, 1.0)
    };
    let scaled;
    let train_ds = if (shift, scale) == (0.0, 1.0) {
        ds
    } else {
        let mut c = ds.clone();
        c.y.apply(|v| *v = (*v - shift) / scale);
        scaled = c;
        &scaled
    };
    let (unpruned, fit_history) = sosbp_fit(train_ds, hp, rng)?;
    let pruned = prune(unpruned.clone(), hp.prune_threshold)?;
    let kept = kept_subnetworks(pruned.beta.as_slice(), 1.0)?;
    let (model, finetune_history) = fine_tune(pruned, train_ds, hp, rng)?;
    let unpruned = unstandardize(unpruned, shift, scale);
    let mut model = unstandardize(model, shift, scale);
    model.canonicalize_signs();
    let (_, _, xv, yv) = train_val(ds)?;
    let val_score = data_loss(&model, &xv, &yv)?;
    Ok(FitOutcome { model, unpruned, fit_history, finetune_history, kept, val_score, hp: hp.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lambda1: f64,
    pub lambda2: f64,
    pub val_score: f64,
}

pub const LAMBDA_GRID: [f64; 3] = [1e-4, 1e-3, 1e-2];

/// Runs the pipeline for every `(lambda1, lambda2)` pair and keeps the one
/// with the lowest validation score. Every cell starts from a copy of `rng`,
/// so cells differ only in their penalties.
pub fn grid_search(
    ds: &Dataset,
    hp: &Hyperparams,
    lambda1: &[f64],
    lambda2: &[f64],
    rng: &XnnRng,
    jobs: usize,
) -> Result<(FitOutcome, Vec<GridCell>)> {
    let pairs: Vec<(f64, f64)> = lambda1.iter().flat_map(|&a| lambda2.iter().map(move |&b| (a, b))).collect();
    if pairs.is_empty() {
        return Err(XnnError::Config("empty lambda grid".into()));
    }
    let run = |&(l1, l2): &(f64, f64)| {
        let cell_hp = Hyperparams { lambda1: l1, lambda2: l2, ..hp.clone() };
        fit_pipeline(ds, &cell_hp, &mut rng.clone())
    };
    let outcomes: Vec<Result<FitOutcome>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| XnnError::Config(format!("thread pool: {e}")))?;
        pool.install(|| pairs.par_iter().map(run).collect())
    } else {
        pairs.iter().map(run).collect()
    };
    let mut cells = Vec::with_capacity(pairs.len());
    let mut best: Option<FitOutcome> = None;
    for (o, &(l1, l2)) in outcomes.into_iter().zip(&pairs) {
        let o = o?;
        cells.push(GridCell { lambda1: l1, lambda2: l2, val_score: o.val_score });
        if best.as_ref().is_none_or(|b| o.val_score < b.val_score) {
            best = Some(o);
        }
    }
    Ok((best.expect("nonempty grid"), cells))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{scenario, split, ScenarioId, ScenarioSpec};
    use crate::model::{importance_ratios, DenseLayer, Subnetwork};
    use crate::rng::{seeded, stream, Role};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn model_with_beta(beta: &[f64]) -> XnnModel {
        let hp = Hyperparams { k: beta.len(), ..Hyperparams::default() };
        let mut m = init_model(beta.len(), &hp, &mut seeded(0, Role::Fit)).unwrap();
        m.beta = DVector::from_column_slice(beta);
        m
    }

    fn small_s1(n: usize, seed: u64) -> Dataset {
        let ds = scenario(&ScenarioSpec::new(ScenarioId::S1), n, &mut stream(seed, 1, 0, Role::TrainData)).unwrap();
        split(ds, 0.8, 0.2, &mut stream(seed, 1, 0, Role::Split)).unwrap()
    }

    #[test]
    fn prune_examples() {
        let b = [0.6, 0.3, 0.06, 0.04];
        assert_eq!(kept_subnetworks(&b, 0.95).unwrap(), vec![0, 1, 2]);
        assert_eq!(kept_subnetworks(&b, 0.99).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(kept_subnetworks(&[1.0, 0.0, 0.0], 0.95).unwrap(), vec![0]);
        assert_eq!(kept_subnetworks(&[1.0, 0.0, 0.0], 1.0).unwrap(), vec![0]);
        let m = prune(model_with_beta(&[0.04, -0.6, 0.06, 0.3]), 0.95).unwrap();
        assert_eq!(m.beta.as_slice(), &[0.0, -0.6, 0.06, 0.3]);
        assert!(matches!(prune(model_with_beta(&[0.0, 0.0]), 0.95), Err(XnnError::Degenerate(_))));
        assert!(prune(model_with_beta(&[1.0]), 0.0).is_err());
    }

    proptest! {
        #[test]
        fn prune_is_idempotent(beta in prop::collection::vec(-5.0f64..5.0, 1..10), t in prop::sample::select(vec![0.5, 0.8, 0.95, 0.99, 1.0])) {
            prop_assume!(beta.iter().any(|b| *b != 0.0));
            let once = prune(model_with_beta(&beta), t).unwrap();
            let twice = prune(once.clone(), t).unwrap();
            prop_assert_eq!(once.beta, twice.beta);
        }

        #[test]
        fn prune_is_monotone(beta in prop::collection::vec(-5.0f64..5.0, 1..10), t1 in 0.05f64..1.0, t2 in 0.05f64..1.0) {
            prop_assume!(beta.iter().any(|b| *b != 0.0));
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = kept_subnetworks(&beta, lo).unwrap();
            let b = kept_subnetworks(&beta, hi).unwrap();
            prop_assert!(a.iter().all(|j| b.contains(j)), "{:?} not within {:?}", a, b);
        }

        #[test]
        fn importance_ratios_form_a_simplex(beta in prop::collection::vec(-100.0f64..100.0, 1..12)) {
            prop_assume!(beta.iter().any(|b| *b != 0.0));
            let r = importance_ratios(&beta).unwrap();
            prop_assert!(r.iter().all(|v| *v >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn finalize_norm_examples() {
        // Identity subnetwork over inputs {1, 3}.
        let mut m = model_with_beta(&[1.0]);
        m.subnets[0] = Subnetwork::new(
            vec![DenseLayer { weights: DMatrix::from_element(1, 1, 1.0), biases: DVector::zeros(1) }],
            ActivationKind::Linear,
        )
        .unwrap();
        m.w = DMatrix::identity(1, 1);
        let m = finalize_norm(m, &DMatrix::from_column_slice(2, 1, &[1.0, 3.0])).unwrap();
        assert_eq!((m.norm[0].mean, m.norm[0].std), (2.0, 1.0));

        let single = finalize_norm(m.clone(), &DMatrix::from_column_slice(1, 1, &[0.7])).unwrap();
        assert_eq!(single.norm[0].std, NORM_EPSILON);
        assert_eq!(single.forward(&DMatrix::from_column_slice(1, 1, &[0.7])).unwrap()[0], single.mu);

        let z = [-1.0, 1.0, -1.0, 1.0];
        let std_ok = finalize_norm(m, &DMatrix::from_column_slice(4, 1, &z)).unwrap();
        assert_abs_diff_eq!(std_ok.norm[0].mean, 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(std_ok.norm[0].std, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn evaluate_examples() {
        let mut m = model_with_beta(&[0.0]);
        m.mu = 2.5;
        let x = DMatrix::zeros(4, 1);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let met = evaluate(&m, &x, &y, Task::Regression).unwrap();
        assert_abs_diff_eq!(met.mse.unwrap(), 1.25, epsilon = 1e-12);
        let y_const = DVector::from_element(4, 2.5);
        assert_eq!(evaluate(&m, &x, &y_const, Task::Regression).unwrap().mse, Some(0.0));
        assert!(evaluate(&m, &x, &y, Task::Classification).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0]), Some(1.0));
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[0.0, 0.0, 1.0, 1.0]), Some(0.0));
        assert_eq!(auc(&[0.5, 0.5], &[0.0, 1.0]), Some(0.5));
        assert_eq!(auc(&[0.5, 0.6], &[1.0, 1.0]), None);
    }

    #[test]
    fn starting_intercept_matches_the_constant_fit() {
        let y = DVector::from_vec(vec![1.0, 2.0, 6.0]);
        assert_eq!(starting_intercept(&y, Task::Regression), 3.0);
        let labels = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        assert_abs_diff_eq!(starting_intercept(&labels, Task::Classification), (1.0f64 / 3.0).ln(), epsilon = 1e-15);
        assert!(starting_intercept(&DVector::from_element(3, 1.0), Task::Classification).is_finite());
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let ds = small_s1(200, 0);
        let hp = Hyperparams { max_epochs: 0, ..Hyperparams::for_features(10) };
        let (m, h) = sosbp_fit(&ds, &hp, &mut seeded(0, Role::Fit)).unwrap();
        assert!(h.is_empty());
        assert!(orthogonality_residual(&m.w) < 1e-12);
    }

    #[test]
    fn empty_validation_split_is_rejected() {
        let ds = small_s1(200, 0).with_label(SplitLabel::Train);
        let err = sosbp_fit(&ds, &Hyperparams::for_features(10), &mut seeded(0, Role::Fit)).unwrap_err();
        assert!(matches!(err, XnnError::Config(_)));
    }

    #[test]
    fn short_fit_keeps_orthogonality_and_restores_best_epoch() {
        let ds = small_s1(1000, 3);
        let hp = Hyperparams { max_epochs: 30, patience: 5, ..Hyperparams::for_features(10) };
        let (m, h) = sosbp_fit(&ds, &hp, &mut seeded(1, Role::Fit)).unwrap();
        assert!(h.max_ortho_residual() <= 1e-6);
        let best = h.epochs.iter().map(|e| e.val_score).fold(f64::INFINITY, f64::min);
        let (xv, yv) = ds.part(SplitLabel::Validation);
        assert_abs_diff_eq!(data_loss(&m, &xv, &yv).unwrap(), best, epsilon = 1e-12);
        assert_eq!(h.epochs[h.best_epoch - 1].val_score, best);
    }

    #[test]
    fn fits_are_bitwise_reproducible() {
        let ds = small_s1(500, 4);
        let hp = Hyperparams { max_epochs: 5, ..Hyperparams::for_features(10) };
        let (a, ha) = sosbp_fit(&ds, &hp, &mut seeded(9, Role::Fit)).unwrap();
        let (b, hb) = sosbp_fit(&ds, &hp, &mut seeded(9, Role::Fit)).unwrap();
        assert_eq!(a, b);
        let strip = |h: &TrainHistory| h.epochs.iter().map(|e| (e.train_loss, e.val_score, e.ortho_residual)).collect::<Vec<_>>();
        assert_eq!(strip(&ha), strip(&hb));
    }

    #[test]
    fn standardized_fits_are_scale_equivariant() {
        // A power-of-two scale commutes with rounding, so the standardized
        // problems are bitwise identical.
        let ds = small_s1(500, 6);
        let mut scaled = ds.clone();
        scaled.y *= 4.0;
        let hp = Hyperparams { max_epochs: 5, finetune_epochs: 3, ..Hyperparams::for_features(10) };
        let a = fit_pipeline(&ds, &hp, &mut seeded(2, Role::Fit)).unwrap();
        let b = fit_pipeline(&scaled, &hp, &mut seeded(2, Role::Fit)).unwrap();
        assert_eq!(a.model.w, b.model.w);
        assert_eq!(4.0 * a.model.mu, b.model.mu);
        assert_eq!(&a.model.beta * 4.0, b.model.beta);
        assert_eq!(a.kept, b.kept);

        let (shift, scale) = response_scale(&ds);
        let (xt, yt) = ds.part(SplitLabel::Train);
        assert_abs_diff_eq!(shift, yt.mean(), epsilon = 1e-12);
        assert_abs_diff_eq!(scale, (yt.map(|v| (v - shift).powi(2)).mean()).sqrt(), epsilon = 1e-12);
        assert!(xt.nrows() > 0);

        let raw = Hyperparams { standardize_response: false, ..hp };
        let c = fit_pipeline(&ds, &raw, &mut seeded(2, Role::Fit)).unwrap();
        assert_ne!(a.model.w, c.model.w);
    }

    #[test]
    fn constant_response_keeps_unit_scale() {
        let mut ds = small_s1(200, 1);
        ds.y.fill(2.5);
        assert_eq!(response_scale(&ds), (2.5, 1.0));
    }

    #[test]
    fn fine_tune_freezes_projection_and_pruned_units() {
        let ds = small_s1(1000, 5);
        let hp = Hyperparams { max_epochs: 10, finetune_epochs: 5, ..Hyperparams::for_features(10) };
        let (m, _) = sosbp_fit(&ds, &hp, &mut seeded(2, Role::Fit)).unwrap();
        let pruned = prune(m, 0.8).unwrap();
        let (tuned, _) = fine_tune(pruned.clone(), &ds, &hp, &mut seeded(3, Role::Fit)).unwrap();
        assert_eq!(tuned.w, pruned.w);
        for j in 0..pruned.k() {
            if pruned.beta[j] == 0.0 {
                assert_eq!(tuned.beta[j], 0.0);
                assert_eq!(tuned.subnets[j], pruned.subnets[j]);
            }
        }
        let (same, h) = fine_tune(pruned.clone(), &ds, &Hyperparams { finetune_epochs: 0, ..hp }, &mut seeded(3, Role::Fit)).unwrap();
        assert_eq!(same, pruned);
        assert!(h.is_empty());
    }

    #[test]
    fn gam_mode_keeps_identity_projection() {
        let ds = small_s1(500, 6);
        let hp = Hyperparams { gam_mode: true, k: 10, max_epochs: 3, ..Hyperparams::default() };
        let (m, _) = sosbp_fit(&ds, &hp, &mut seeded(0, Role::Fit)).unwrap();
        assert_eq!(m.w, DMatrix::identity(10, 10));
    }

    #[test]
    fn hyperparam_validation_and_batch_size() {
        assert!(Hyperparams { lambda1: -1.0, ..Hyperparams::default() }.validate().is_err());
        assert!(Hyperparams { prune_threshold: 1.5, ..Hyperparams::default() }.validate().is_err());
        assert!(Hyperparams { batch_size: Some(0), ..Hyperparams::default() }.validate().is_err());
        let hp = Hyperparams::default();
        assert_eq!(hp.batch_size_for(8000), 1000);
        assert_eq!(hp.batch_size_for(800), 160);
        assert_eq!(hp.batch_size_for(3), 1);
        assert_eq!(Hyperparams::for_features(3).k, 3);
    }
}
