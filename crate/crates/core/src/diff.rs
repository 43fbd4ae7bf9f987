//! Exact derivatives for the penalized xNN objective.
//!
//! Each subnetwork is evaluated as an order-2 jet in its scalar input: every
//! node carries `(value, d/dz, d²/dz²)`. The roughness penalty reads the
//! second-derivative channel of the output node. Parameter gradients come
//! from reverse accumulation through those same jet recursions, so the
//! gradient of the roughness term is exact without a general nested AD
//! engine.
//!
//! Normalization moments are constants during differentiation. When they are
//! not supplied they are taken from the batch itself.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngExt};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, XnnError};
use crate::model::{
    init_model, push_row_major, ActivationKind, LinkKind, NormState, Subnetwork, XnnModel,
    NORM_EPSILON,
};
use crate::optim::l1_subgradient;
use crate::rng::{stream, Role};
use crate::train::Hyperparams;

/// Values, first and second input-derivatives of a subnetwork over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet2 {
    pub v: DVector<f64>,
    pub d1: DVector<f64>,
    pub d2: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: DMatrix<f64>,
    pub biases: DVector<f64>,
}

/// Gradients mirroring the parameter layout of [`XnnModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub g_w: DMatrix<f64>,
    pub g_beta: DVector<f64>,
    pub g_mu: f64,
    pub g_layers: Vec<Vec<LayerGrad>>,
}

impl Grads {
    pub fn zeros_like(model: &XnnModel) -> Self {
        Self {
            g_w: DMatrix::zeros(model.p(), model.k()),
            g_beta: DVector::zeros(model.k()),
            g_mu: 0.0,
            g_layers: model
                .subnets
                .iter()
                .map(|s| {
                    s.layers
                        .iter()
                        .map(|l| LayerGrad {
                            weights: DMatrix::zeros(l.fan_out(), l.fan_in()),
                            biases: DVector::zeros(l.fan_out()),
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// Non-projection gradients in the order of [`XnnModel::theta`].
    pub fn theta(&self) -> Vec<f64> {
        let mut out = vec![self.g_mu];
        out.extend(self.g_beta.iter());
        for layers in &self.g_layers {
            for l in layers {
                push_row_major(&mut out, &l.weights);
                out.extend(l.biases.iter());
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.g_mu.is_finite()
            && self.g_w.iter().all(|v| v.is_finite())
            && self.g_beta.iter().all(|v| v.is_finite())
            && self
                .g_layers
                .iter()
                .flatten()
                .all(|l| l.weights.iter().chain(l.biases.iter()).all(|v| v.is_finite()))
    }
}

/// Components of the penalized objective on one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    /// Mean squared error or mean cross-entropy.
    pub data: f64,
    /// Sum over subnetworks of the empirical roughness (unweighted).
    pub roughness: f64,
    /// Sum of absolute projection weights (unweighted).
    pub l1_w: f64,
    /// Sum of absolute scales (unweighted).
    pub l1_beta: f64,
    /// `data + lambda1 * l1_w + lambda2 * l1_beta + lambda3 * roughness`.
    pub total: f64,
}

/// Inputs of one layer for every sample, one contiguous column of `n`
/// values per unit.
struct LayerCache {
    width: usize,
    v_in: Vec<f64>,
    /// First and second input derivatives, when jets are carried.
    d1_in: Vec<f64>,
    d2_in: Vec<f64>,
    /// Pre-activation derivative channels of tanh layers.
    a1: Vec<f64>,
    a2: Vec<f64>,
}

struct SubnetTape {
    layers: Vec<LayerCache>,
    /// Output node (`n`).
    v: Vec<f64>,
    /// Output node before its bias.
    v_pre: Vec<f64>,
    jet: Option<(Vec<f64>, Vec<f64>)>,
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with independent partial sums so it vectorizes.
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] += a[l] * b[l];
        }
    }
    let tail: f64 = xr.iter().zip(yr).map(|(a, b)| a * b).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out[o] = sum_c w[o, c] * x[c]` over columns of length `n`.
fn mix(w: &DMatrix<f64>, x: &[f64], n: usize) -> Vec<f64> {
    let (q, m) = w.shape();
    let mut out = vec![0.0; n * q];
    for o in 0..q {
        let col = &mut out[o * n..(o + 1) * n];
        for c in 0..m {
            axpy(w[(o, c)], &x[c * n..(c + 1) * n], col);
        }
    }
    out
}

fn forward_tape(s: &Subnetwork, z: &[f64], jets: bool) -> SubnetTape {
    let n = z.len();
    let mut v = z.to_vec();
    let (mut d1, mut d2) = if jets { (vec![1.0; n], vec![0.0; n]) } else { (Vec::new(), Vec::new()) };
    let mut width = 1;
    let mut layers = Vec::with_capacity(s.layers.len());
    let mut v_pre = Vec::new();
    let last = s.layers.len() - 1;
    for (l, layer) in s.layers.iter().enumerate() {
        let q = layer.fan_out();
        let tanh = s.is_hidden(l) && s.activation == ActivationKind::Tanh;
        let mut a = mix(&layer.weights, &v, n);
        if l == last {
            v_pre = a.clone();
        }
        for (o, b) in layer.biases.iter().enumerate() {
            a[o * n..(o + 1) * n].iter_mut().for_each(|x| *x += b);
        }
        let (a1, a2) = if jets { (mix(&layer.weights, &d1, n), mix(&layer.weights, &d2, n)) } else { (Vec::new(), Vec::new()) };
        let cache = |a1: Vec<f64>, a2: Vec<f64>, v, d1, d2| LayerCache { width, v_in: v, d1_in: d1, d2_in: d2, a1, a2 };
        if tanh {
            a.iter_mut().for_each(|x| *x = crate::model::tanh(*x));
            let (mut n1, mut n2) = (Vec::new(), Vec::new());
            if jets {
                n1 = vec![0.0; n * q];
                n2 = vec![0.0; n * q];
                for idx in 0..n * q {
                    let t = a[idx];
                    let sd = 1.0 - t * t;
                    n1[idx] = sd * a1[idx];
                    n2[idx] = -2.0 * t * sd * a1[idx] * a1[idx] + sd * a2[idx];
                }
            }
            layers.push(cache(a1, a2, v, d1, d2));
            d1 = n1;
            d2 = n2;
        } else {
            layers.push(cache(Vec::new(), Vec::new(), v, d1, d2));
            d1 = a1;
            d2 = a2;
        }
        v = a;
        width = q;
    }
    SubnetTape { layers, v, v_pre, jet: jets.then_some((d1, d2)) }
}

/// Reverse pass. `gh` and `gh2` are adjoints of the output value and output
/// second derivative. Returns layer gradients and the adjoint of the input.
fn backward_tape(
    s: &Subnetwork,
    tape: &SubnetTape,
    gh: &[f64],
    gh2: Option<&[f64]>,
) -> (Vec<LayerGrad>, DVector<f64>) {
    let n = gh.len();
    let mut gv = gh.to_vec();
    let jets = gh2.is_some();
    let (mut g1, mut g2) = match gh2 {
        Some(g) => (vec![0.0; n], g.to_vec()),
        None => (Vec::new(), Vec::new()),
    };
    let mut grads: Vec<LayerGrad> = Vec::with_capacity(s.layers.len());
    for l in (0..s.layers.len()).rev() {
        let cache = &tape.layers[l];
        let layer = &s.layers[l];
        let (m, q) = (cache.width, layer.fan_out());
        if s.is_hidden(l) && s.activation == ActivationKind::Tanh {
            let t = &tape.layers[l + 1].v_in;
            if jets {
                for idx in 0..n * q {
                    let ti = t[idx];
                    let si = 1.0 - ti * ti;
                    let a1i = cache.a1[idx];
                    let a2i = cache.a2[idx];
                    let (gvi, g1i, g2i) = (gv[idx], g1[idx], g2[idx]);
                    let tsi = ti * si;
                    gv[idx] = gvi * si - 2.0 * g1i * tsi * a1i
                        + g2i * (-2.0 * a1i * a1i * (si * si - 2.0 * ti * tsi) - 2.0 * tsi * a2i);
                    g1[idx] = g1i * si - 4.0 * g2i * tsi * a1i;
                    g2[idx] = g2i * si;
                }
            } else {
                for (g, ti) in gv.iter_mut().zip(t) {
                    *g *= 1.0 - ti * ti;
                }
            }
        }
        let mut gw = DMatrix::zeros(q, m);
        let mut gb = DVector::zeros(q);
        for o in 0..q {
            let go = &gv[o * n..(o + 1) * n];
            gb[o] = go.iter().sum();
            for c in 0..m {
                let mut g = dot(go, &cache.v_in[c * n..(c + 1) * n]);
                if jets {
                    g += dot(&g1[o * n..(o + 1) * n], &cache.d1_in[c * n..(c + 1) * n]);
                    g += dot(&g2[o * n..(o + 1) * n], &cache.d2_in[c * n..(c + 1) * n]);
                }
                gw[(o, c)] = g;
            }
        }
        let wt = layer.weights.transpose();
        let next_gv = mix(&wt, &gv, n);
        if jets {
            g1 = mix(&wt, &g1, n);
            g2 = mix(&wt, &g2, n);
        }
        gv = next_gv;
        grads.push(LayerGrad { weights: gw, biases: gb });
    }
    grads.reverse();
    (grads, DVector::from_vec(gv))
}

/// Order-2 jet of a subnetwork at each input point.
pub fn subnet_jet(s: &Subnetwork, z: &[f64]) -> Jet2 {
    let tape = forward_tape(s, z, true);
    let (d1, d2) = tape.jet.expect("jets requested");
    Jet2 { v: DVector::from_vec(tape.v), d1: DVector::from_vec(d1), d2: DVector::from_vec(d2) }
}

/// Empirical roughness `(1/n) sum (h''/std)^2` of a normalized ridge function.
pub fn roughness(j: &Jet2, ns: &NormState) -> f64 {
    let n = j.d2.len();
    if n == 0 {
        return 0.0;
    }
    let std = ns.std.max(ns.epsilon);
    j.d2.iter().map(|d| (d / std).powi(2)).sum::<f64>() / n as f64
}

/// Which terms to include when evaluating a batch.
#[derive(Debug, Clone, Copy)]
struct Terms {
    data: bool,
    lambda1: f64,
    lambda2: f64,
    lambda3: f64,
    through_stats: bool,
}

impl Terms {
    fn from_hp(hp: &Hyperparams) -> Self {
        Self {
            data: true,
            lambda1: hp.lambda1,
            lambda2: hp.lambda2,
            lambda3: hp.lambda3,
            through_stats: hp.batch_stat_grads,
        }
    }
}

/// Result of a batch evaluation.
#[derive(Debug, Clone)]
pub struct BatchEval {
    pub loss: LossParts,
    pub grads: Grads,
    /// Normalization moments used (batch moments unless frozen ones were given).
    pub stats: Vec<NormState>,
}

fn data_loss_and_residual(link: LinkKind, eta: &DVector<f64>, y: &[f64]) -> (f64, Vec<f64>) {
    let n = y.len() as f64;
    match link {
        LinkKind::Identity => {
            let mut loss = 0.0;
            let r = eta
                .iter()
                .zip(y)
                .map(|(e, yi)| {
                    let d = e - yi;
                    loss += d * d;
                    2.0 * d / n
                })
                .collect();
            (loss / n, r)
        }
        LinkKind::Logit => {
            let mut loss = 0.0;
            let r = eta
                .iter()
                .zip(y)
                .map(|(&e, &yi)| {
                    loss += e.max(0.0) + (-e.abs()).exp().ln_1p() - yi * e;
                    (crate::model::sigmoid(e) - yi) / n
                })
                .collect();
            (loss / n, r)
        }
    }
}

fn evaluate_batch(
    model: &XnnModel,
    xb: &DMatrix<f64>,
    yb: &[f64],
    terms: Terms,
    frozen: Option<&[NormState]>,
    want_grads: bool,
) -> Result<BatchEval> {
    let n = xb.nrows();
    let k = model.k();
    if n == 0 {
        return Err(XnnError::Data("empty batch".into()));
    }
    if yb.len() != n {
        return Err(XnnError::Shape(format!("{} rows but {} responses", n, yb.len())));
    }
    if let Some(f) = frozen {
        if f.len() != k {
            return Err(XnnError::Shape(format!("{} frozen states for k = {k}", f.len())));
        }
    }
    let z = crate::model::project(model, xb)?;
    let jets = terms.lambda3 > 0.0;
    let tapes: Vec<SubnetTape> = model
        .subnets
        .iter()
        .enumerate()
        .map(|(j, s)| forward_tape(s, z.column(j).as_slice(), jets))
        .collect();
    // Batch moments are taken before the output bias, which they then
    // cancel exactly; the stored mean includes the bias.
    let pre_stats: Vec<NormState> = match frozen {
        Some(f) => f.to_vec(),
        None => tapes.iter().map(|t| NormState::from_values(t.v_pre.as_slice(), NORM_EPSILON)).collect(),
    };
    let mut stats = pre_stats.clone();
    if frozen.is_none() {
        for (j, ns) in stats.iter_mut().enumerate() {
            ns.mean += model.subnets[j].layers.last().expect("validated").biases[0];
        }
    }
    let moving = |j: usize| terms.through_stats && frozen.is_none() && stats[j].std > stats[j].epsilon;

    // Normalized ridge outputs and the linear predictor.
    let mut hn = DMatrix::zeros(n, k);
    let mut eta = DVector::from_element(n, model.mu);
    for j in 0..k {
        let std = stats[j].std.max(stats[j].epsilon);
        if frozen.is_none() {
            let m = pre_stats[j].mean;
            for i in 0..n {
                hn[(i, j)] = (tapes[j].v_pre[i] - m) / std;
            }
        } else {
            for i in 0..n {
                hn[(i, j)] = (tapes[j].v[i] - stats[j].mean) / std;
            }
        }
        eta.axpy(model.beta[j], &hn.column(j), 1.0);
    }

    let mut parts = LossParts::default();
    let residual = if terms.data {
        let (l, r) = data_loss_and_residual(model.link, &eta, yb);
        parts.data = l;
        Some(r)
    } else {
        None
    };
    let mut rough_each = vec![0.0; k];
    if jets {
        for j in 0..k {
            let std = stats[j].std.max(stats[j].epsilon);
            let (_, d2) = tapes[j].jet.as_ref().expect("jets");
            rough_each[j] = d2.iter().map(|d| (d / std).powi(2)).sum::<f64>() / n as f64;
        }
    }
    parts.roughness = rough_each.iter().sum();
    parts.l1_w = model.w.iter().map(|v| v.abs()).sum();
    parts.l1_beta = model.beta.iter().map(|v| v.abs()).sum();
    parts.total = parts.data
        + terms.lambda1 * parts.l1_w
        + terms.lambda2 * parts.l1_beta
        + terms.lambda3 * parts.roughness;
    if !parts.data.is_finite() {
        return Err(XnnError::Numeric(format!("data-fit loss is {}", parts.data)));
    }
    if !parts.roughness.is_finite() {
        return Err(XnnError::Numeric(format!("roughness penalty is {}", parts.roughness)));
    }
    if !parts.total.is_finite() {
        return Err(XnnError::Numeric(format!("penalized loss is {}", parts.total)));
    }

    let mut grads = Grads::zeros_like(model);
    if want_grads {
        let mut gz = DMatrix::zeros(n, k);
        if let Some(r) = &residual {
            grads.g_mu = r.iter().sum();
            for j in 0..k {
                grads.g_beta[j] = r.iter().zip(hn.column(j).iter()).map(|(a, b)| a * b).sum();
            }
        }
        for j in 0..k {
            let std = stats[j].std.max(stats[j].epsilon);
            let mut gh: Vec<f64> = match &residual {
                Some(r) => r.iter().map(|ri| ri * model.beta[j] / std).collect(),
                None => vec![0.0; n],
            };
            if moving(j) {
                // Moments depend on the batch: remove the mean and the
                // component along the normalized output, and let the
                // roughness term feel the scale.
                let col = hn.column(j);
                let nf = n as f64;
                let g_mean = gh.iter().sum::<f64>() / nf;
                let g_dot = gh.iter().zip(col.iter()).map(|(g, h)| g * h).sum::<f64>() / nf;
                let d_std = -2.0 * terms.lambda3 * rough_each[j] / std;
                for (g, h) in gh.iter_mut().zip(col.iter()) {
                    *g = *g - g_mean - h * g_dot + d_std * h / nf;
                }
            }
            let gh2: Option<Vec<f64>> = tapes[j].jet.as_ref().map(|(_, d2)| {
                let c = 2.0 * terms.lambda3 / (n as f64 * std * std);
                d2.iter().map(|d| c * d).collect()
            });
            let (mut layer_grads, dz) = backward_tape(&model.subnets[j], &tapes[j], &gh, gh2.as_deref());
            if moving(j) {
                layer_grads.last_mut().expect("validated").biases[0] = 0.0;
            }
            grads.g_layers[j] = layer_grads;
            gz.set_column(j, &dz);
        }
        grads.g_w = xb.transpose() * gz;
        if terms.lambda1 > 0.0 {
            grads.g_w += l1_subgradient(&model.w, terms.lambda1);
        }
        if terms.lambda2 > 0.0 {
            grads.g_beta += l1_subgradient(&model.beta, terms.lambda2);
        }
        if !grads.is_finite() {
            return Err(XnnError::Numeric("non-finite gradient".into()));
        }
    }
    Ok(BatchEval { loss: parts, grads, stats })
}

/// Penalized loss and gradients on a batch, normalizing with the batch
/// moments. Gradients flow through the moments unless
/// `hp.batch_stat_grads` is off, in which case they are held constant.
pub fn loss_and_grads(model: &XnnModel, xb: &DMatrix<f64>, yb: &[f64], hp: &Hyperparams) -> Result<(f64, Grads)> {
    let e = evaluate_batch(model, xb, yb, Terms::from_hp(hp), None, true)?;
    Ok((e.loss.total, e.grads))
}

/// Like [`loss_and_grads`], also returning the loss breakdown and the batch
/// moments. `frozen` replaces the batch moments when given.
pub fn batch_eval(
    model: &XnnModel,
    xb: &DMatrix<f64>,
    yb: &[f64],
    hp: &Hyperparams,
    frozen: Option<&[NormState]>,
) -> Result<BatchEval> {
    evaluate_batch(model, xb, yb, Terms::from_hp(hp), frozen, true)
}

/// Penalized loss only, under fixed normalization moments (batch moments
/// when `stats` is `None`).
pub fn loss_frozen(
    model: &XnnModel,
    xb: &DMatrix<f64>,
    yb: &[f64],
    hp: &Hyperparams,
    stats: Option<&[NormState]>,
) -> Result<LossParts> {
    Ok(evaluate_batch(model, xb, yb, Terms::from_hp(hp), stats, false)?.loss)
}

/// Sum of roughness penalties and its gradient (no data term, no weights).
pub fn roughness_and_grads(model: &XnnModel, xb: &DMatrix<f64>, stats: &[NormState]) -> Result<(f64, Grads)> {
    let terms = Terms { data: false, lambda1: 0.0, lambda2: 0.0, lambda3: 1.0, through_stats: false };
    let dummy = vec![0.0; xb.nrows()];
    let e = evaluate_batch(model, xb, &dummy, terms, Some(stats), true)?;
    Ok((e.loss.roughness, e.grads))
}

/// Relative error between an analytic derivative and a central difference.
/// `noise` is the rounding band of the difference quotient; discrepancy
/// inside it is not resolvable and does not count.
fn rel_err(analytic: f64, numeric: f64, noise: f64) -> f64 {
    ((analytic - numeric).abs() - noise).max(0.0) / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Rounding band of `(up - down) / 2 eps`: a few ulps of each loss value.
fn fd_noise(up: f64, down: f64, eps: f64) -> f64 {
    8.0 * f64::EPSILON * up.abs().max(down.abs()) / eps
}

/// Central finite differences `grads - fd` over a set of analytic gradients.
#[allow(clippy::too_many_arguments)]
fn fd_max_rel_err(
    model: &XnnModel,
    xb: &DMatrix<f64>,
    yb: &[f64],
    hp: &Hyperparams,
    stats: Option<&[NormState]>,
    g_w: &DMatrix<f64>,
    g_theta: &[f64],
    eps: f64,
) -> Result<f64> {
    let mut worst = 0.0_f64;
    let mut m = model.clone();
    for idx in 0..model.w.len() {
        let base = model.w[idx];
        m.w[idx] = base + eps;
        let up = loss_frozen(&m, xb, yb, hp, stats)?.total;
        m.w[idx] = base - eps;
        let down = loss_frozen(&m, xb, yb, hp, stats)?.total;
        m.w[idx] = base;
        worst = worst.max(rel_err(g_w[idx], (up - down) / (2.0 * eps), fd_noise(up, down, eps)));
    }
    let theta = model.theta();
    let mut t = theta.clone();
    for idx in 0..theta.len() {
        t[idx] = theta[idx] + eps;
        m.set_theta(&t);
        let up = loss_frozen(&m, xb, yb, hp, stats)?.total;
        t[idx] = theta[idx] - eps;
        m.set_theta(&t);
        let down = loss_frozen(&m, xb, yb, hp, stats)?.total;
        t[idx] = theta[idx];
        worst = worst.max(rel_err(g_theta[idx], (up - down) / (2.0 * eps), fd_noise(up, down, eps)));
    }
    Ok(worst)
}

/// Maximum relative error between analytic gradients and central finite
/// differences over every parameter, excluding the non-smooth l1 terms.
/// Perturbed losses recompute the batch moments, or freeze them at the base
/// point when `hp.batch_stat_grads` is off, matching the analytic gradient.
pub fn fd_check(model: &XnnModel, xb: &DMatrix<f64>, yb: &[f64], hp: &Hyperparams, eps: f64) -> Result<f64> {
    fd_check_impl(model, xb, yb, hp, eps, false)
}

fn fd_check_impl(
    model: &XnnModel,
    xb: &DMatrix<f64>,
    yb: &[f64],
    hp: &Hyperparams,
    eps: f64,
    corrupt: bool,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(XnnError::Config("finite-difference step must be positive".into()));
    }
    let smooth = Hyperparams { lambda1: 0.0, lambda2: 0.0, ..hp.clone() };
    let base = batch_eval(model, xb, yb, &smooth, None)?;
    let stats = (!hp.batch_stat_grads).then_some(base.stats.as_slice());
    let mut g_theta = base.grads.theta();
    if corrupt {
        g_theta[0] += 1e-3 * (1.0 + g_theta[0].abs());
    }
    fd_max_rel_err(model, xb, yb, &smooth, stats, &base.grads.g_w, &g_theta, eps)
}

/// One randomized gradient-check configuration.
#[derive(Debug, Clone)]
pub struct FdCase {
    pub model: XnnModel,
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub hp: Hyperparams,
}

/// Builds a random small model and batch for gradient checking.
pub fn random_fd_case<R: Rng + ?Sized>(
    rng: &mut R,
    p: usize,
    k: usize,
    hidden: &[usize],
    batch: usize,
    link: LinkKind,
    lambda3: f64,
) -> Result<FdCase> {
    let hp = Hyperparams { k, hidden: hidden.to_vec(), lambda1: 1e-3, lambda2: 1e-3, lambda3, ..Hyperparams::default() };
    let mut model = init_model(p, &hp, rng)?;
    model.link = link;
    model.mu = StandardNormal.sample(rng);
    // Nonzero biases so tanh units sit away from their symmetric point.
    for s in &mut model.subnets {
        for l in &mut s.layers {
            l.biases.apply(|b| *b = 0.5 * Distribution::<f64>::sample(&StandardNormal, rng));
        }
    }
    let x = DMatrix::from_fn(batch, p, |_, _| rng.random_range(-1.0..1.0));
    let y = (0..batch)
        .map(|_| match link {
            LinkKind::Identity => StandardNormal.sample(rng),
            LinkKind::Logit => f64::from(u8::from(rng.random_bool(0.5))),
        })
        .collect();
    Ok(FdCase { model, x, y, hp })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdSuiteReport {
    /// Per-configuration maximum relative error.
    pub errors: Vec<f64>,
    pub max_rel_err: f64,
}

/// Gradient check over `n_configs` seeded random configurations mixing
/// regression and classification, several architectures, and roughness
/// weights including zero, with gradients through the batch moments and
/// with the moments held fixed. With `corrupt` the analytic gradient is
/// deliberately perturbed (negative control).
pub fn fd_check_suite(seed: u64, n_configs: usize, eps: f64, corrupt: bool) -> Result<FdSuiteReport> {
    const ARCHES: [&[usize]; 4] = [&[4, 3], &[10, 6], &[5], &[3, 4, 2]];
    const LAMBDA3: [f64; 4] = [1e-1, 1.0, 0.0, 1e-2];
    let mut errors = Vec::with_capacity(n_configs);
    for c in 0..n_configs {
        let mut rng = stream(seed, 0, c as u64, Role::Check);
        let p = 2 + c % 5;
        let k = 1 + c % p;
        let link = if c % 3 == 2 { LinkKind::Logit } else { LinkKind::Identity };
        let mut case = random_fd_case(&mut rng, p, k, ARCHES[c % 4], 8, link, LAMBDA3[(c / 4) % 4])?;
        case.hp.batch_stat_grads = c % 2 == 0;
        errors.push(fd_check_impl(&case.model, &case.x, &case.y, &case.hp, eps, corrupt)?);
    }
    let max_rel_err = errors.iter().copied().fold(0.0, f64::max);
    Ok(FdSuiteReport { errors, max_rel_err })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{subnet_eval, DenseLayer};
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn scalar_layer(w: f64, b: f64) -> DenseLayer {
        DenseLayer { weights: DMatrix::from_element(1, 1, w), biases: DVector::from_element(1, b) }
    }

    fn single_tanh() -> Subnetwork {
        Subnetwork::new(vec![scalar_layer(1.0, 0.0), scalar_layer(1.0, 0.0)], ActivationKind::Tanh).unwrap()
    }

    #[test]
    fn jet_at_zero_of_single_tanh() {
        let j = subnet_jet(&single_tanh(), &[0.0]);
        assert_eq!((j.v[0], j.d1[0], j.d2[0]), (0.0, 1.0, 0.0));
    }

    #[test]
    fn jet_second_derivative_matches_closed_form() {
        let t = 0.5f64.tanh();
        let oracle = -2.0 * t * (1.0 - t * t);
        let j = subnet_jet(&single_tanh(), &[0.5]);
        assert_abs_diff_eq!(j.d2[0], oracle, epsilon = 1e-15);
        assert_abs_diff_eq!(j.d2[0], -0.726861, epsilon = 1e-6);
    }

    #[test]
    fn linear_subnetworks_have_zero_curvature() {
        let mut rng = seeded(4, Role::Check);
        let s = Subnetwork::xavier(&[5, 3], ActivationKind::Linear, &mut rng);
        let j = subnet_jet(&s, &[-1.0, 0.2, 0.9]);
        assert!(j.d2.iter().all(|d| *d == 0.0));
        assert_eq!(roughness(&j, &NormState::default()), 0.0);
    }

    #[test]
    fn roughness_examples() {
        let j = subnet_jet(&single_tanh(), &[0.5]);
        let r = roughness(&j, &NormState::default());
        let t = 0.5f64.tanh();
        let oracle = (2.0 * t * (1.0 - t * t)).powi(2);
        assert_abs_diff_eq!(r, oracle, epsilon = 1e-15);
        // Published figure is the square of the six-digit curvature, so it
        // carries that rounding.
        assert_abs_diff_eq!(r, 0.528327, epsilon = 2e-6);
        let r2 = roughness(&j, &NormState { mean: 3.0, std: 2.0, epsilon: NORM_EPSILON });
        assert_abs_diff_eq!(r2, r / 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r2, 0.132082, epsilon = 1e-6);
    }

    proptest! {
        #[test]
        fn jets_match_finite_differences(seed in 0u64..500, z in -2.0f64..2.0) {
            let mut rng = seeded(seed, Role::Check);
            let s = Subnetwork::xavier(&[10, 6], ActivationKind::Tanh, &mut rng);
            let h = 1e-4;
            let f = |u: f64| subnet_eval(&s, &[u])[0];
            let (fm, f0, fp) = (f(z - h), f(z), f(z + h));
            let d1 = (fp - fm) / (2.0 * h);
            let d2 = (fp - 2.0 * f0 + fm) / (h * h);
            let j = subnet_jet(&s, &[z]);
            prop_assert!((j.v[0] - f0).abs() < 1e-14);
            prop_assert!(rel_err(j.d1[0], d1, 0.0) < 1e-5, "d1 {} vs {}", j.d1[0], d1);
            // Second differences lose ~8 digits to cancellation: allow a few
            // ulps of each sample, amplified by 1/h^2.
            let band = 16.0 * f64::EPSILON * (fp.abs() + 2.0 * f0.abs() + fm.abs()) / (h * h);
            let scale = j.d2[0].abs().max(1e-2);
            prop_assert!((j.d2[0] - d2).abs() - band < 1e-5 * scale, "d2 {} vs {}", j.d2[0], d2);
        }

        #[test]
        fn roughness_is_nonnegative(seed in 0u64..200) {
            let mut rng = seeded(seed, Role::Check);
            let s = Subnetwork::xavier(&[4, 3], ActivationKind::Tanh, &mut rng);
            let z: Vec<f64> = (0..7).map(|i| i as f64 * 0.3 - 1.0).collect();
            prop_assert!(roughness(&subnet_jet(&s, &z), &NormState::default()) >= 0.0);
        }
    }

    fn example_case(seed: u64) -> FdCase {
        random_fd_case(&mut seeded(seed, Role::Check), 5, 2, &[4, 3], 8, LinkKind::Identity, 0.1).unwrap()
    }

    #[test]
    fn variance_at_mean_intercept() {
        let mut c = example_case(0);
        c.model.beta.fill(0.0);
        let ybar = c.y.iter().sum::<f64>() / c.y.len() as f64;
        c.model.mu = ybar;
        let hp = Hyperparams { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, ..c.hp.clone() };
        let (loss, g) = loss_and_grads(&c.model, &c.x, &c.y, &hp).unwrap();
        let var = c.y.iter().map(|y| (y - ybar).powi(2)).sum::<f64>() / c.y.len() as f64;
        assert_abs_diff_eq!(loss, var, epsilon = 1e-14);
        assert_abs_diff_eq!(g.g_mu, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn pure_l1_subgradient_on_beta() {
        // Zeroed subnetworks give constant outputs, so the normalized outputs
        // vanish and the data term has no beta-gradient.
        let mut c = example_case(1);
        let hp = Hyperparams { lambda1: 0.0, lambda2: 1.0, lambda3: 0.0, ..c.hp.clone() };
        c.model.beta = DVector::from_vec(vec![0.7, -0.2]);
        c.model.subnets.iter_mut().for_each(|s| s.layers.iter_mut().for_each(|l| {
            l.weights.fill(0.0);
            l.biases.fill(0.0);
        }));
        let (_, g) = loss_and_grads(&c.model, &c.x, &c.y, &hp).unwrap();
        assert_eq!(g.g_beta.as_slice(), &[1.0, -1.0]);
    }

    #[test]
    fn no_penalties_equals_data_fit() {
        let c = example_case(2);
        let hp = Hyperparams { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, ..c.hp.clone() };
        let e = batch_eval(&c.model, &c.x, &c.y, &hp, None).unwrap();
        assert_abs_diff_eq!(e.loss.total, e.loss.data, epsilon = 1e-12);
    }

    #[test]
    fn fd_check_seed_zero_example() {
        let c = example_case(0);
        for moments in [false, true] {
            let hp = Hyperparams { batch_stat_grads: moments, ..c.hp.clone() };
            let err = fd_check(&c.model, &c.x, &c.y, &hp, 1e-5).unwrap();
            assert!(err <= 1e-5, "{err}");
        }
    }

    #[test]
    fn fd_check_constant_loss_is_exactly_zero() {
        let mut c = example_case(3);
        c.model.beta.fill(0.0);
        c.model.mu = 0.0;
        c.y.iter_mut().for_each(|y| *y = 0.0);
        let hp = Hyperparams { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, ..c.hp.clone() };
        let (_, g) = loss_and_grads(&c.model, &c.x, &c.y, &hp).unwrap();
        assert!(g.theta().iter().chain(g.g_w.iter()).all(|v| *v == 0.0));
        assert_eq!(fd_check(&c.model, &c.x, &c.y, &hp, 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn moment_gradients_ignore_output_scale() {
        // Rescaling a subnetwork's output layer leaves the normalized output
        // unchanged, so the gradient has no component along that direction.
        for seed in 0..6 {
            let c = example_case(seed);
            let hp = Hyperparams { lambda1: 0.0, lambda2: 0.0, lambda3: 0.3, ..c.hp.clone() };
            let (_, g) = loss_and_grads(&c.model, &c.x, &c.y, &hp).unwrap();
            for j in 0..c.model.k() {
                let last = c.model.subnets[j].layers.last().unwrap();
                let gl = g.g_layers[j].last().unwrap();
                let dir = last.weights.dot(&gl.weights) + last.biases.dot(&gl.biases);
                let scale = gl.weights.norm() + gl.biases.norm();
                assert!(dir.abs() <= 1e-10 * (1.0 + scale), "subnet {j}: {dir}");
            }
        }
    }

    #[test]
    fn linear_subnets_get_no_roughness_gradient() {
        let mut rng = seeded(8, Role::Check);
        let mut c = example_case(4);
        for s in &mut c.model.subnets {
            *s = Subnetwork::xavier(&[4, 3], ActivationKind::Linear, &mut rng);
        }
        let stats = batch_eval(&c.model, &c.x, &c.y, &c.hp, None).unwrap().stats;
        let (r, g) = roughness_and_grads(&c.model, &c.x, &stats).unwrap();
        assert_eq!(r, 0.0);
        assert!(g.theta().iter().chain(g.g_w.iter()).all(|v| *v == 0.0));
        let e = fd_check(&c.model, &c.x, &c.y, &c.hp, 1e-5).unwrap();
        assert!(e <= 1e-5, "{e}");
    }

    #[test]
    fn roughness_gradient_is_linear_in_lambda3() {
        let c = example_case(5);
        let stats = batch_eval(&c.model, &c.x, &c.y, &c.hp, None).unwrap().stats;
        let lam = 0.37;
        let with = batch_eval(&c.model, &c.x, &c.y, &Hyperparams { lambda3: lam, ..c.hp.clone() }, Some(&stats)).unwrap();
        let without = batch_eval(&c.model, &c.x, &c.y, &Hyperparams { lambda3: 0.0, ..c.hp.clone() }, Some(&stats)).unwrap();
        let (_, rough) = roughness_and_grads(&c.model, &c.x, &stats).unwrap();
        let (a, b, r) = (with.grads.theta(), without.grads.theta(), rough.theta());
        for i in 0..a.len() {
            assert_abs_diff_eq!(a[i] - b[i], lam * r[i], epsilon = 1e-10);
        }
        let d = &with.grads.g_w - &without.grads.g_w - lam * &rough.g_w;
        assert!(d.abs().max() < 1e-10);
    }

    #[test]
    fn frozen_stats_match_batch_stats_at_base_point() {
        let c = example_case(6);
        let hp = Hyperparams { batch_stat_grads: false, ..c.hp.clone() };
        let a = batch_eval(&c.model, &c.x, &c.y, &hp, None).unwrap();
        let b = batch_eval(&c.model, &c.x, &c.y, &hp, Some(&a.stats)).unwrap();
        assert_abs_diff_eq!(a.loss.total, b.loss.total, epsilon = 1e-12);
        let (ga, gb) = (a.grads.theta(), b.grads.theta());
        assert!(ga.iter().zip(&gb).all(|(x, y)| (x - y).abs() <= 1e-12));
        assert!((&a.grads.g_w - &b.grads.g_w).abs().max() <= 1e-12);
    }

    #[test]
    fn classification_gradients_check() {
        let c = random_fd_case(&mut seeded(11, Role::Check), 4, 3, &[10, 6], 8, LinkKind::Logit, 0.5).unwrap();
        assert!(fd_check(&c.model, &c.x, &c.y, &c.hp, 1e-5).unwrap() <= 1e-5);
    }

    #[test]
    fn suite_passes_and_negative_control_fails() {
        let ok = fd_check_suite(0, 20, 1e-5, false).unwrap();
        assert_eq!(ok.errors.len(), 20);
        assert!(ok.max_rel_err <= 1e-5, "{:?}", ok.errors);
        let bad = fd_check_suite(0, 4, 1e-5, true).unwrap();
        assert!(bad.max_rel_err > 1e-5);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut c = example_case(7);
        c.y[0] = f64::NAN;
        let err = loss_and_grads(&c.model, &c.x, &c.y, &c.hp).unwrap_err();
        assert!(matches!(err, XnnError::Numeric(ref m) if m.contains("data-fit")));
    }
}
