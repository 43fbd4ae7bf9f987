//! Parameter updates: Adam for everything except the projection matrix, and
//! Cayley-transform steps that keep the projection matrix on the Stiefel
//! manifold.

use nalgebra::allocator::Allocator;
use nalgebra::{DMatrix, DefaultAllocator, Dim, Matrix, OMatrix, Storage};

use crate::error::{Result, XnnError};
use crate::model::orthonormal_q;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self { m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], eta: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(XnnError::Shape(format!(
                "Adam state holds {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if !(eta > 0.0) {
            return Err(XnnError::Config(format!("learning rate must be positive, got {eta}")));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(XnnError::Numeric(format!("non-finite gradient at parameter {i}")));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= eta * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(st: &mut AdamState, params: &mut [f64], grads: &[f64], eta: f64) -> Result<()> {
    st.step(params, grads, eta)
}

/// `A = G W' - W G'`, skew-symmetric by construction.
pub fn skew_from_grad(w: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if w.shape() != g.shape() {
        return Err(XnnError::Shape(format!("W is {:?} but G is {:?}", w.shape(), g.shape())));
    }
    let m = g * w.transpose();
    Ok(&m - m.transpose())
}

/// Cayley step `W(tau) = (I + tau/2 A)^{-1} (I - tau/2 A) W` with
/// `A = skew_from_grad(W, G)`. `W(tau)' W(tau) = W' W` up to rounding.
pub fn cayley_step(w: &DMatrix<f64>, g: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    let a = skew_from_grad(w, g)?;
    let p = w.nrows();
    let half = 0.5 * tau;
    let eye = DMatrix::<f64>::identity(p, p);
    let lhs = &eye + half * &a;
    let rhs = (&eye - half * &a) * w;
    lhs.lu()
        .solve(&rhs)
        .ok_or_else(|| XnnError::Numeric("singular Cayley system".into()))
}

/// `lambda * sign(x)` elementwise with `sign(0) = 0`.
pub fn l1_subgradient<R: Dim, C: Dim, S: Storage<f64, R, C>>(x: &Matrix<f64, R, C, S>, lambda: f64) -> OMatrix<f64, R, C>
where
    DefaultAllocator: Allocator<R, C>,
{
    x.map(|v| {
        if v > 0.0 {
            lambda
        } else if v < 0.0 {
            -lambda
        } else {
            0.0
        }
    })
}

/// Stiefel-manifold stepper with periodic QR re-orthonormalization to stop
/// rounding drift from accumulating.
#[derive(Debug, Clone, PartialEq)]
pub struct CayleyStepper {
    pub tau: f64,
    pub reortho_every: usize,
    pub steps: usize,
}

impl CayleyStepper {
    pub fn new(tau: f64, reortho_every: usize) -> Self {
        Self { tau, reortho_every, steps: 0 }
    }

    pub fn step(&mut self, w: &mut DMatrix<f64>, g: &DMatrix<f64>) -> Result<()> {
        *w = cayley_step(w, g, self.tau)?;
        self.steps += 1;
        if self.reortho_every > 0 && self.steps % self.reortho_every == 0 {
            *w = orthonormal_q(w);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::orthogonality_residual;
    use crate::rng::{seeded, Role};
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;
    use rand::RngExt;
    use rand_distr::{Distribution, StandardNormal};

    fn random_stiefel(rng: &mut crate::rng::XnnRng, p: usize, k: usize) -> DMatrix<f64> {
        orthonormal_q(&DMatrix::from_fn(p, k, |_, _| StandardNormal.sample(rng)))
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut st = AdamState::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        st.step(&mut p, &[0.0; 3], 0.001).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_example() {
        let mut st = AdamState::new(1);
        let mut p = vec![1.0];
        st.step(&mut p, &[0.5], 0.001).unwrap();
        assert_abs_diff_eq!(p[0], 1.0 - 0.001 * 0.5 / (0.5 + 1e-8), epsilon = 1e-15);
        assert_abs_diff_eq!(p[0], 0.999, epsilon = 1e-10);
    }

    #[test]
    fn adam_first_step_moves_by_eta_against_gradient() {
        let mut rng = seeded(1, Role::Check);
        for _ in 0..100 {
            let g: Vec<f64> = (0..5).map(|_| rng.random_range(-10.0..10.0)).collect();
            let mut p = vec![0.0; 5];
            AdamState::new(5).step(&mut p, &g, 0.01).unwrap();
            for (pi, gi) in p.iter().zip(&g) {
                assert_eq!(pi.signum(), -gi.signum());
                assert!((pi.abs() - 0.01).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn adam_rejects_bad_input() {
        let mut st = AdamState::new(2);
        let mut p = vec![0.0; 2];
        assert!(matches!(st.step(&mut p, &[f64::NAN, 0.0], 0.1), Err(XnnError::Numeric(_))));
        assert!(matches!(st.step(&mut p, &[0.0, 0.0], 0.0), Err(XnnError::Config(_))));
        assert!(matches!(st.step(&mut p, &[0.0], 0.1), Err(XnnError::Shape(_))));
    }

    #[test]
    fn skew_examples() {
        let w = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        assert_eq!(skew_from_grad(&w, &DMatrix::zeros(2, 1)).unwrap(), DMatrix::zeros(2, 2));
        assert_eq!(skew_from_grad(&w, &w).unwrap(), DMatrix::zeros(2, 2));
        let g = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let a = skew_from_grad(&w, &g).unwrap();
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]));
        let mut rng = seeded(2, Role::Check);
        let w = random_stiefel(&mut rng, 6, 3);
        let g = DMatrix::from_fn(6, 3, |_, _| StandardNormal.sample(&mut rng));
        let a = skew_from_grad(&w, &g).unwrap();
        assert_eq!(a.transpose(), -a);
    }

    #[test]
    fn cayley_zero_gradient_is_fixed_point() {
        let mut rng = seeded(3, Role::Check);
        let w = random_stiefel(&mut rng, 5, 2);
        assert_eq!(cayley_step(&w, &DMatrix::zeros(5, 2), 0.1).unwrap(), w);
    }

    #[test]
    fn cayley_planar_rotation() {
        let w = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let g = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let out = cayley_step(&w, &g, 0.1).unwrap();
        // (I + 0.05 A) x = (I - 0.05 A) e1 with A = [[0,-1],[1,0]], by Cramer's rule.
        let det = 1.0 + 0.05 * 0.05;
        let (r0, r1) = (1.0, -0.05);
        let oracle = [(r0 * 1.0 - (-0.05) * r1) / det, (1.0 * r1 - 0.05 * r0) / det];
        assert_abs_diff_eq!(out[0], oracle[0], epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], oracle[1], epsilon = 1e-12);
        assert_abs_diff_eq!(out[0], 0.995012, epsilon = 1e-6);
        assert_abs_diff_eq!(out[1], -0.099751, epsilon = 1e-6);
        let angle = -2.0 * 0.05f64.atan();
        assert_abs_diff_eq!(out[0], angle.cos(), epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], angle.sin(), epsilon = 1e-12);
    }

    #[test]
    fn cayley_preserves_orthogonality() {
        let mut rng = seeded(4, Role::Check);
        for _ in 0..1000 {
            let p = rng.random_range(1..12);
            let k = rng.random_range(1..=p);
            let w = random_stiefel(&mut rng, p, k);
            let scale = 10f64.powf(rng.random_range(-2.0..2.0));
            let g = DMatrix::from_fn(p, k, |_, _| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng));
            let tau = rng.random_range(1e-6..=1.0);
            let out = cayley_step(&w, &g, tau).unwrap();
            assert!(orthogonality_residual(&out) <= 1e-10);
        }
    }

    #[test]
    fn cayley_descends_on_quadratic() {
        // f(W) = 0.5 ||W - T||^2, gradient W - T.
        let mut rng = seeded(5, Role::Check);
        for _ in 0..100 {
            let w = random_stiefel(&mut rng, 6, 2);
            let t = DMatrix::from_fn(6, 2, |_, _| StandardNormal.sample(&mut rng));
            let f = |m: &DMatrix<f64>| 0.5 * (m - &t).norm_squared();
            let g = &w - &t;
            let out = cayley_step(&w, &g, 1e-3).unwrap();
            assert!(f(&out) < f(&w));
        }
    }

    #[test]
    fn cayley_step_vanishes_linearly_with_tau() {
        let mut rng = seeded(6, Role::Check);
        let w = random_stiefel(&mut rng, 5, 3);
        let g = DMatrix::from_fn(5, 3, |_, _| StandardNormal.sample(&mut rng));
        let d: Vec<f64> = [1e-2, 1e-3, 1e-4]
            .iter()
            .map(|&tau| (cayley_step(&w, &g, tau).unwrap() - &w).norm() / tau)
            .collect();
        // ||W(tau) - W|| / tau tends to ||A W||.
        let aw = (skew_from_grad(&w, &g).unwrap() * &w).norm();
        for r in &d {
            assert!((r - aw).abs() / aw < 0.05, "{r} vs {aw}");
        }
        assert!((d[2] - aw).abs() < (d[0] - aw).abs() + 1e-12);
    }

    #[test]
    fn l1_subgradient_examples() {
        let x = DVector::from_vec(vec![1.0, -2.0, 0.0]);
        assert_eq!(l1_subgradient(&x, 0.5).as_slice(), &[0.5, -0.5, 0.0]);
        assert_eq!(l1_subgradient(&x, 0.0).as_slice(), &[0.0, 0.0, 0.0]);
        assert_eq!(l1_subgradient(&DVector::from_vec(vec![-3.0]), 1e-3).as_slice(), &[-1e-3]);
    }

    #[test]
    fn stepper_reorthonormalizes_periodically() {
        let mut rng = seeded(7, Role::Check);
        let mut w = random_stiefel(&mut rng, 8, 4);
        let mut st = CayleyStepper::new(0.1, 100);
        for _ in 0..1000 {
            let g = DMatrix::from_fn(8, 4, |_, _| StandardNormal.sample(&mut rng));
            st.step(&mut w, &g).unwrap();
            assert!(orthogonality_residual(&w) <= 1e-6);
        }
        assert_eq!(st.steps, 1000);
    }
}
