//! Ellipse barrier, its Lie derivatives, and exponential-CBF machinery.
//!
//! The barrier is `h = d - (a beta^2 + b beta r + c r^2)`. It depends only on
//! `(beta, r)`, so the rates `(delta_dot, tau_dot)` first show up in its second
//! derivative (relative degree two) and the constraint handed to the QP is
//!
//! ```text
//! Lf2h + LgLfh u + p0 h + p1 Lfh + eps >= 0
//! ```

use nalgebra::{DMatrix, DVector};

use crate::envelope::EllipseBarrier;
use crate::error::{ModelError, Result};
use crate::vehicle::{VehicleModel, VehicleState};

pub const DEFAULT_ALPHA0: f64 = 0.25;
pub const DEFAULT_ALPHA1: f64 = 1.0;

/// `h(x)`.
pub fn barrier(state: &VehicleState, ellipse: &EllipseBarrier) -> f64 {
    ellipse.h(state.beta, state.r)
}

/// Gradient of `h` w.r.t. `(beta, r)`.
fn grad(state: &VehicleState, e: &EllipseBarrier) -> (f64, f64) {
    let (beta, r) = (state.beta, state.r);
    (-(2.0 * e.a * beta + e.b * r), -(e.b * beta + 2.0 * e.c * r))
}

/// `Lf h`. `Lg h` is identically zero, so this is also `h_dot` for any input.
pub fn lie1(state: &VehicleState, ellipse: &EllipseBarrier, model: &VehicleModel) -> Result<f64> {
    let [r_dot, beta_dot, _] = model.velocity_derivative(state)?;
    let (h_beta, h_r) = grad(state, ellipse);
    Ok(h_beta * beta_dot + h_r * r_dot)
}

/// Barrier value and its first two Lie derivatives at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierEvaluation {
    pub h: f64,
    pub lf_h: f64,
    /// Input-free part of the second derivative.
    pub lf2_h: f64,
    /// Coefficients of `(delta_dot, tau_dot)` in the second derivative.
    pub lglf_h: [f64; 2],
}

impl BarrierEvaluation {
    /// `nu_1 = h_dot + alpha0 h`.
    pub fn nu1(&self, alpha0: f64) -> f64 {
        self.lf_h + alpha0 * self.h
    }
}

/// `h`, `Lf h`, `Lf^2 h` and `Lg Lf h` from one model evaluation.
pub fn evaluate(
    state: &VehicleState,
    ellipse: &EllipseBarrier,
    model: &VehicleModel,
) -> Result<BarrierEvaluation> {
    let ([r_dot, beta_dot, v_dot], jac) = model.rates_and_jacobian(state)?;
    let (h_beta, h_r) = grad(state, ellipse);
    let e = ellipse;

    let flow = nalgebra::Vector3::new(r_dot, beta_dot, v_dot);
    let drift = jac.wrt_state * flow;
    let (r_ddot, beta_ddot) = (drift[0], drift[1]);

    let curvature = -(2.0 * e.a * beta_dot * beta_dot
        + 2.0 * e.b * beta_dot * r_dot
        + 2.0 * e.c * r_dot * r_dot);
    let lf2_h = curvature + h_beta * beta_ddot + h_r * r_ddot;
    let g = &jac.wrt_actuators;
    let lglf_h = [
        h_beta * g[(1, 0)] + h_r * g[(0, 0)],
        h_beta * g[(1, 1)] + h_r * g[(0, 1)],
    ];
    Ok(BarrierEvaluation {
        h: barrier(state, ellipse),
        lf_h: h_beta * beta_dot + h_r * r_dot,
        lf2_h,
        lglf_h,
    })
}

/// `(Lf^2 h, Lg Lf h)`.
pub fn lie2(
    state: &VehicleState,
    ellipse: &EllipseBarrier,
    model: &VehicleModel,
) -> Result<(f64, [f64; 2])> {
    let ev = evaluate(state, ellipse, model)?;
    Ok((ev.lf2_h, ev.lglf_h))
}

/// Coefficients `p_0..p_{k-1}` of `prod (lambda + alpha_i)`, lowest order first.
pub fn vieta(alphas: &[f64]) -> Result<Vec<f64>> {
    if alphas.is_empty() {
        return Err(ModelError::EmptyPoles);
    }
    // Monic polynomial coefficients, lowest order first.
    let mut poly = vec![1.0];
    for &alpha in alphas {
        let mut next = vec![0.0; poly.len() + 1];
        for (i, &c) in poly.iter().enumerate() {
            next[i] += alpha * c;
            next[i + 1] += c;
        }
        poly = next;
    }
    poly.pop();
    Ok(poly)
}

/// Affine constraint `g_delta delta_dot + g_tau tau_dot + eps >= rhs`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConstraintRow {
    pub g_delta: f64,
    pub g_tau: f64,
    pub rhs: f64,
}

impl ConstraintRow {
    pub fn from_evaluation(ev: &BarrierEvaluation, p0: f64, p1: f64) -> Self {
        Self {
            g_delta: ev.lglf_h[0],
            g_tau: ev.lglf_h[1],
            rhs: -(ev.lf2_h + p0 * ev.h + p1 * ev.lf_h),
        }
    }

    /// Signed constraint margin for rates `(delta_dot, tau_dot)` and slack.
    pub fn margin(&self, delta_dot: f64, tau_dot: f64, eps: f64) -> f64 {
        self.g_delta * delta_dot + self.g_tau * tau_dot + eps - self.rhs
    }
}

/// Constraint row for the ellipse gains `(alpha0, alpha1)`.
pub fn constraint_row(
    state: &VehicleState,
    ellipse: &EllipseBarrier,
    model: &VehicleModel,
) -> Result<ConstraintRow> {
    let ev = evaluate(state, ellipse, model)?;
    let (p0, p1) = ellipse.poly_coefficients();
    Ok(ConstraintRow::from_evaluation(&ev, p0, p1))
}

/// Linear output system `eta_dot = F eta + G mu`, `h = C eta` for a
/// relative-degree-`k` barrier, with the pole-placement feedback `P`.
#[derive(Debug, Clone, PartialEq)]
pub struct EcbfCompanion {
    pub alphas: Vec<f64>,
    pub p: Vec<f64>,
    pub f: DMatrix<f64>,
    pub g: DVector<f64>,
    pub c: DVector<f64>,
}

impl EcbfCompanion {
    pub fn new(alphas: &[f64]) -> Result<Self> {
        let p = vieta(alphas)?;
        let k = alphas.len();
        let f = DMatrix::from_fn(k, k, |i, j| if j == i + 1 { 1.0 } else { 0.0 });
        let mut g = DVector::zeros(k);
        g[k - 1] = 1.0;
        let mut c = DVector::zeros(k);
        c[0] = 1.0;
        Ok(Self {
            alphas: alphas.to_vec(),
            p,
            f,
            g,
            c,
        })
    }

    pub fn order(&self) -> usize {
        self.alphas.len()
    }

    /// `F - G P^T`.
    pub fn closed_loop(&self) -> DMatrix<f64> {
        let pt = DVector::from_column_slice(&self.p).transpose();
        &self.f - &self.g * pt
    }

    /// Lower bound `C exp((F - G P^T) t) eta0` on `h(t)`.
    pub fn decay_bound(&self, eta0: &[f64], t: f64) -> f64 {
        let a = self.closed_loop() * t;
        let eta = DVector::from_column_slice(eta0);
        (self.c.transpose() * a.exp() * eta)[(0, 0)]
    }

    /// Checks `-alpha_i <= nu_i_dot / nu_i` for `i = 0..k-1`, given the
    /// derivative chain `eta_full = [h, h_dot, ..., h^(k)]` at the initial state.
    ///
    /// Returns the indices that violate the condition.
    pub fn initial_condition_violations(&self, eta_full: &[f64]) -> Vec<usize> {
        let k = self.order();
        assert_eq!(eta_full.len(), k + 1);
        // nu_i expressed as coefficients over eta_full: nu_{i+1} = D nu_i + alpha_i nu_i.
        let mut nu = vec![0.0; k + 1];
        nu[0] = 1.0;
        let mut bad = Vec::new();
        for i in 0..k {
            let val: f64 = nu.iter().zip(eta_full).map(|(c, e)| c * e).sum();
            let shifted: Vec<f64> = std::iter::once(0.0).chain(nu[..k].iter().copied()).collect();
            let dval: f64 = shifted.iter().zip(eta_full).map(|(c, e)| c * e).sum();
            if val > 0.0 && dval / val < -self.alphas[i] {
                bad.push(i);
            }
            nu = shifted
                .iter()
                .zip(&nu)
                .map(|(s, n)| s + self.alphas[i] * n)
                .collect();
        }
        bad
    }
}

/// Logs a warning when the initial state violates the exponential-decay
/// initial condition for the `k = 2` barrier with zero input.
pub fn check_initial_condition(
    state: &VehicleState,
    ellipse: &EllipseBarrier,
    model: &VehicleModel,
) -> Result<Vec<usize>> {
    let ev = evaluate(state, ellipse, model)?;
    let comp = EcbfCompanion::new(&[ellipse.alpha0, ellipse.alpha1])?;
    let bad = comp.initial_condition_violations(&[ev.h, ev.lf_h, ev.lf2_h]);
    if !bad.is_empty() {
        log::warn!(
            "initial state violates decay-rate condition for nu_{:?} (h = {:.4}, Lfh = {:.4})",
            bad,
            ev.h,
            ev.lf_h
        );
    }
    Ok(bad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::VehicleParams;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn ellipse() -> EllipseBarrier {
        EllipseBarrier::new(2.0, 1.2, 1.5, 1.0, 4.0, 8.0).unwrap()
    }

    #[test]
    fn barrier_examples() {
        let e = ellipse();
        assert_eq!(barrier(&VehicleState::straight(7.0), &e), e.d);
        // On the beta axis the boundary is at beta = sqrt(d/a).
        let s = VehicleState::new(0.0, (e.d / e.a).sqrt(), 7.0, 0.0, 0.0);
        assert!(barrier(&s, &e).abs() < 1e-15);
        let s1 = VehicleState::new(0.3, -0.4, 7.0, 0.0, 0.0);
        let s2 = VehicleState::new(-0.3, 0.4, 7.0, 0.0, 0.0);
        assert_eq!(barrier(&s1, &e), barrier(&s2, &e));
    }

    #[test]
    fn origin_has_zero_input_gain() {
        let m = VehicleModel::new(VehicleParams::default());
        let (_, gain) = lie2(&VehicleState::new(0.0, 0.0, 7.0, 0.1, 200.0), &ellipse(), &m).unwrap();
        assert_eq!(gain, [0.0, 0.0]);
    }

    #[test]
    fn lie1_vanishes_at_rest_and_ignores_inputs() {
        let m = VehicleModel::new(VehicleParams::default());
        assert_eq!(lie1(&VehicleState::straight(7.0), &ellipse(), &m).unwrap(), 0.0);
    }

    #[test]
    fn vieta_examples() {
        assert_eq!(vieta(&[1.0, 1.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(vieta(&[4.0, 8.0]).unwrap(), vec![32.0, 12.0]);
        assert_eq!(vieta(&[2.0, 3.0, 5.0]).unwrap(), vec![30.0, 31.0, 10.0]);
        assert_eq!(vieta(&[7.0]).unwrap(), vec![7.0]);
        assert_eq!(vieta(&[]).unwrap_err(), ModelError::EmptyPoles);
    }

    #[test]
    fn companion_closed_loop_has_requested_poles() {
        let comp = EcbfCompanion::new(&[4.0, 8.0]).unwrap();
        let a = comp.closed_loop();
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -32.0, -12.0]));
        let mut eig: Vec<f64> = a.complex_eigenvalues().iter().map(|z| z.re).collect();
        eig.sort_by(f64::total_cmp);
        assert_relative_eq!(eig[0], -8.0, epsilon = 1e-10);
        assert_relative_eq!(eig[1], -4.0, epsilon = 1e-10);
    }

    #[test]
    fn decay_bound_matches_closed_form() {
        // Distinct poles: h(t) = A e^{-4t} + B e^{-8t} with h(0)=1, h'(0)=0.
        let comp = EcbfCompanion::new(&[4.0, 8.0]).unwrap();
        for t in [0.0f64, 0.1, 0.5, 2.0] {
            let expected = 2.0 * (-4.0 * t).exp() - (-8.0 * t).exp();
            assert_relative_eq!(comp.decay_bound(&[1.0, 0.0], t), expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn initial_condition_check() {
        let comp = EcbfCompanion::new(&[4.0, 8.0]).unwrap();
        // h = 1, h' = -1, h'' = 0: nu0'/nu0 = -1 >= -4; nu1 = 3, nu1' = -4 -> -4/3 >= -8.
        assert!(comp.initial_condition_violations(&[1.0, -1.0, 0.0]).is_empty());
        // Rapid decay violates the first condition.
        assert_eq!(comp.initial_condition_violations(&[1.0, -10.0, 0.0]), vec![0]);
    }

    #[test]
    fn scaling_coefficients_scales_row() {
        let m = VehicleModel::new(VehicleParams::default());
        let s = VehicleState::new(0.4, -0.3, 7.0, -0.05, 150.0);
        let e = ellipse();
        let lambda = 3.5;
        let scaled = EllipseBarrier::new(
            e.a * lambda,
            e.b * lambda,
            e.c * lambda,
            e.d * lambda,
            e.alpha0,
            e.alpha1,
        )
        .unwrap();
        let r1 = constraint_row(&s, &e, &m).unwrap();
        let r2 = constraint_row(&s, &scaled, &m).unwrap();
        assert_relative_eq!(r2.g_delta, lambda * r1.g_delta, max_relative = 1e-12);
        assert_relative_eq!(r2.g_tau, lambda * r1.g_tau, max_relative = 1e-12);
        assert_relative_eq!(r2.rhs, lambda * r1.rhs, max_relative = 1e-12);
    }

    #[test]
    fn deep_interior_slow_state_is_inactive() {
        let m = VehicleModel::new(VehicleParams::default());
        let row = constraint_row(&VehicleState::new(0.01, -0.01, 7.0, 0.0, 0.0), &ellipse(), &m)
            .unwrap();
        assert!(row.rhs < 0.0);
        assert!(row.margin(0.0, 0.0, 0.0) > 0.0);
    }

    proptest! {
        #[test]
        fn vieta_matches_product_expansion(alphas in proptest::collection::vec(0.1..10.0f64, 1..7)) {
            let p = vieta(&alphas).unwrap();
            // Evaluate both forms at a few points.
            for &lam in &[-0.7, 0.3, 1.9] {
                let prod: f64 = alphas.iter().map(|a| lam + a).product();
                let poly = p.iter().enumerate().map(|(i, c)| c * f64::powi(lam, i as i32)).sum::<f64>()
                    + f64::powi(lam, alphas.len() as i32);
                prop_assert!((prod - poly).abs() <= 1e-10 * prod.abs().max(1.0));
            }
        }
    }
}
