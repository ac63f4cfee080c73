//! Per-module Adam and AMSGrad steps.
//!
//! No bias correction anywhere, and epsilon sits inside the square root:
//! `theta -= alpha * m / sqrt(v + eps)`. The analytical variant additionally
//! maintains `vtilde = max(v, ||vtilde_prev||_max)` so the preconditioner
//! `Gamma = diag(1/sqrt(vtilde + eps))` can only shrink.

use serde::{Deserialize, Serialize};

use crate::error::EngineError;
use crate::matrix::DenseMatrix;

/// Learning-rate and moment hyperparameters shared by every step kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn validate(&self) -> Result<(), EngineError> {
        let ok = self.alpha.is_finite()
            && self.alpha >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(EngineError::InvalidConfig(format!(
                "alpha {}, beta1 {}, beta2 {}, eps {} outside valid ranges",
                self.alpha, self.beta1, self.beta2, self.eps
            )))
        }
    }
}

/// Optimizer state of one module. `vtilde_max` is the running scalar
/// `||vtilde||_max` of the analytical variant; `None` for the standard one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamModuleState {
    pub m: DenseMatrix,
    pub v: DenseMatrix,
    pub vtilde_max: Option<f64>,
    pub step: usize,
}

impl AdamModuleState {
    pub fn fresh(rows: usize, cols: usize) -> Self {
        Self { m: DenseMatrix::zeros(rows, cols), v: DenseMatrix::zeros(rows, cols), vtilde_max: None, step: 0 }
    }

    /// Fresh analytical state: `v` starts at the inherited scalar broadcast
    /// to the module's shape (zero at the first block epoch).
    pub fn fresh_analytical(rows: usize, cols: usize, inherited: f64) -> Self {
        Self {
            m: DenseMatrix::zeros(rows, cols),
            v: DenseMatrix::filled(rows, cols, inherited),
            vtilde_max: Some(inherited),
            step: 0,
        }
    }

    /// Current `vtilde` matrix: elementwise `max(v, vtilde_max)`.
    pub fn vtilde(&self) -> DenseMatrix {
        let floor = self.vtilde_max.unwrap_or(0.0);
        self.v.map(|x| x.max(floor))
    }
}

fn update_moments(
    grad: &DenseMatrix,
    state: &mut AdamModuleState,
    params: &AdamParams,
) -> Result<(), EngineError> {
    if !state.m.same_shape(grad) {
        return Err(EngineError::InvalidConfig(format!(
            "gradient shape {:?} does not match state shape {:?}",
            grad.shape(),
            state.m.shape()
        )));
    }
    if !grad.all_finite() {
        return Err(crate::error::ModelError::NonFiniteGradient.into());
    }
    let (b1, b2) = (params.beta1, params.beta2);
    for ((m, v), &g) in state.m.data_mut().iter_mut().zip(state.v.data_mut()).zip(grad.data()) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
    }
    state.step += 1;
    Ok(())
}

/// One standard Adam step: moments refresh, then
/// `theta -= alpha * m / sqrt(v + eps)`.
pub fn adam_step(
    theta: &mut DenseMatrix,
    grad: &DenseMatrix,
    state: &mut AdamModuleState,
    params: &AdamParams,
) -> Result<(), EngineError> {
    if !theta.same_shape(grad) {
        return Err(EngineError::InvalidConfig(format!(
            "gradient shape {:?} does not match parameter shape {:?}",
            grad.shape(),
            theta.shape()
        )));
    }
    update_moments(grad, state, params)?;
    for ((t, &m), &v) in theta.data_mut().iter_mut().zip(state.m.data()).zip(state.v.data()) {
        *t -= params.alpha * m / (v + params.eps).sqrt();
    }
    Ok(())
}

/// One AMSGrad-type step: moments refresh, `vtilde = max(v, ||vtilde||_max)`,
/// update with `sqrt(vtilde + eps)`. Returns the `vtilde` matrix of this step
/// so callers can feed the Gamma diagnostics.
pub fn amsgrad_step(
    theta: &mut DenseMatrix,
    grad: &DenseMatrix,
    state: &mut AdamModuleState,
    params: &AdamParams,
) -> Result<DenseMatrix, EngineError> {
    if !theta.same_shape(grad) {
        return Err(EngineError::InvalidConfig(format!(
            "gradient shape {:?} does not match parameter shape {:?}",
            grad.shape(),
            theta.shape()
        )));
    }
    update_moments(grad, state, params)?;
    let floor = state.vtilde_max.unwrap_or(0.0);
    let vtilde = state.v.map(|x| x.max(floor));
    for ((t, &m), &vt) in theta.data_mut().iter_mut().zip(state.m.data()).zip(vtilde.data()) {
        *t -= params.alpha * m / (vt + params.eps).sqrt();
    }
    state.vtilde_max = Some(vtilde.max_entry().max(floor));
    Ok(vtilde)
}

/// End-of-epoch momentum flush:
/// `theta -= alpha * beta1/(1-beta1) * m / sqrt(den + eps)` where `den` is
/// `v` for the standard variant and `vtilde` for the analytical one.
pub fn extra_momentum_step(
    theta: &mut DenseMatrix,
    state: &AdamModuleState,
    params: &AdamParams,
    use_vtilde: bool,
) -> Result<(), EngineError> {
    if !theta.same_shape(&state.m) {
        return Err(EngineError::InvalidConfig(format!(
            "state shape {:?} does not match parameter shape {:?}",
            state.m.shape(),
            theta.shape()
        )));
    }
    let multiplier = params.alpha * params.beta1 / (1.0 - params.beta1);
    let floor = if use_vtilde { state.vtilde_max.unwrap_or(0.0) } else { f64::NEG_INFINITY };
    for ((t, &m), &v) in theta.data_mut().iter_mut().zip(state.m.data()).zip(state.v.data()) {
        let den = if use_vtilde { v.max(floor) } else { v };
        *t -= multiplier * m / (den + params.eps).sqrt();
    }
    Ok(())
}

/// Scalar carried into the next block epoch's second moment:
/// `||vtilde^{n-1,T}||_max` of the previous epoch's module.
pub fn inherit_second_moment(prev_state: &AdamModuleState) -> Result<f64, EngineError> {
    prev_state.vtilde_max.ok_or(EngineError::MissingInheritance)
}

/// The convergence proof's auxiliary sequence
/// `x = theta - alpha * beta1/(1-beta1) * Gamma * m`, exposed for diagnostics.
pub fn auxiliary_iterate(
    theta: &DenseMatrix,
    state: &AdamModuleState,
    params: &AdamParams,
) -> DenseMatrix {
    let multiplier = params.alpha * params.beta1 / (1.0 - params.beta1);
    let floor = state.vtilde_max.unwrap_or(0.0);
    let mut out = theta.clone();
    for ((x, &m), &v) in out.data_mut().iter_mut().zip(state.m.data()).zip(state.v.data()) {
        let vt = v.max(floor);
        *x -= multiplier * m / (vt + params.eps).sqrt();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> AdamParams {
        AdamParams { alpha: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    fn scalar(x: f64) -> DenseMatrix {
        DenseMatrix::from_vec(1, 1, vec![x])
    }

    #[test]
    fn zero_gradient_is_a_fixed_point_from_fresh_state() {
        let mut theta = scalar(1.0);
        let mut state = AdamModuleState::fresh(1, 1);
        adam_step(&mut theta, &scalar(0.0), &mut state, &params()).unwrap();
        assert_eq!(theta.get(0, 0), 1.0);
        assert_eq!(state.m.get(0, 0), 0.0);
        assert_eq!(state.v.get(0, 0), 0.0);
    }

    #[test]
    fn single_step_hand_trace() {
        let mut theta = scalar(1.0);
        let mut state = AdamModuleState::fresh(1, 1);
        adam_step(&mut theta, &scalar(1.0), &mut state, &params()).unwrap();
        assert!((state.m.get(0, 0) - 0.1).abs() < 1e-15);
        assert!((state.v.get(0, 0) - 0.001).abs() < 1e-15);
        // 1 - 0.1 * 0.1 / sqrt(0.001 + 1e-8)
        assert!((theta.get(0, 0) - 0.6837736).abs() < 1e-6, "got {}", theta.get(0, 0));
    }

    #[test]
    fn zero_learning_rate_updates_moments_only() {
        let mut theta = scalar(2.5);
        let mut state = AdamModuleState::fresh(1, 1);
        let p = AdamParams { alpha: 0.0, ..params() };
        adam_step(&mut theta, &scalar(3.0), &mut state, &p).unwrap();
        assert_eq!(theta.get(0, 0), 2.5);
        assert!(state.m.get(0, 0) > 0.0);
        assert!(state.v.get(0, 0) > 0.0);
    }

    #[test]
    fn adam_rejects_shape_mismatch_and_non_finite() {
        let mut theta = scalar(1.0);
        let mut state = AdamModuleState::fresh(1, 1);
        let bad = DenseMatrix::zeros(2, 1);
        assert!(adam_step(&mut theta, &bad, &mut state, &params()).is_err());
        assert!(adam_step(&mut theta, &scalar(f64::NAN), &mut state, &params()).is_err());
    }

    #[test]
    fn extra_momentum_step_hand_trace() {
        // Exit state of the single-step trace: m = 0.1, v = 0.001.
        let mut theta = scalar(0.6837736);
        let state = AdamModuleState {
            m: scalar(0.1),
            v: scalar(0.001),
            vtilde_max: None,
            step: 1,
        };
        extra_momentum_step(&mut theta, &state, &params(), false).unwrap();
        assert!((theta.get(0, 0) - (-2.1622640)).abs() < 1e-6, "got {}", theta.get(0, 0));
    }

    #[test]
    fn extra_momentum_step_is_identity_on_fresh_state() {
        let mut theta = scalar(4.0);
        let state = AdamModuleState::fresh(1, 1);
        extra_momentum_step(&mut theta, &state, &params(), false).unwrap();
        assert_eq!(theta.get(0, 0), 4.0);
    }

    #[test]
    fn extra_momentum_multiplier_is_one_at_beta_half() {
        let p = AdamParams { beta1: 0.5, ..params() };
        let state = AdamModuleState {
            m: scalar(0.2),
            v: scalar(0.04),
            vtilde_max: None,
            step: 1,
        };
        let mut a = scalar(1.0);
        extra_momentum_step(&mut a, &state, &p, false).unwrap();
        // One plain m/sqrt(v+eps) step.
        let expected = 1.0 - p.alpha * 0.2 / (0.04_f64 + p.eps).sqrt();
        assert!((a.get(0, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn amsgrad_first_step_matches_adam_from_zero() {
        let p = params();
        let mut theta_a = scalar(1.0);
        let mut theta_b = scalar(1.0);
        let mut adam = AdamModuleState::fresh(1, 1);
        let mut ams = AdamModuleState::fresh_analytical(1, 1, 0.0);
        adam_step(&mut theta_a, &scalar(1.0), &mut adam, &p).unwrap();
        amsgrad_step(&mut theta_b, &scalar(1.0), &mut ams, &p).unwrap();
        assert_eq!(theta_a.get(0, 0), theta_b.get(0, 0));
    }

    #[test]
    fn amsgrad_running_max_prevents_preconditioner_growth() {
        let p = params();
        let mut theta = scalar(1.0);
        let mut state = AdamModuleState::fresh_analytical(1, 1, 0.0);
        let vt1 = amsgrad_step(&mut theta, &scalar(1.0), &mut state, &p).unwrap();
        assert!((vt1.get(0, 0) - 0.001).abs() < 1e-15);
        // Second gradient 0: v decays to beta2 * 0.001 but vtilde holds the max.
        let vt2 = amsgrad_step(&mut theta, &scalar(0.0), &mut state, &p).unwrap();
        assert!((vt2.get(0, 0) - 0.001).abs() < 1e-15);
        assert!((state.vtilde_max.unwrap() - 0.001).abs() < 1e-15);
    }

    #[test]
    fn vtilde_max_is_nondecreasing() {
        let p = params();
        let mut theta = scalar(0.0);
        let mut state = AdamModuleState::fresh_analytical(1, 1, 0.0);
        let mut prev = 0.0;
        for g in [0.5, -2.0, 0.1, 0.0, 3.0, -0.2] {
            amsgrad_step(&mut theta, &scalar(g), &mut state, &p).unwrap();
            let now = state.vtilde_max.unwrap();
            assert!(now >= prev);
            prev = now;
        }
    }

    #[test]
    fn inheritance_broadcasts_scalar() {
        let state = AdamModuleState {
            m: scalar(0.0),
            v: scalar(0.002),
            vtilde_max: Some(0.004),
            step: 5,
        };
        assert_eq!(inherit_second_moment(&state).unwrap(), 0.004);
        let next = AdamModuleState::fresh_analytical(2, 3, 0.004);
        assert!(next.v.data().iter().all(|&x| x == 0.004));
        // Standard states carry nothing to inherit.
        assert!(inherit_second_moment(&AdamModuleState::fresh(1, 1)).is_err());
    }

    #[test]
    fn auxiliary_iterate_examples() {
        let p = params();
        // Fresh state: x = theta.
        let theta = scalar(1.0);
        let state = AdamModuleState::fresh_analytical(1, 1, 0.0);
        assert_eq!(auxiliary_iterate(&theta, &state, &p).get(0, 0), 1.0);
        // Scalar hand trace: 1 - 9 * 0.1 * 0.1 / sqrt(0.001 + 1e-8).
        let state = AdamModuleState {
            m: scalar(0.1),
            v: scalar(0.001),
            vtilde_max: Some(0.001),
            step: 1,
        };
        let x = auxiliary_iterate(&theta, &state, &p).get(0, 0);
        assert!((x - (-1.8460376)).abs() < 1e-6, "got {x}");
    }

    #[test]
    fn moment_recursions_stay_inside_gradient_envelope() {
        let p = params();
        let mut theta = DenseMatrix::zeros(2, 2);
        let mut state = AdamModuleState::fresh(2, 2);
        let mut max_abs_g = 0.0_f64;
        let mut max_sq_g = 0.0_f64;
        let mut seed = 0x9e3779b97f4a7c15u64;
        for _ in 0..200 {
            let grad = DenseMatrix::from_fn(2, 2, |_, _| {
                seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 6.0
            });
            max_abs_g = max_abs_g.max(grad.max_abs());
            max_sq_g = max_sq_g.max(grad.data().iter().map(|g| g * g).fold(0.0, f64::max));
            adam_step(&mut theta, &grad, &mut state, &p).unwrap();
            assert!(state.m.max_abs() <= max_abs_g + 1e-12);
            assert!(state.v.data().iter().all(|&v| v <= max_sq_g + 1e-12));
        }
    }
}
