//! Central finite-difference gradient oracle.

use crate::error::ModelError;

/// Central differences per coordinate: `(f(x+h e_i) - f(x-h e_i)) / 2h`.
pub fn finite_difference_grad(
    f: &dyn Fn(&[f64]) -> f64,
    params: &[f64],
    step: f64,
) -> Result<Vec<f64>, ModelError> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(ModelError::InvalidStep(step));
    }
    let mut point = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let original = point[i];
        point[i] = original + step;
        let plus = f(&point);
        point[i] = original - step;
        let minus = f(&point);
        point[i] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(ModelError::NonFiniteLoss(if plus.is_finite() { minus } else { plus }));
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Relative Frobenius error between an analytic gradient and its
/// finite-difference reference.
pub fn relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    let diff_sq: f64 =
        analytic.iter().zip(reference).map(|(a, r)| (a - r) * (a - r)).sum();
    let ref_sq: f64 = reference.iter().map(|r| r * r).sum();
    (diff_sq.sqrt()) / ref_sq.sqrt().max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_the_point_itself() {
        let f = |x: &[f64]| 0.5 * x.iter().map(|v| v * v).sum::<f64>();
        let grad = finite_difference_grad(&f, &[1.0, 2.0], 1e-6).unwrap();
        assert!((grad[0] - 1.0).abs() < 1e-10);
        assert!((grad[1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn linear_gradient_recovers_coefficients() {
        let a = [3.0, -1.5, 0.25];
        let f = move |x: &[f64]| x.iter().zip(&a).map(|(v, c)| v * c).sum::<f64>();
        let grad = finite_difference_grad(&f, &[0.4, 0.8, -0.3], 1e-5).unwrap();
        for (g, c) in grad.iter().zip(&a) {
            assert!((g - c).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_step_and_non_finite_loss() {
        let f = |_: &[f64]| 1.0;
        assert!(finite_difference_grad(&f, &[1.0], 0.0).is_err());
        let nan = |_: &[f64]| f64::NAN;
        assert!(finite_difference_grad(&nan, &[1.0], 1e-5).is_err());
    }
}
