//! Importance sampling over modules.
//!
//! A sampling distribution over the B modules is chosen to maximize the
//! expected one-step descent, regularized toward uniform by a KL penalty with
//! temperature `eta`:
//!
//! ```text
//! J(p) = sum_b p_b * G_b - (1/eta) * sum_b p_b * ln(p_b * B)
//! ```
//!
//! The maximizer is the softmax `p_b = exp(eta*G_b) / sum_j exp(eta*G_j)`.
//! Gains `G_b` track an exponential moving average of each module's
//! size-normalized squared gradient norm; only sampled modules have their
//! gain refreshed, the rest keep their previous estimate.

use serde::{Deserialize, Serialize};

use crate::error::SamplerError;
use crate::matrix::DenseMatrix;

/// Cap on `eta * gain` before exponentiation. With max-subtraction the shifted
/// exponents lie in `[-EXP_CLAMP, 0]`, keeping every probability strictly
/// positive without changing the argmax.
const EXP_CLAMP: f64 = 700.0;

/// One nonnegative gain estimate per module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainVector {
    values: Vec<f64>,
}

impl GainVector {
    pub fn new(values: Vec<f64>) -> Result<Self, SamplerError> {
        for (index, &value) in values.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(SamplerError::InvalidGain { index, value });
            }
        }
        Ok(Self { values })
    }

    /// All-zero gains; the first distribution derived from these is uniform.
    pub fn zeros(len: usize) -> Self {
        Self { values: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// A probability vector over modules. Entries are allowed to sit on the
/// simplex boundary (the objective is evaluated on grid points there); the
/// distributions produced by [`optimal_distribution`] are strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingDistribution {
    probs: Vec<f64>,
}

impl SamplingDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, SamplerError> {
        for (index, &value) in probs.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(SamplerError::NegativeProbability { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(SamplerError::NotADistribution { sum });
        }
        Ok(Self { probs })
    }

    pub fn uniform(len: usize) -> Self {
        Self { probs: vec![1.0 / len as f64; len] }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn min_prob(&self) -> f64 {
        self.probs.iter().fold(f64::INFINITY, |acc, &p| acc.min(p))
    }
}

/// Temperature, EMA factor, and the optional gain cap backing the
/// probability lower-bound certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub eta: f64,
    pub ema_beta: f64,
    pub gain_clamp: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { eta: 0.5, ema_beta: 0.9, gain_clamp: None }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if !self.eta.is_finite() || self.eta < 0.0 {
            return Err(SamplerError::NegativeEta(self.eta));
        }
        if !self.ema_beta.is_finite() || !(0.0..1.0).contains(&self.ema_beta) {
            return Err(SamplerError::InvalidEmaBeta(self.ema_beta));
        }
        if let Some(clamp) = self.gain_clamp {
            if !clamp.is_finite() || clamp < 0.0 {
                return Err(SamplerError::InvalidGain { index: usize::MAX, value: clamp });
            }
        }
        Ok(())
    }
}

/// Expected-descent objective with KL regularization toward uniform,
/// using the convention `0 * ln 0 = 0`. Rejects `eta = 0`: the uniform limit
/// lives in [`optimal_distribution`], not here.
pub fn kl_regularized_objective(
    probs: &SamplingDistribution,
    gains: &GainVector,
    eta: f64,
) -> Result<f64, SamplerError> {
    if probs.len() != gains.len() {
        return Err(SamplerError::LengthMismatch { left: probs.len(), right: gains.len() });
    }
    if !(eta > 0.0) {
        return Err(SamplerError::NonPositiveEta(eta));
    }
    let b = probs.len() as f64;
    let mut expected_gain = 0.0;
    let mut kl = 0.0;
    for (&p, &g) in probs.probs().iter().zip(gains.values()) {
        expected_gain += p * g;
        if p > 0.0 {
            kl += p * (p * b).ln();
        }
    }
    Ok(expected_gain - kl / eta)
}

/// Raw-slice variant used by grid searches and the dominance comparison,
/// where boundary points and lifted distributions are evaluated directly.
pub(crate) fn objective_on_slices(probs: &[f64], gains: &[f64], eta: f64) -> f64 {
    let b = probs.len() as f64;
    let mut value = 0.0;
    for (&p, &g) in probs.iter().zip(gains) {
        value += p * g;
        if p > 0.0 {
            value -= p * (p * b).ln() / eta;
        }
    }
    value
}

/// Closed-form maximizer of the KL-regularized objective: a temperature
/// softmax over the gains. `eta = 0` returns the exact uniform distribution.
pub fn optimal_distribution(
    gains: &GainVector,
    eta: f64,
) -> Result<SamplingDistribution, SamplerError> {
    if !eta.is_finite() || eta < 0.0 {
        return Err(SamplerError::NegativeEta(eta));
    }
    let n = gains.len();
    if n == 0 {
        return Err(SamplerError::ZeroModules);
    }
    if eta == 0.0 {
        return Ok(SamplingDistribution::uniform(n));
    }
    let logits: Vec<f64> = gains.values().iter().map(|&g| (eta * g).min(EXP_CLAMP)).collect();
    let max_logit = logits.iter().fold(f64::NEG_INFINITY, |acc, &z| acc.max(z));
    let weights: Vec<f64> = logits.iter().map(|&z| (z - max_logit).max(-EXP_CLAMP).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(SamplingDistribution { probs: weights.into_iter().map(|w| w / total).collect() })
}

/// Squared Frobenius norm divided by the parameter count, i.e. the square of
/// the size-normalized gradient norm `||g||_F / sqrt(|m|)`.
pub fn scaled_sq_norm(grad: &DenseMatrix, param_count: usize) -> Result<f64, SamplerError> {
    if param_count == 0 {
        return Err(SamplerError::ZeroParamCount);
    }
    if param_count != grad.len() {
        return Err(SamplerError::ParamCountMismatch { count: param_count, len: grad.len() });
    }
    Ok(grad.frobenius_sq() / param_count as f64)
}

/// EMA refresh of the gains: sampled modules blend in their period-averaged
/// squared scaled norm, unsampled modules keep their previous estimate.
/// When `cfg.gain_clamp` is set, refreshed gains are capped at the clamp so
/// the [`probability_lower_bound`] certificate holds over the whole run.
pub fn update_gains(
    prev: &GainVector,
    sampled: &[usize],
    period_avg_sq_norms: &std::collections::BTreeMap<usize, f64>,
    cfg: &SamplerConfig,
) -> Result<GainVector, SamplerError> {
    cfg.validate()?;
    let mut values = prev.values().to_vec();
    for &b in sampled {
        if b >= values.len() {
            return Err(SamplerError::IndexOutOfRange(b));
        }
        let avg = *period_avg_sq_norms
            .get(&b)
            .ok_or(SamplerError::MissingPeriodAverage(b))?;
        if !avg.is_finite() || avg < 0.0 {
            return Err(SamplerError::InvalidGain { index: b, value: avg });
        }
        let mut next = cfg.ema_beta * values[b] + (1.0 - cfg.ema_beta) * avg;
        if let Some(clamp) = cfg.gain_clamp {
            next = next.min(clamp);
        }
        values[b] = next;
    }
    GainVector::new(values)
}

/// Gap between the module-level optimum of the KL objective and the same
/// objective evaluated at the best layer-uniform distribution (each layer's
/// optimal mass split evenly over its modules). Always >= 0; strictly
/// positive as soon as some layer has unequal module gains and eta > 0.
pub fn modulewise_dominance_gap(
    layer_partition: &[Vec<f64>],
    eta: f64,
) -> Result<f64, SamplerError> {
    if layer_partition.is_empty() || layer_partition.iter().any(|layer| layer.is_empty()) {
        return Err(SamplerError::EmptyLayer);
    }
    if !(eta > 0.0) {
        return Err(SamplerError::NonPositiveEta(eta));
    }
    let flat: Vec<f64> = layer_partition.iter().flatten().copied().collect();
    for (index, &g) in flat.iter().enumerate() {
        if !g.is_finite() || g < 0.0 {
            return Err(SamplerError::InvalidGain { index, value: g });
        }
    }
    let gains = GainVector::new(flat.clone())?;
    let module_opt = optimal_distribution(&gains, eta)?;
    let j_module = kl_regularized_objective(&module_opt, &gains, eta)?;

    // Best distribution constrained to be uniform within each layer: the
    // layer masses maximize the lifted objective, giving weights
    // proportional to K_l * exp(eta * mean gain of layer l).
    let logits: Vec<f64> = layer_partition
        .iter()
        .map(|layer| {
            let mean = layer.iter().sum::<f64>() / layer.len() as f64;
            (layer.len() as f64).ln() + (eta * mean).min(EXP_CLAMP)
        })
        .collect();
    let max_logit = logits.iter().fold(f64::NEG_INFINITY, |acc, &z| acc.max(z));
    let weights: Vec<f64> = logits.iter().map(|&z| (z - max_logit).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut lifted = Vec::with_capacity(gains.len());
    for (layer, w) in layer_partition.iter().zip(&weights) {
        let per_module = w / total / layer.len() as f64;
        lifted.extend(std::iter::repeat(per_module).take(layer.len()));
    }
    let j_layer = objective_on_slices(&lifted, gains.values(), eta);
    Ok(j_module - j_layer)
}

/// Certified floor on every probability produced by [`optimal_distribution`]
/// when all gains lie in `[0, gain_upper]`: `1 / (B * exp(eta * gain_upper))`.
pub fn probability_lower_bound(
    b: usize,
    eta: f64,
    gain_upper: f64,
) -> Result<f64, SamplerError> {
    if b == 0 {
        return Err(SamplerError::ZeroModules);
    }
    if !eta.is_finite() || eta < 0.0 {
        return Err(SamplerError::NegativeEta(eta));
    }
    if !gain_upper.is_finite() || gain_upper < 0.0 {
        return Err(SamplerError::InvalidGain { index: usize::MAX, value: gain_upper });
    }
    Ok(1.0 / (b as f64 * (eta * gain_upper).exp()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn dist(probs: &[f64]) -> SamplingDistribution {
        SamplingDistribution::new(probs.to_vec()).unwrap()
    }

    fn gains(values: &[f64]) -> GainVector {
        GainVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn objective_zero_for_uniform_and_zero_gains() {
        let p = dist(&[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        let g = gains(&[0.0, 0.0, 0.0]);
        let j = kl_regularized_objective(&p, &g, 1.0).unwrap();
        assert!(j.abs() < 1e-15, "got {j}");
    }

    #[test]
    fn objective_at_softmax_optimum_two_modules() {
        // gains (0, ln 2), eta 1: optimum is (1/3, 2/3) and the optimal value
        // is (1/eta) ln((1/B) sum exp(eta G)) = ln(3/2).
        let p = dist(&[1.0 / 3.0, 2.0 / 3.0]);
        let g = gains(&[0.0, 2.0_f64.ln()]);
        let j = kl_regularized_objective(&p, &g, 1.0).unwrap();
        assert!((j - 1.5_f64.ln()).abs() < 1e-12, "got {j}");
    }

    #[test]
    fn objective_handles_boundary_with_zero_times_log_zero() {
        let p = dist(&[1.0, 0.0]);
        let g = gains(&[5.0, 0.0]);
        let j = kl_regularized_objective(&p, &g, 1.0).unwrap();
        assert!((j - (5.0 - 2.0_f64.ln())).abs() < 1e-12, "got {j}");
        assert!((j - 4.3068528).abs() < 1e-6);
    }

    #[test]
    fn objective_rejects_eta_zero_and_length_mismatch() {
        let p = dist(&[0.5, 0.5]);
        let g = gains(&[1.0, 2.0]);
        assert_eq!(
            kl_regularized_objective(&p, &g, 0.0).unwrap_err(),
            SamplerError::NonPositiveEta(0.0)
        );
        let g3 = gains(&[1.0, 2.0, 3.0]);
        assert!(matches!(
            kl_regularized_objective(&p, &g3, 1.0).unwrap_err(),
            SamplerError::LengthMismatch { .. }
        ));
    }

    #[test]
    fn distribution_rejects_bad_sums() {
        assert!(matches!(
            SamplingDistribution::new(vec![0.5, 0.6]).unwrap_err(),
            SamplerError::NotADistribution { .. }
        ));
        assert!(matches!(
            SamplingDistribution::new(vec![1.5, -0.5]).unwrap_err(),
            SamplerError::NegativeProbability { .. }
        ));
    }

    #[test]
    fn optimal_distribution_eta_zero_is_exact_uniform() {
        let p = optimal_distribution(&gains(&[1.0, 2.0, 3.0]), 0.0).unwrap();
        assert_eq!(p.probs(), &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
    }

    #[test]
    fn optimal_distribution_matches_softmax() {
        let p = optimal_distribution(&gains(&[1.0, 2.0, 3.0]), 1.0).unwrap();
        let expected = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (got, want) in p.probs().iter().zip(expected) {
            assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
        }
        let p2 = optimal_distribution(&gains(&[0.0, 2.0_f64.ln()]), 1.0).unwrap();
        assert!((p2.probs()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((p2.probs()[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn optimal_distribution_rejects_non_finite_gains() {
        assert!(GainVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(GainVector::new(vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn optimal_distribution_survives_extreme_gains() {
        let p = optimal_distribution(&gains(&[0.0, 1e6]), 1.0).unwrap();
        assert!(p.probs().iter().all(|&x| x.is_finite() && x > 0.0));
        assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scaled_sq_norm_examples() {
        let ones = DenseMatrix::filled(2, 2, 1.0);
        assert_eq!(scaled_sq_norm(&ones, 4).unwrap(), 1.0);
        let m = DenseMatrix::from_vec(1, 3, vec![3.0, 4.0, 0.0]);
        assert!((scaled_sq_norm(&m, 3).unwrap() - 25.0 / 3.0).abs() < 1e-12);
        let zero = DenseMatrix::zeros(3, 5);
        assert_eq!(scaled_sq_norm(&zero, 15).unwrap(), 0.0);
        assert_eq!(scaled_sq_norm(&zero, 0).unwrap_err(), SamplerError::ZeroParamCount);
        assert!(scaled_sq_norm(&zero, 14).is_err());
    }

    #[test]
    fn update_gains_blends_only_sampled_entries() {
        let cfg = SamplerConfig { eta: 1.0, ema_beta: 0.9, gain_clamp: None };
        let mut avg = BTreeMap::new();
        avg.insert(0usize, 2.0);

        let next = update_gains(&gains(&[1.0]), &[0], &avg, &cfg).unwrap();
        assert!((next.values()[0] - 1.1).abs() < 1e-15);

        let next = update_gains(&gains(&[1.0, 5.0]), &[0], &avg, &cfg).unwrap();
        assert!((next.values()[0] - 1.1).abs() < 1e-15);
        assert_eq!(next.values()[1], 5.0);

        let mut fixed = BTreeMap::new();
        fixed.insert(0usize, 3.0);
        for beta in [0.0, 0.3, 0.99] {
            let cfg = SamplerConfig { ema_beta: beta, ..cfg.clone() };
            let next = update_gains(&gains(&[3.0]), &[0], &fixed, &cfg).unwrap();
            assert!((next.values()[0] - 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn update_gains_reports_missing_and_out_of_range() {
        let cfg = SamplerConfig::default();
        let avg = BTreeMap::new();
        assert_eq!(
            update_gains(&gains(&[1.0]), &[0], &avg, &cfg).unwrap_err(),
            SamplerError::MissingPeriodAverage(0)
        );
        let mut avg = BTreeMap::new();
        avg.insert(3usize, 1.0);
        assert_eq!(
            update_gains(&gains(&[1.0]), &[3], &avg, &cfg).unwrap_err(),
            SamplerError::IndexOutOfRange(3)
        );
    }

    #[test]
    fn update_gains_applies_clamp() {
        let cfg = SamplerConfig { eta: 1.0, ema_beta: 0.0, gain_clamp: Some(1.5) };
        let mut avg = BTreeMap::new();
        avg.insert(0usize, 40.0);
        let next = update_gains(&gains(&[0.0]), &[0], &avg, &cfg).unwrap();
        assert_eq!(next.values()[0], 1.5);
    }

    #[test]
    fn dominance_gap_zero_for_equal_gains_within_layers() {
        let gap = modulewise_dominance_gap(&[vec![1.0, 1.0], vec![2.0, 2.0]], 0.5).unwrap();
        assert!(gap.abs() < 1e-12, "got {gap}");
        let gap = modulewise_dominance_gap(&[vec![3.0, 3.0, 3.0]], 1.0).unwrap();
        assert!(gap.abs() < 1e-12, "got {gap}");
    }

    #[test]
    fn dominance_gap_positive_for_unequal_gains() {
        let gap = modulewise_dominance_gap(&[vec![1.0, 3.0]], 1.0).unwrap();
        assert!(gap > 1e-3, "got {gap}");
    }

    #[test]
    fn dominance_gap_rejects_empty_layers() {
        assert_eq!(
            modulewise_dominance_gap(&[], 1.0).unwrap_err(),
            SamplerError::EmptyLayer
        );
        assert_eq!(
            modulewise_dominance_gap(&[vec![1.0], vec![]], 1.0).unwrap_err(),
            SamplerError::EmptyLayer
        );
    }

    #[test]
    fn probability_lower_bound_examples() {
        assert_eq!(probability_lower_bound(4, 0.0, 0.0).unwrap(), 0.25);

        let bound = probability_lower_bound(2, 1.0, 3.0_f64.ln()).unwrap();
        assert!((bound - 1.0 / 6.0).abs() < 1e-15);
        let p = optimal_distribution(&gains(&[0.0, 3.0_f64.ln()]), 1.0).unwrap();
        assert!((p.min_prob() - 0.25).abs() < 1e-12);
        assert!(p.min_prob() >= bound);

        let bound = probability_lower_bound(3, 2.0, 1.0).unwrap();
        assert!((bound - 1.0 / (3.0 * (2.0_f64).exp())).abs() < 1e-12);
        assert!((bound - 0.045112).abs() < 1e-6);

        assert_eq!(probability_lower_bound(0, 1.0, 1.0).unwrap_err(), SamplerError::ZeroModules);
    }
}
