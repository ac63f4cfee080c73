//! Preconditioner decay diagnostics for the analytical variant.
//!
//! `Gamma_t = diag(1/sqrt(vtilde_t + eps))` can only shrink within a block
//! epoch, so `DeltaGamma_t = Gamma_{t-1} - Gamma_t` is positive semi-definite
//! and the accumulated operator norms telescope to at most `2/sqrt(eps)`.

use serde::{Deserialize, Serialize};

use crate::matrix::DenseMatrix;

const PSD_TOLERANCE: f64 = -1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GammaSummary {
    /// Accumulated `||DeltaGamma||` (max diagonal gap per step).
    pub sum_dgamma_norm: f64,
    /// Accumulated `||DeltaGamma||^2`.
    pub sum_dgamma_sq: f64,
    /// Steps where some diagonal of `DeltaGamma` fell below `-1e-12`.
    pub psd_violations: usize,
}

impl GammaSummary {
    pub fn merge(&mut self, other: &GammaSummary) {
        self.sum_dgamma_norm += other.sum_dgamma_norm;
        self.sum_dgamma_sq += other.sum_dgamma_sq;
        self.psd_violations += other.psd_violations;
    }
}

/// Incremental observer of one module's `vtilde` stream over an epoch.
#[derive(Debug, Clone)]
pub struct GammaTracker {
    eps: f64,
    prev_gamma: Option<Vec<f64>>,
    summary: GammaSummary,
}

impl GammaTracker {
    pub fn new(eps: f64) -> Self {
        Self { eps, prev_gamma: None, summary: GammaSummary::default() }
    }

    fn gamma_of(&self, vtilde: &DenseMatrix) -> Vec<f64> {
        vtilde.data().iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect()
    }

    /// Seed the tracker with the epoch's initial second moment (t = 0).
    pub fn observe_initial(&mut self, vtilde0: &DenseMatrix) {
        self.prev_gamma = Some(self.gamma_of(vtilde0));
    }

    /// Fold in the `vtilde` produced by one inner step.
    pub fn observe(&mut self, vtilde: &DenseMatrix) {
        let gamma = self.gamma_of(vtilde);
        if let Some(prev) = &self.prev_gamma {
            let mut max_gap = f64::NEG_INFINITY;
            let mut violated = false;
            for (&p, &g) in prev.iter().zip(&gamma) {
                let gap = p - g;
                max_gap = max_gap.max(gap);
                if gap < PSD_TOLERANCE {
                    violated = true;
                }
            }
            self.summary.sum_dgamma_norm += max_gap;
            self.summary.sum_dgamma_sq += max_gap * max_gap;
            if violated {
                self.summary.psd_violations += 1;
            }
        }
        self.prev_gamma = Some(gamma);
    }

    pub fn finish(self) -> GammaSummary {
        self.summary
    }
}

/// Summarize a full epoch's `vtilde` stream at once. The first element is the
/// epoch's initial second moment; differences are taken between consecutive
/// elements.
pub fn gamma_diagnostics<'a>(
    stream: impl IntoIterator<Item = &'a DenseMatrix>,
    eps: f64,
) -> GammaSummary {
    let mut iter = stream.into_iter();
    let mut tracker = GammaTracker::new(eps);
    if let Some(first) = iter.next() {
        tracker.observe_initial(first);
    }
    for vtilde in iter {
        tracker.observe(vtilde);
    }
    tracker.finish()
}
