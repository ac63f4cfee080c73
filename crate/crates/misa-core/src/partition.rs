//! Module partitioning and budgeted active-set selection.
//!
//! A module is one matrix parameter of the model. Selection draws modules
//! without replacement (renormalizing the remaining probabilities after each
//! draw) and admits a drawn module only while the running parameter total
//! stays strictly below `delta * n_model`. The pool is always exhausted, so a
//! rejected large module does not block smaller ones drawn later.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::PartitionError;
use crate::sampler::SamplingDistribution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModuleRole {
    Wq,
    Wk,
    Wv,
    Wo,
    W1,
    W2,
    Other,
}

impl ModuleRole {
    pub const ALL_TRANSFORMER: [ModuleRole; 6] = [
        ModuleRole::Wq,
        ModuleRole::Wk,
        ModuleRole::Wv,
        ModuleRole::Wo,
        ModuleRole::W1,
        ModuleRole::W2,
    ];
}

/// One matrix parameter: identity, position, role, and shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleSpec {
    pub id: usize,
    pub layer_index: usize,
    pub role: ModuleRole,
    pub rows: usize,
    pub cols: usize,
}

impl ModuleSpec {
    pub fn param_count(&self) -> u64 {
        (self.rows * self.cols) as u64
    }
}

/// The modules trained during one block epoch, with their parameter total.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveSet {
    pub ids: BTreeSet<usize>,
    pub total_params: u64,
}

impl ActiveSet {
    pub fn sorted_ids(&self) -> Vec<usize> {
        self.ids.iter().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionStrategy {
    Misa,
    Uniform,
    TopK,
    BottomK,
}

/// Builds one [`ModuleSpec`] per matrix parameter, ids assigned in
/// description order, and reports the total model parameter count.
pub fn partition_model(
    model_description: &[(usize, ModuleRole, usize, usize)],
) -> Result<(Vec<ModuleSpec>, u64), PartitionError> {
    if model_description.is_empty() {
        return Err(PartitionError::EmptyDescription);
    }
    let mut specs = Vec::with_capacity(model_description.len());
    let mut n_model = 0u64;
    for (id, &(layer_index, role, rows, cols)) in model_description.iter().enumerate() {
        if rows == 0 || cols == 0 {
            return Err(PartitionError::ZeroSizedMatrix(id));
        }
        let spec = ModuleSpec { id, layer_index, role, rows, cols };
        n_model += spec.param_count();
        specs.push(spec);
    }
    Ok((specs, n_model))
}

pub fn total_params(specs: &[ModuleSpec]) -> u64 {
    specs.iter().map(ModuleSpec::param_count).sum()
}

/// Draws indices without replacement, each draw proportional to the remaining
/// probability mass.
pub fn sample_order(probs: &[f64], rng: &mut impl Rng) -> Vec<usize> {
    let mut remaining: Vec<(usize, f64)> =
        probs.iter().copied().enumerate().filter(|&(_, p)| p > 0.0).collect();
    // Zero-probability modules are unreachable by sampling; append them last
    // so the budget loop still inspects the full pool deterministically.
    let zeros: Vec<usize> =
        probs.iter().enumerate().filter(|&(_, &p)| p == 0.0).map(|(i, _)| i).collect();
    let mut order = Vec::with_capacity(probs.len());
    while !remaining.is_empty() {
        let total: f64 = remaining.iter().map(|&(_, p)| p).sum();
        let mut target = rng.gen::<f64>() * total;
        let mut chosen = remaining.len() - 1;
        for (pos, &(_, p)) in remaining.iter().enumerate() {
            if target < p {
                chosen = pos;
                break;
            }
            target -= p;
        }
        order.push(remaining.remove(chosen).0);
    }
    order.extend(zeros);
    order
}

/// Walks the draw order, admitting each module iff the running total plus its
/// size stays strictly under the budget. The whole pool is inspected.
fn greedy_budget(
    specs: &[ModuleSpec],
    order: &[usize],
    budget: f64,
) -> Result<ActiveSet, PartitionError> {
    let mut ids = BTreeSet::new();
    let mut total = 0u64;
    for &idx in order {
        let count = specs[idx].param_count();
        if ((total + count) as f64) < budget {
            ids.insert(specs[idx].id);
            total += count;
        }
    }
    if ids.is_empty() {
        let smallest = specs.iter().map(ModuleSpec::param_count).min().unwrap_or(0);
        return Err(PartitionError::BudgetTooSmall { budget, smallest });
    }
    Ok(ActiveSet { ids, total_params: total })
}

fn select_all(specs: &[ModuleSpec]) -> ActiveSet {
    ActiveSet {
        ids: specs.iter().map(|s| s.id).collect(),
        total_params: total_params(specs),
    }
}

fn validate_delta(delta: f64) -> Result<(), PartitionError> {
    if !delta.is_finite() || delta <= 0.0 || delta > 1.0 {
        return Err(PartitionError::InvalidDelta(delta));
    }
    Ok(())
}

/// Importance-weighted selection under the trainable-parameter budget.
/// `delta = 1` is special-cased to select every module; strictness would
/// otherwise reject the module that exactly fills the model.
pub fn select_budgeted(
    specs: &[ModuleSpec],
    probs: &SamplingDistribution,
    delta: f64,
    rng: &mut impl Rng,
) -> Result<ActiveSet, PartitionError> {
    validate_delta(delta)?;
    if probs.len() != specs.len() {
        return Err(PartitionError::ProbsSpecsMismatch { probs: probs.len(), specs: specs.len() });
    }
    if delta == 1.0 {
        return Ok(select_all(specs));
    }
    let budget = delta * total_params(specs) as f64;
    let order = sample_order(probs.probs(), rng);
    greedy_budget(specs, &order, budget)
}

/// Budgeted selection with uniform draw probabilities.
pub fn select_uniform(
    specs: &[ModuleSpec],
    delta: f64,
    rng: &mut impl Rng,
) -> Result<ActiveSet, PartitionError> {
    validate_delta(delta)?;
    if delta == 1.0 {
        return Ok(select_all(specs));
    }
    let budget = delta * total_params(specs) as f64;
    let uniform = vec![1.0 / specs.len() as f64; specs.len()];
    let order = sample_order(&uniform, rng);
    greedy_budget(specs, &order, budget)
}

fn select_sorted_by_gain(
    specs: &[ModuleSpec],
    gains: &[f64],
    delta: f64,
    descending: bool,
) -> Result<ActiveSet, PartitionError> {
    validate_delta(delta)?;
    if gains.len() != specs.len() {
        return Err(PartitionError::GainsSpecsMismatch { gains: gains.len(), specs: specs.len() });
    }
    if delta == 1.0 {
        return Ok(select_all(specs));
    }
    let budget = delta * total_params(specs) as f64;
    let mut order: Vec<usize> = (0..specs.len()).collect();
    // Ties broken by lower module id for determinism.
    order.sort_by(|&i, &j| {
        let primary = if descending {
            gains[j].partial_cmp(&gains[i]).unwrap()
        } else {
            gains[i].partial_cmp(&gains[j]).unwrap()
        };
        primary.then(specs[i].id.cmp(&specs[j].id))
    });
    greedy_budget(specs, &order, budget)
}

/// Deterministic selection of the highest-gain modules under the budget.
pub fn select_topk(
    specs: &[ModuleSpec],
    gains: &[f64],
    delta: f64,
) -> Result<ActiveSet, PartitionError> {
    select_sorted_by_gain(specs, gains, delta, true)
}

/// Deterministic selection of the lowest-gain modules under the budget.
pub fn select_bottomk(
    specs: &[ModuleSpec],
    gains: &[f64],
    delta: f64,
) -> Result<ActiveSet, PartitionError> {
    select_sorted_by_gain(specs, gains, delta, false)
}
