//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("eta must be > 0 for the regularized objective (got {0})")]
    NonPositiveEta(f64),
    #[error("eta must be >= 0 (got {0})")]
    NegativeEta(f64),
    #[error("probabilities do not form a distribution (sum = {sum})")]
    NotADistribution { sum: f64 },
    #[error("negative probability entry {value} at index {index}")]
    NegativeProbability { index: usize, value: f64 },
    #[error("gain at index {index} is not finite or negative: {value}")]
    InvalidGain { index: usize, value: f64 },
    #[error("ema beta must lie in [0, 1) (got {0})")]
    InvalidEmaBeta(f64),
    #[error("module index {0} out of range")]
    IndexOutOfRange(usize),
    #[error("sampled module {0} has no recorded period average")]
    MissingPeriodAverage(usize),
    #[error("parameter count must be positive")]
    ZeroParamCount,
    #[error("parameter count {count} does not match gradient size {len}")]
    ParamCountMismatch { count: usize, len: usize },
    #[error("layer partition is empty or contains an empty layer")]
    EmptyLayer,
    #[error("module count B must be positive")]
    ZeroModules,
}

#[derive(Debug, Error, PartialEq)]
pub enum PartitionError {
    #[error("model description is empty")]
    EmptyDescription,
    #[error("matrix at position {0} has zero rows or columns")]
    ZeroSizedMatrix(usize),
    #[error("probability vector length {probs} does not match module count {specs}")]
    ProbsSpecsMismatch { probs: usize, specs: usize },
    #[error("gain vector length {gains} does not match module count {specs}")]
    GainsSpecsMismatch { gains: usize, specs: usize },
    #[error("delta must lie in (0, 1] (got {0})")]
    InvalidDelta(f64),
    #[error("budget {budget} admits no module (smallest module has {smallest} parameters)")]
    BudgetTooSmall { budget: f64, smallest: u64 },
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("cache does not hold the tensors required for {0}")]
    CacheMismatch(String),
    #[error("softmax row {row} is not normalized (sum = {sum})")]
    UnnormalizedSoftmaxRow { row: usize, sum: f64 },
    #[error("loss is not finite: {0}")]
    NonFiniteLoss(f64),
    #[error("gradient contains a non-finite entry")]
    NonFiniteGradient,
    #[error("no activation bookkeeping for role {0:?}")]
    UnknownRole(crate::partition::ModuleRole),
    #[error("unknown task: {0}")]
    UnknownTask(String),
    #[error("finite-difference step must be positive (got {0})")]
    InvalidStep(f64),
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("non-finite loss at block epoch {epoch}, inner step {step}: {loss}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },
    #[error("engine config invalid: {0}")]
    InvalidConfig(String),
    #[error("second-moment inheritance requested but no previous epoch state exists")]
    MissingInheritance,
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("shape invalid: {0}")]
    InvalidShape(String),
    #[error("sequence-length crossover is undefined for L = 1")]
    SingleLayerCrossover,
    #[error("module count B must be positive")]
    ZeroModules,
}
