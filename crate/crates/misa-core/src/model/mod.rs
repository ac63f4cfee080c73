//! Desk-scale differentiable models with exact hand-written gradients.

pub mod fd;
pub mod tasks;
pub mod transformer;

use rand_chacha::ChaCha8Rng;

use crate::error::ModelError;
use crate::matrix::DenseMatrix;
use crate::partition::ModuleSpec;

/// Contract between a trainable model and the optimizer engine: expose the
/// module list, evaluate stochastic losses, and return the requested module
/// gradients from one shared backward pass.
pub trait Model {
    fn module_specs(&self) -> &[ModuleSpec];

    fn n_model(&self) -> u64 {
        self.module_specs().iter().map(ModuleSpec::param_count).sum()
    }

    fn param(&self, id: usize) -> &DenseMatrix;

    fn param_mut(&mut self, id: usize) -> &mut DenseMatrix;

    /// Draws the next mini-batch from `rng` and returns its loss together
    /// with the gradients of the modules in `need`, all from one backward
    /// pass. The amount of randomness consumed must not depend on `need`.
    fn batch_loss_and_grads(
        &self,
        rng: &mut ChaCha8Rng,
        need: &[usize],
    ) -> Result<(f64, Vec<(usize, DenseMatrix)>), ModelError>;

    /// Deterministic full-objective loss, independent of any batch draw.
    fn full_loss(&self) -> f64;

    /// Squared norm of the deterministic full-objective gradient.
    fn full_grad_sq_norm(&self) -> f64;

    /// Flattened view of all module parameters in id order.
    fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for spec in self.module_specs() {
            out.extend_from_slice(self.param(spec.id).data());
        }
        out
    }

    fn set_flat_params(&mut self, flat: &[f64]) {
        let specs: Vec<ModuleSpec> = self.module_specs().to_vec();
        let mut offset = 0;
        for spec in &specs {
            let len = spec.param_count() as usize;
            self.param_mut(spec.id)
                .data_mut()
                .copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
    }
}
