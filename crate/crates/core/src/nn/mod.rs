//! Small decoder-only transformer, AdamW, sampling and checkpoints.

mod adamw;
mod checkpoint;
mod config;
mod float;
mod layout;
mod model;
pub(crate) mod sample;

pub use adamw::{AdamW, AdamWConfig};
pub use checkpoint::{Checkpoint, RngState};
pub use config::ModelConfig;
pub use float::Float;
pub use layout::{Init, TensorInfo};
pub use model::{log_softmax, KvCache, Transformer};
pub use sample::{sample_completion, Completion, Sampling};

/// A differentiable autoregressive policy over token ids.
///
/// Implemented by [`Transformer<f32>`]; the GRPO update only talks to this
/// trait, so toy policies can be driven through the same code path.
pub trait Policy: Sync {
    fn params(&self) -> &[f32];
    fn params_mut(&mut self) -> &mut [f32];

    /// Log-probability of `ids[t]` for each target position `t >= 1`.
    fn target_logprobs(&self, ids: &[u32], targets: &[usize], temperature: f32) -> crate::Result<Vec<f32>>;

    /// Returns the target log-probabilities `lp` and accumulates the
    /// gradient of `sum_i coeffs(lp)_i * lp_i` into `grads`.
    fn logprob_vjp(
        &self,
        ids: &[u32],
        targets: &[usize],
        temperature: f32,
        coeffs: &dyn Fn(&[f32]) -> Vec<f32>,
        grads: &mut [f32],
    ) -> crate::Result<Vec<f32>>;
}

impl Policy for Transformer<f32> {
    fn params(&self) -> &[f32] {
        Transformer::params(self)
    }

    fn params_mut(&mut self) -> &mut [f32] {
        Transformer::params_mut(self)
    }

    fn target_logprobs(&self, ids: &[u32], targets: &[usize], temperature: f32) -> crate::Result<Vec<f32>> {
        Transformer::target_logprobs(self, ids, targets, temperature)
    }

    fn logprob_vjp(
        &self,
        ids: &[u32],
        targets: &[usize],
        temperature: f32,
        coeffs: &dyn Fn(&[f32]) -> Vec<f32>,
        grads: &mut [f32],
    ) -> crate::Result<Vec<f32>> {
        Transformer::logprob_vjp(self, ids, targets, temperature, coeffs, grads)
    }
}
