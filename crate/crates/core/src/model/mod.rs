//! Decoder-only transformer with exact hand-written gradients.

mod config;
pub mod ops;
mod params;
mod transformer;

pub use config::ModelConfig;
pub use params::{init_params, GradientSet, Layout, LayerRanges, ParameterSet, TensorKind, TensorSpec, INIT_STD};
pub use transformer::{backward, forward_logits, forward_with_cache, loss_and_grads, ForwardCache};

use crate::error::Result;
use crate::scalar::Scalar;

/// Anything that maps token windows to next-token logits.
///
/// Evaluation and analysis code is written against this trait so planted
/// or degenerate models can stand in for trained ones.
pub trait LanguageModel<S: Scalar>: Sync {
    fn vocab_size(&self) -> usize;

    fn context_len(&self) -> usize;

    /// Logits `[batch, seq_len, vocab]` for `inputs: [batch, seq_len]`.
    fn logits(&self, inputs: &[u32], batch: usize, seq_len: usize) -> Result<Vec<S>>;
}

impl<S: Scalar> LanguageModel<S> for ParameterSet<S> {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn context_len(&self) -> usize {
        self.config().context_len
    }

    fn logits(&self, inputs: &[u32], batch: usize, seq_len: usize) -> Result<Vec<S>> {
        forward_logits(self, inputs, batch, seq_len)
    }
}
