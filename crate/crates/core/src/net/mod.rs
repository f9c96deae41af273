//! Transformer that maps a window of observables to a latent factor path
//! and a reconstruction of the observables.
//!
//! Three stacks: an Initial Encoder (self-attention over the observation
//! tokens), State Encoders (factor queries attending to observation tokens)
//! producing the one-dimensional bottleneck `x_hat`, and Measurement
//! Encoders (observation queries attending to the re-embedded factor) that
//! predict the observables. Gradients are computed by hand.

mod hyper;
pub mod layers;
mod model;
mod params;

pub use hyper::{FactorInit, Hyperparams};
pub use model::{
    backward, batch_loss, project_column, embed_factor, embed_window, forward, grad, init_factor, mixed_loss, CrossTrace, Example,
    ForwardTrace, Mode, SelfTrace,
};
pub use params::{
    load_checkpoint, save_checkpoint, sinusoidal_table, Attention, CrossEncoder, Ffn, LayerNorm, SelfEncoder,
    TensorKind, TransformerParams,
};
