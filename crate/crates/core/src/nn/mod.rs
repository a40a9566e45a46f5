//! Layers, the causal transformer, Adam, and checkpoint files.

pub mod checkpoint;
mod layers;
mod optim;
mod params;
mod transformer;
#[cfg(test)]
mod tests;

pub use checkpoint::Checkpoint;
pub use layers::{Activation, Fwd, Linear, Mlp, MlpConfig};
pub use optim::{clip_scale, Adam, AdamConfig, StepStats};
pub use params::{Binder, Grads, Init, ParamStore};
pub use transformer::{KvCache, Transformer, TransformerConfig};
