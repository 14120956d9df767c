//! Sequential networks: layer kinds, forward evaluation, and reverse-mode
//! gradients.

mod layer;
mod network;

pub use layer::Layer;
pub use network::{ActivationTrace, GradientBundle, Network};
