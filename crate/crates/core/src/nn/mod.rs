//! Minimal differentiable layers, Adam, and gradient checking.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod sequential;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{gradient_check, layer_gradient_check, GradCheckOptions, GradCheckReport};
pub use layers::{Cache, Layer, LayerSpec, Mode};
pub use sequential::{Caches, Sequential};
