//! Minimal tensor, autograd and layer toolkit the models are built on.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{ConvGeom, Graph, Var};
pub use layers::{Conv2d, LayerNorm, Linear, TransformerBlock};
pub use optim::Adam;
pub use params::{Grads, ParamId, ParamStore};
pub use tensor::{Real, Tensor};
