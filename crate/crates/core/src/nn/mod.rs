//! Minimal reverse-mode differentiation engine and the layers the agent,
//! auxiliary heads and PPO need.

mod error;
pub mod gradcheck;
mod graph;
mod layers;
mod params;
mod tensor;

pub use error::{NnError, Result};
pub use graph::{ConvGeometry, Graph, NodeId, ENTROPY_CLAMP};
pub use layers::{Conv2d, Embedding, GruCell, Linear};
pub use params::{init, AdamConfig, ParamGroup, ParamId, ParamInfo, ParamTape};
pub use tensor::{Tensor, View};
