pub mod graph;
pub mod params;
pub mod tensor;

pub use graph::{Graph, MacCount, MacKind, Var};
pub use params::{fan_in_uniform, AdamConfig, Gradients, ParamId, ParamStore};
pub use tensor::{Real, Tensor};
