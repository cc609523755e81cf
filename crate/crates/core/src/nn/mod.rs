pub mod linalg;
pub mod model;

pub use linalg::Scalar;
pub use model::{ForwardCache, Logits, ModelConfig, ModelParams, PackedBatch};
