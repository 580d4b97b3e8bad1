//! Minimal reverse-mode differentiation and the layers built on it.

mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{ConvGeom, Gradients, Graph, Var};
pub use layers::{position_encoding, Activation, AttentionConfig, AttentionEncoder, EncoderLayer, LayerNorm, Linear, Lstm, Mlp};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamSet};
pub use tensor::{gemm, matmul, Tensor};
