//! Dense tensors, reverse-mode differentiation, layers, Adam and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod real;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{Graph, Mode, Var};
pub use layers::{subsampled_len, EncoderLayer, LayerDims, LayerStack, Linear, Subsampler};
pub use optim::{clip_global_norm, clip_norm_where, Adam, LrSchedule};
pub use real::Real;
pub use tensor::{Gradients, ParamGrad, ParamId, ParamStore, Parameter, Tensor};
