//! Dense tensors, reverse-mode gradients, layers and optimisers.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Var};
pub use layers::{attention, attention_tensors, Embedding, GruCell, LayerNorm, Linear};
pub use optim::{AdamConfig, AdamState};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
