//! Dense/conv network engine: traced forward passes, reverse-mode gradients
//! with respect to inputs and parameters, SGD and THM1 persistence.

mod io;
mod layer;
mod model;
mod train;

pub use io::{
    load_model, load_tensors, model_from_bytes, model_hash, model_to_bytes, save_model, save_tensors,
    tensors_from_bytes, tensors_to_bytes, MAGIC,
};
pub use layer::{Layer, LayerKind};
pub use model::{ActivationTrace, Model, ParamGrads, TraceSegment};
pub use train::{accuracy, sgd_train, TrainConfig};
