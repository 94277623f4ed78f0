//! Dynamic variational embeddings (a static mean plus LSTM-driven Gaussian
//! variation per node) and a neural collaborative filtering recommender
//! built on them.

pub mod checkpoint;
pub mod data;
pub mod dve;
pub mod eval;
pub mod model;
pub mod ncf;
pub mod tensor;
pub mod train;

pub use tensor::{Graph, NodeId, ParamStore, Precision, Tensor, TensorError};
