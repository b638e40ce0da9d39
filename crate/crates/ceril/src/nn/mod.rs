//! Differentiable computation core: tape, layers, distributions and the
//! optimizer.

pub mod checkpoint;
pub mod dist;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;

pub use checkpoint::{read_records, save_store, CkptRecord};
pub use dist::Categorical;
pub use graph::{Graph, GraphError, TensorId};
pub use params::{Adam, AdamConfig, ParamStore};
