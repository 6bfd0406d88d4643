pub mod backbone;
pub mod container;
pub mod data;
pub mod dcp;
pub mod error;
pub mod graph;
pub mod nets;
pub mod params;
pub mod runtime;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Conv2dOpts, Graph, Var};
pub use params::ParamSet;
pub use tensor::{Real, Tensor};
