//! Aspect-based sentiment classification toolkit.

pub mod checkpoint;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{AbsaError, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::ParamStore;
pub use tensor::{Element, Tensor};
