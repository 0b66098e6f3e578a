// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod diffusion;
pub mod error;
pub mod graph;
pub mod hyperdecoder;
pub mod inr;
pub mod ivae;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod tensorio;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::ParamStore;
pub use tensor::Tensor;
