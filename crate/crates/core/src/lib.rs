//! Exact second-order MAML on a small convolutional network, plus the
//! representational-similarity toolkit (RSA, linear CKA, classical MDS)
//! used to track how its layer representations evolve.

pub mod autodiff;
pub mod conv;
pub mod error;
pub mod experiments;
pub mod maml;
pub mod mds;
pub mod models;
pub mod params;
pub mod repsim;
pub mod tasks;
pub mod tensor;

pub use autodiff::{Graph, Var, VarMap};
pub use error::{Error, Result};
pub use params::ParamSet;
pub use tensor::Tensor;
