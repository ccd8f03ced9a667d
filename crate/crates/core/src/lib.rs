//! Progressive graph convolutional network (PGCN) for spatial-temporal
//! traffic forecasting, built on a small reverse-mode differentiation core.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kv;
pub mod model;
pub mod param;
pub mod tensor;
pub mod training;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
