//! Local-concept accumulation (LCA) classification heads trained with a
//! maximum-entropy objective, on a small reverse-mode autodiff engine.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod lca;
pub mod model;
pub mod objectives;
pub mod ops;
pub mod optim;
pub mod param;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
