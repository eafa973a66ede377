pub mod backbone;
pub mod config;
mod binio;
pub mod error;
pub mod harness;
pub mod heads;
pub mod mmoe;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};
pub use numerics::{Graph, Mode, ParamId, ParamStore, Tensor, Var};
