//! Shape-agnostic transformer surrogate for spatiotemporal PDE data.
//!
//! The crate is organized bottom-up: [`tensor`] provides dense arrays with
//! reverse-mode gradients, [`uptf`] the seven-axis batch format and
//! normalization, [`datapipe`] sharded streaming and task sampling,
//! [`model`] the network itself, [`train`] and [`eval`] the optimization and
//! metric loops, and [`pdegen`] small finite-difference data generators.

pub mod error;
pub mod tensor;
pub mod datapipe;
pub mod uptf;
pub mod model;
pub mod train;
pub mod eval;
pub mod pdegen;

pub use error::{Error, Result};
pub use tensor::{DenseArray, Graph, Var};
