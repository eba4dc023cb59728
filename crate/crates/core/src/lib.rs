//! Automated discovery of diverse Lenia patterns with goal exploration over
//! a growing hierarchy of learned behavioral-characterization spaces.

pub mod error;
pub mod evaluate;
pub mod fft;
pub mod grid;
pub mod imgep;
pub mod bc;
pub mod cppn;
pub mod embedding;
pub mod lenia;
pub mod metrics;
pub mod store;
pub mod tree;

pub use error::{Error, Result};
pub use grid::Grid;
pub use lenia::{KernelSpec, Lenia, Rollout, UpdateRuleParams};
