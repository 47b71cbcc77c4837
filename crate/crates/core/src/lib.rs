//! Schema-driven extraction of interdependent variables from free-text
//! pathology reports, refined by an iterative self-reflection loop.

pub mod backend;
pub mod cli;
pub mod constraints;
pub mod engine;
pub mod error;
pub mod knowledge;
pub mod metrics;
pub mod prompt;
pub mod schema;
pub mod simulator;
pub mod tnm;

pub use error::{Error, Result};
