//! Decoupled classification loss for few-shot detection under missing
//! labels, with a synthetic training harness and a missing-rate auditor.

pub mod annotations;
pub mod dcloss;
pub mod detection;
pub mod error;
pub mod experiment;
pub mod numerics;
pub mod sim;
pub mod trainer;

pub use error::{Error, ParseError, Result};
