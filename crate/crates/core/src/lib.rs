//! Instance-specific batch normalization with domain-guided virtual
//! classification, applied to synthetic multidomain density regression.

pub mod cli;
pub mod dvc;
pub mod error;
pub mod isbn;
pub mod losses;
pub mod numerics;
pub mod parameterizer;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
