//! Topic modeling by fitting a Full Dependence Mixture to a corpus's token
//! co-occurrence matrix.

pub mod cli;
pub mod cooccurrence;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod refine;
pub mod synthetic;
pub mod topics;
pub mod trainer;

pub use error::{FdmError, Result};
