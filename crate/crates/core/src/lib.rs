pub mod constrained;
pub mod error;
pub mod experiment;
pub mod io;
pub mod manifold;
pub mod neural;
pub mod numeric;
pub mod sampler;
pub mod schedule;
pub mod training;

pub use error::{Error, Result};
