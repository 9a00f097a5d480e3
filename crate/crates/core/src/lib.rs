pub mod dataset;
pub mod em;
pub mod error;
pub mod hmm;
pub mod inference;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod mstep;
pub mod quantile;
pub mod simulate;

pub use error::{Error, Result};
