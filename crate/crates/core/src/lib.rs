pub mod cae;
pub mod error;
pub mod esn;
pub mod ks;
pub mod metrics;
pub mod pipeline;
pub mod store;
pub mod tangent;

pub use error::{Error, Result};
