pub mod cli;
pub mod error;
pub mod lm;
pub mod metrics;
pub mod moe_layer;
pub mod numerics;
pub mod routing;

pub use error::{Error, Result};
