pub mod adapters;
pub mod backbone;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod memory;
pub mod numerics;
pub mod router;

pub use error::{Error, Result};
