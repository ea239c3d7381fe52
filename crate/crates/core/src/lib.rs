pub mod augment;
pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod infogan;
pub mod losses;
pub mod numkit;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
