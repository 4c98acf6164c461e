pub mod acquisition;
pub mod config;
pub mod control;
pub mod corpus;
pub mod dtm;
pub mod began;
pub mod dam;
pub mod error;
pub mod fixtures;
pub mod imaging;
pub mod nn;
pub mod pipeline;
pub mod style;

pub use error::{Error, Result};
