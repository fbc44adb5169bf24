//! Command-line front end: configuration, image and landmark files, and the
//! `train`, `infer`, `eval` and `bench-dsa` commands.

pub mod bench;
pub mod commands;
pub mod config;
pub mod fail;
pub mod io;
pub mod model;

pub use config::{Precision, RunConfig};
pub use fail::Fail;
