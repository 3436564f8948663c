//! Command-line experiments and real-data fitting for two-stage transfer
//! Lasso, built on `translasso-core`.

pub mod config;
pub mod error;
pub mod io;
pub mod real_data;
pub mod records;
pub mod runs;

pub use config::Config;
pub use error::{Error, Result};
pub use runs::RunContext;
