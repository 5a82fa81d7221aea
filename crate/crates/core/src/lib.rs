pub mod cif;
pub mod cli;
pub mod diffcore;
pub mod error;
pub mod evalmetrics;
pub mod losses;
pub mod models;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
