//! Command-line tools, file formats and dataset IO for `mafnet-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod inference;
pub mod maft;
pub mod pnm;
pub mod training;
