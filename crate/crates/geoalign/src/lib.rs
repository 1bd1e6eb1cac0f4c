//! File formats, scene descriptions and command implementations behind the
//! `geoalign` binary.

pub mod commands;
pub mod error;
pub mod formats;
pub mod fsio;
pub mod specfile;

pub use error::CliError;
