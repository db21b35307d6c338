//! File formats, run configuration and plotting behind the `radloc` binary.

pub mod config;
pub mod dataset;
pub mod io;
pub mod plot;
