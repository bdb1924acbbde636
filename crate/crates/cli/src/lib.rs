//! Support library for the `eiv` binary: dataset CSV I/O and simulation
//! config parsing. Kept as a library target so integration tests can exercise
//! the formats directly.

pub mod config;
pub mod dataio;
