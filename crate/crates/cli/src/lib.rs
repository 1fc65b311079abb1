//! File formats and command implementations behind the `dcf` binary.

pub mod arch;
pub mod commands;
pub mod config;
pub mod pgm;
pub mod weights;
