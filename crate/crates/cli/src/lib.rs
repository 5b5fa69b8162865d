//! Library surface of the command-line front end, so integration tests can
//! drive the same plan/propagate/verify/report implementations as the binary.

pub mod checks;
pub mod commands;
pub mod config;
pub mod svg;
