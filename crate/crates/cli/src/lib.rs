//! Command-line pipeline around the `echogen` library.

pub mod checkpoint;
pub mod config;
pub mod pipeline;
pub mod selftest;
