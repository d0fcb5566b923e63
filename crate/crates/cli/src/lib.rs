//! Command-line front end for the HiT generator: verification suites,
//! attention benchmarks, toy training, sampling and parameter tables.

pub mod bench;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod ppm;
pub mod verify;
