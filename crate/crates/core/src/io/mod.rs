//! On-disk formats, run configuration and the synthetic benchmark.

pub mod checkpoint;
pub mod tensor_file;
pub mod benchmark;
pub mod config;
pub mod idx;
