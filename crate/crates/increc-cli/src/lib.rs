//! Library surface of the pipeline CLI, kept separate from the binary so
//! integration tests can drive stages directly.

pub mod config;
pub mod manifest;
pub mod pipeline;
