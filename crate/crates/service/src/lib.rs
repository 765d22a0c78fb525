//! Command line and HTTP front ends for slider spaces.

pub mod api;
pub mod captioner;
pub mod cli;
pub mod queue;
