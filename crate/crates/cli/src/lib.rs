//! Command line and HTTP service for the shiftflow pipeline.

pub mod bundle;
pub mod cli;
pub mod http;
pub mod service;
pub mod store;
