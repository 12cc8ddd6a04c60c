//! HTTP service and CLI over the dil engine.

pub mod api;
pub mod cli;
