//! HTTP service and command-line front end for the slide agent.

pub mod api;
pub mod cli;
pub mod manager;
