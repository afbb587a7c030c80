//! HTTP service and command-line front end for the home agent.

pub mod api;
pub mod settings;
