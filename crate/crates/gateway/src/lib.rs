//! HTTP gateway and command-line front end of the question-collection platform.

pub mod api;
pub mod cli;
pub mod config;
pub mod error;
pub mod server;
